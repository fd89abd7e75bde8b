//! Built-in pseudonym sets, 64 entries each.

use rand::Rng;

use crate::model::answer::Profile;
use crate::model::stage::PseudonymSet;

pub const SET_SIZE: usize = 64;

const ANIMALS: [&str; SET_SIZE] = [
    "Owl", "Bear", "Fox", "Wolf", "Otter", "Badger", "Beaver", "Bison", "Camel", "Cheetah", "Crane",
    "Deer", "Dolphin", "Eagle", "Elephant", "Falcon", "Ferret", "Finch", "Flamingo", "Frog",
    "Gazelle", "Gecko", "Giraffe", "Goose", "Gorilla", "Hare", "Hawk", "Hedgehog", "Heron",
    "Hippo", "Ibis", "Iguana", "Jackal", "Jaguar", "Kangaroo", "Koala", "Lemur", "Leopard",
    "Lion", "Llama", "Lynx", "Magpie", "Marmot", "Meerkat", "Moose", "Narwhal", "Newt", "Ocelot",
    "Octopus", "Panda", "Panther", "Parrot", "Pelican", "Penguin", "Puffin", "Quail", "Rabbit",
    "Raccoon", "Raven", "Salmon", "Seal", "Sparrow", "Tiger", "Turtle",
];

const NATURE: [&str; SET_SIZE] = [
    "Mountain", "River", "Forest", "Meadow", "Canyon", "Glacier", "Valley", "Lake", "Ocean",
    "Desert", "Island", "Prairie", "Tundra", "Volcano", "Waterfall", "Lagoon", "Reef", "Dune",
    "Cliff", "Cove", "Creek", "Delta", "Fjord", "Grove", "Harbor", "Hill", "Marsh", "Mesa",
    "Oasis", "Peak", "Pond", "Ridge", "Savanna", "Shore", "Spring", "Stream", "Summit", "Swamp",
    "Thicket", "Brook", "Bay", "Bluff", "Boulder", "Cedar", "Cloud", "Comet", "Dawn", "Dew",
    "Ember", "Fern", "Frost", "Gale", "Horizon", "Maple", "Moss", "Nebula", "Pebble", "Pine",
    "Rain", "Sequoia", "Sky", "Storm", "Thunder", "Willow",
];

const NUMBERS: [&str; SET_SIZE] = [
    "5192", "1047", "2385", "3906", "4418", "6021", "7734", "8850", "9163", "1276", "2519",
    "3648", "4790", "5832", "6957", "7081", "8214", "9347", "1463", "2586", "3629", "4752",
    "5875", "6908", "7023", "8146", "9269", "1392", "2415", "3538", "4661", "5784", "6807",
    "7930", "8053", "9176", "1299", "2322", "3445", "4568", "5691", "6714", "7837", "8960",
    "9083", "1106", "2229", "3352", "4475", "5598", "6621", "7744", "8867", "9990", "1013",
    "2136", "3259", "4382", "5405", "6528", "7651", "8774", "9897", "1920",
];

const ANIMAL_AVATARS: [&str; 8] = ["🦉", "🐻", "🦊", "🐺", "🦦", "🦡", "🦫", "🦬"];

pub fn entries(set: PseudonymSet) -> &'static [&'static str; SET_SIZE] {
    match set {
        PseudonymSet::Animal => &ANIMALS,
        PseudonymSet::Nature => &NATURE,
        PseudonymSet::Numeric => &NUMBERS,
    }
}

pub fn profile_for(set: PseudonymSet, index: usize) -> Profile {
    let word = entries(set)[index % SET_SIZE];
    let avatar = match set {
        PseudonymSet::Animal => ANIMAL_AVATARS[index % ANIMAL_AVATARS.len()].to_string(),
        PseudonymSet::Nature => "🌿".to_string(),
        PseudonymSet::Numeric => "#".to_string(),
    };
    Profile {
        display_name: format!("Anonymous {word}"),
        avatar,
        pronouns: String::new(),
    }
}

/// Picks a random entry not already taken. Falls back to any entry once the
/// set is exhausted.
pub fn assign<R: Rng>(set: PseudonymSet, taken: &[String], rng: &mut R) -> Profile {
    let free: Vec<usize> = (0..SET_SIZE)
        .filter(|&i| !taken.iter().any(|t| *t == profile_for(set, i).display_name))
        .collect();
    let index = if free.is_empty() {
        rng.random_range(0..SET_SIZE)
    } else {
        free[rng.random_range(0..free.len())]
    };
    profile_for(set, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::seeded_rng;
    use std::collections::HashSet;

    #[test]
    fn every_set_has_64_distinct_entries() {
        for set in [PseudonymSet::Animal, PseudonymSet::Nature, PseudonymSet::Numeric] {
            let unique: HashSet<_> = entries(set).iter().collect();
            assert_eq!(unique.len(), SET_SIZE, "{set:?}");
        }
    }

    #[test]
    fn assignment_avoids_collisions_until_exhausted() {
        let mut rng = seeded_rng(3);
        let mut taken = Vec::new();
        for _ in 0..SET_SIZE {
            let p = assign(PseudonymSet::Animal, &taken, &mut rng);
            assert!(!taken.contains(&p.display_name));
            taken.push(p.display_name);
        }
        assert!(taken.contains(&"Anonymous Owl".to_string()));
    }
}

//! Elections, reveal snapshots and payouts.

pub mod election;
pub mod payout;
pub mod reveal;

pub use election::{compute_election_winner, mean_rank, Ballot, ElectionResult, Tally, TallyError};
pub use payout::{compute_payout, PayoutData, PayoutError, PayoutMode, PayoutRow};
pub use reveal::{build_reveal, RevealData, RevealError, RevealSection, RevealSnapshot};

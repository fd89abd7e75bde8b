use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ids::{PublicId, QuestionId, StageId};
use crate::time::Timestamp;

/// A single response value.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "camelCase")]
pub enum AnswerValue {
    Text(String),
    /// Option id of a multiple-choice question.
    Choice(String),
    /// Option ids of a checkbox question.
    Choices(Vec<String>),
    Scale(i64),
}

impl AnswerValue {
    /// Key used for attribute bucketing and CSV cells.
    pub fn key(&self) -> String {
        match self {
            AnswerValue::Text(s) | AnswerValue::Choice(s) => s.clone(),
            AnswerValue::Choices(v) => {
                let mut v = v.clone();
                v.sort();
                v.join(";")
            }
            AnswerValue::Scale(n) => n.to_string(),
        }
    }

    /// Exact match; checkbox answers compare as sets.
    pub fn matches(&self, expected: &AnswerValue) -> bool {
        match (self, expected) {
            (AnswerValue::Choices(a), AnswerValue::Choices(b)) => {
                let mut a = a.clone();
                let mut b = b.clone();
                a.sort();
                a.dedup();
                b.sort();
                b.dedup();
                a == b
            }
            _ => self == expected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Profile {
    pub display_name: String,
    #[serde(default)]
    pub avatar: String,
    #[serde(default)]
    pub pronouns: String,
}

/// Answer key for one question about one cohort member.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SubjectAnswer {
    pub question_id: QuestionId,
    pub subject: PublicId,
    pub value: AnswerValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum AnswerContent {
    /// Info, terms, chat and other stages that collect nothing.
    Acknowledged,
    Profile { profile: Profile },
    Survey { answers: BTreeMap<QuestionId, AnswerValue> },
    PerParticipant { answers: Vec<SubjectAnswer> },
    Ranking { ranking: Vec<String> },
}

impl AnswerContent {
    /// Survey answers, if this is a survey answer.
    pub fn survey_answers(&self) -> Option<&BTreeMap<QuestionId, AnswerValue>> {
        match self {
            AnswerContent::Survey { answers } => Some(answers),
            _ => None,
        }
    }

    pub fn survey(pairs: impl IntoIterator<Item = (&'static str, AnswerValue)>) -> Self {
        AnswerContent::Survey {
            answers: pairs
                .into_iter()
                .map(|(k, v)| (QuestionId::from(k), v))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            AnswerContent::Acknowledged => true,
            AnswerContent::Profile { .. } => false,
            AnswerContent::Survey { answers } => answers.is_empty(),
            AnswerContent::PerParticipant { answers } => answers.is_empty(),
            AnswerContent::Ranking { ranking } => ranking.is_empty(),
        }
    }
}

/// A stored stage answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AnswerRecord {
    pub stage_id: StageId,
    pub submitted_at: Timestamp,
    #[serde(default)]
    pub timed_out: bool,
    pub content: AnswerContent,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkbox_answers_compare_as_sets() {
        let a = AnswerValue::Choices(vec!["b".into(), "a".into()]);
        let b = AnswerValue::Choices(vec!["a".into(), "b".into()]);
        assert!(a.matches(&b));
        assert_eq!(a.key(), "a;b");
        assert!(!AnswerValue::Choice("a".into()).matches(&AnswerValue::Text("a".into())));
    }
}

//! The experiment configuration language.

pub mod answer;
pub mod canonical;
pub mod config;
pub mod fork;
pub mod pseudonyms;
pub mod stage;
pub mod templates;
pub mod validate;

pub use answer::{AnswerContent, AnswerRecord, AnswerValue, Profile, SubjectAnswer};
pub use canonical::{canonicalize, parse_config};
pub use config::{AccessRole, ExperimentConfig, ExperimentSettings, Metadata};
pub use fork::{fork_experiment, ForkError};
pub use stage::*;
pub use validate::{validate_experiment_config, Severity, ValidationIssue, ValidationReport};

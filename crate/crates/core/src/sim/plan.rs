//! Simulation plans: which config to run, how scripted participants behave
//! and when to stop.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ids::StageId;
use crate::llm::scripted::Script;
use crate::model::answer::{AnswerContent, Profile};
use crate::model::canonical::parse_config;
use crate::model::config::ExperimentConfig;
use crate::model::stage::{ProfileMode, StageConfig, StageParams};

use super::SimError;

/// Safety cap for `allTerminal` runs that never finish.
pub const DEFAULT_CAP_SECONDS: u64 = 24 * 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SimulationPlan {
    /// Experiment config JSON, relative to the plan file.
    pub experiment_config: PathBuf,
    pub participant_scripts: Vec<ParticipantScript>,
    /// Scripted provider responses, relative to the plan file. Every call
    /// gets the default response when absent.
    #[serde(default)]
    pub agent_provider_script: Option<PathBuf>,
    pub seed: u64,
    pub cohort_count: usize,
    /// Defaults to the number of scripts. Scripts are assigned round-robin.
    #[serde(default)]
    pub participants_per_cohort: Option<usize>,
    pub stop_condition: StopCondition,
    /// Facilitator attention checks sent to every live participant.
    #[serde(default)]
    pub attention_checks: Vec<AttentionCheckPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StopCondition {
    AllTerminal,
    MaxSimSeconds(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AttentionCheckPlan {
    pub at_seconds: u64,
    #[serde(default = "default_deadline")]
    pub deadline_seconds: u32,
}

fn default_deadline() -> u32 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ParticipantScript {
    /// Used by self-chosen profile stages.
    #[serde(default)]
    pub profile: Option<Profile>,
    #[serde(default)]
    pub stages: BTreeMap<StageId, StageScript>,
    #[serde(default)]
    pub timing_jitter: Jitter,
    #[serde(default = "yes")]
    pub acknowledge_attention_checks: bool,
    #[serde(default = "yes")]
    pub accept_transfers: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StageScript {
    /// Chat messages, one per action, before voting to end the chat.
    #[serde(default)]
    pub messages: Vec<String>,
    /// Submission for this stage. For per-participant surveys give survey
    /// answers; each is applied to every subject.
    #[serde(default)]
    pub answer: Option<AnswerContent>,
    /// Ranks the offered candidates instead of a fixed answer.
    #[serde(default)]
    pub ranking: Option<RankingRule>,
    /// Stop acting on reaching this stage.
    #[serde(default)]
    pub drop_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum RankingRule {
    AsListed,
    Reversed,
}

/// Uniform delay before each action, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Jitter {
    pub min_seconds: f64,
    pub max_seconds: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter {
            min_seconds: 1.0,
            max_seconds: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for PlanIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Whether a stage rejects an empty submission.
pub fn requires_answer(stage: &StageConfig) -> bool {
    match &stage.params {
        StageParams::TermsOfService
        | StageParams::Survey(_)
        | StageParams::SurveyPerParticipant(_)
        | StageParams::Comprehension(_)
        | StageParams::RankingElection(_) => true,
        StageParams::Profile(p) => p.mode != ProfileMode::AssignedPseudonym,
        _ => false,
    }
}

impl ParticipantScript {
    fn covers(&self, stage: &StageConfig) -> bool {
        let s = self.stages.get(&stage.id);
        match &stage.params {
            StageParams::Profile(_) => self.profile.is_some() || s.is_some_and(|s| s.answer.is_some()),
            StageParams::RankingElection(_) => s.is_some_and(|s| s.answer.is_some() || s.ranking.is_some()),
            _ => s.is_some_and(|s| s.answer.is_some()),
        }
    }

    /// Index of the stage where this script drops out, if any.
    fn drop_out_index(&self, config: &ExperimentConfig) -> Option<usize> {
        config
            .stages
            .iter()
            .position(|st| self.stages.get(&st.id).is_some_and(|s| s.drop_out))
    }
}

impl SimulationPlan {
    pub fn per_cohort(&self) -> usize {
        self.participants_per_cohort.unwrap_or(self.participant_scripts.len())
    }

    pub fn cap_seconds(&self) -> u64 {
        match self.stop_condition {
            StopCondition::AllTerminal => DEFAULT_CAP_SECONDS,
            StopCondition::MaxSimSeconds(s) => s,
        }
    }

    /// Structural checks plus script coverage of every stage that needs an
    /// answer (up to a script's drop-out point).
    pub fn validate(&self, config: &ExperimentConfig) -> Vec<PlanIssue> {
        let mut out = Vec::new();
        let mut issue = |path: String, message: String| out.push(PlanIssue { path, message });
        if self.participant_scripts.is_empty() {
            issue("participantScripts".into(), "at least one script is required".into());
        }
        if self.cohort_count == 0 {
            issue("cohortCount".into(), "must be at least 1".into());
        }
        if self.per_cohort() == 0 {
            issue("participantsPerCohort".into(), "must be at least 1".into());
        }
        if self.stop_condition == StopCondition::MaxSimSeconds(0) {
            issue("stopCondition.maxSimSeconds".into(), "must be positive".into());
        }
        for (i, script) in self.participant_scripts.iter().enumerate() {
            let j = script.timing_jitter;
            if !(j.min_seconds >= 0.0 && j.max_seconds >= j.min_seconds && j.max_seconds.is_finite()) {
                issue(
                    format!("participantScripts[{i}].timingJitter"),
                    "need 0 <= minSeconds <= maxSeconds".into(),
                );
            }
            for id in script.stages.keys() {
                if config.stage(id).is_none() {
                    issue(format!("participantScripts[{i}].stages.{id}"), "no such stage".into());
                }
            }
            let stop = script.drop_out_index(config).unwrap_or(config.stages.len());
            for stage in &config.stages[..stop] {
                if requires_answer(stage) && !script.covers(stage) {
                    issue(
                        format!("participantScripts[{i}].stages.{}", stage.id),
                        format!("stage '{}' needs an answer and the script gives none", stage.id),
                    );
                }
            }
        }
        out
    }
}

/// A plan with its referenced files read.
#[derive(Debug, Clone)]
pub struct LoadedPlan {
    pub plan: SimulationPlan,
    pub config: ExperimentConfig,
    pub provider_script: Script,
}

fn read(path: &Path) -> Result<Vec<u8>, SimError> {
    std::fs::read(path).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl LoadedPlan {
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let plan: SimulationPlan = serde_json::from_slice(&read(path)?).map_err(|source| SimError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg_path = base.join(&plan.experiment_config);
        let config = parse_config(&read(&cfg_path)?).map_err(|e| SimError::Config {
            path: cfg_path.clone(),
            message: e.to_string(),
        })?;
        let provider_script = match &plan.agent_provider_script {
            Some(p) => {
                let p = base.join(p);
                serde_json::from_slice(&read(&p)?).map_err(|source| SimError::Parse { path: p, source })?
            }
            None => Script::default(),
        };
        Ok(LoadedPlan {
            plan,
            config,
            provider_script,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::templates::lost_at_sea;

    fn script_with(stages: &[(&str, StageScript)]) -> ParticipantScript {
        ParticipantScript {
            profile: None,
            stages: stages.iter().map(|(k, v)| (StageId::from(*k), v.clone())).collect(),
            timing_jitter: Jitter::default(),
            acknowledge_attention_checks: true,
            accept_transfers: true,
        }
    }

    fn plan(scripts: Vec<ParticipantScript>) -> SimulationPlan {
        SimulationPlan {
            experiment_config: "cfg.json".into(),
            participant_scripts: scripts,
            agent_provider_script: None,
            seed: 1,
            cohort_count: 1,
            participants_per_cohort: None,
            stop_condition: StopCondition::AllTerminal,
            attention_checks: Vec::new(),
        }
    }

    fn answered(answer: AnswerContent) -> StageScript {
        StageScript {
            answer: Some(answer),
            ..StageScript::default()
        }
    }

    #[test]
    fn missing_election_answer_fails_coverage() {
        let cfg = lost_at_sea("a@lab");
        let p = plan(vec![script_with(&[("leader-task", answered(AnswerContent::survey([])))])]);
        let issues = p.validate(&cfg);
        assert_eq!(issues.len(), 1, "{issues:?}");
        assert_eq!(issues[0].path, "participantScripts[0].stages.election");
    }

    #[test]
    fn ranking_rule_covers_election() {
        let cfg = lost_at_sea("a@lab");
        let p = plan(vec![script_with(&[
            (
                "election",
                StageScript {
                    ranking: Some(RankingRule::AsListed),
                    ..StageScript::default()
                },
            ),
            ("leader-task", answered(AnswerContent::survey([]))),
        ])]);
        assert!(p.validate(&cfg).is_empty());
    }

    #[test]
    fn drop_out_limits_coverage() {
        let cfg = lost_at_sea("a@lab");
        let p = plan(vec![script_with(&[(
            "chat",
            StageScript {
                drop_out: true,
                ..StageScript::default()
            },
        )])]);
        assert!(p.validate(&cfg).is_empty());
    }

    #[test]
    fn stop_condition_forms_parse() {
        let a: StopCondition = serde_json::from_str(r#""allTerminal""#).unwrap();
        let b: StopCondition = serde_json::from_str(r#"{"maxSimSeconds": 90}"#).unwrap();
        assert_eq!(a, StopCondition::AllTerminal);
        assert_eq!(b, StopCondition::MaxSimSeconds(90));
    }
}

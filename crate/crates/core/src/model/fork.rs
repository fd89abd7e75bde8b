use std::collections::BTreeMap;

use crate::ids::{ExperimentId, ExperimenterId};
use crate::model::config::{AccessRole, ExperimentConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ForkError {
    #[error("experiment '{0}' is private and the caller holds no role on it")]
    PermissionDenied(ExperimentId),
}

/// Deep-copies `source` under a fresh id with `new_owner` as sole creator.
/// Stage and agent ids are experiment-scoped and kept, so every internal
/// reference stays valid.
pub fn fork_experiment(
    source: &ExperimentConfig,
    new_owner: &ExperimenterId,
    new_id: ExperimentId,
) -> Result<ExperimentConfig, ForkError> {
    if !source.metadata.public_visibility && source.role_of(new_owner).is_none() {
        return Err(ForkError::PermissionDenied(source.id.clone()));
    }
    let mut fork = source.clone();
    fork.id = new_id;
    fork.metadata.name = format!("{} (copy)", source.metadata.name);
    fork.metadata.template = false;
    fork.metadata.public_visibility = false;
    fork.roles = BTreeMap::from([(new_owner.clone(), AccessRole::Creator)]);
    Ok(fork)
}

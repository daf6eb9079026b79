//! Rollout logs: episodes of steps of decoded tokens, with step-level
//! (strong) and episode-level (weak) help labels.

mod folds;
mod store;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use folds::{split_folds, stratified_holdout, FoldSplit};
pub use store::{read_episodes, read_episodes_from, write_episodes, write_episodes_to};
pub use synth::{synthesize_dataset, SynthConfig};

use crate::error::{Error, Result};
use crate::features::TokenDistribution;

/// One observation → inference → action-chunk cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    /// `true` when the step needed help.
    #[serde(with = "binary_label::optional")]
    pub strong_label: Option<bool>,
    /// Opaque annotations (task id, instruction); never interpreted.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub tokens: Vec<TokenDistribution>,
}

impl StepRecord {
    pub fn new(step_index: usize, tokens: Vec<TokenDistribution>) -> Self {
        StepRecord {
            step_index,
            strong_label: None,
            meta: BTreeMap::new(),
            tokens,
        }
    }

    pub fn with_label(mut self, needs_help: bool) -> Self {
        self.strong_label = Some(needs_help);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::validation(format!("step {} has no tokens", self.step_index)));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            t.validate().map_err(|e| {
                Error::validation(format!("step {} token {i}: {e}", self.step_index))
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Logged,
    Synthetic,
}

/// An ordered run of steps with its success/failure outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    /// `true` for a failed episode.
    #[serde(with = "binary_label")]
    pub weak_label: bool,
    pub source: Source,
    pub steps: Vec<StepRecord>,
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        let mut expected_min = 0usize;
        for (pos, step) in self.steps.iter().enumerate() {
            if pos == 0 && step.step_index != 0 {
                return Err(Error::validation(format!(
                    "episode {}: first step_index is {}, expected 0",
                    self.episode_id, step.step_index
                )));
            }
            if step.step_index < expected_min {
                return Err(Error::validation(format!(
                    "episode {}: step_index {} is not increasing",
                    self.episode_id, step.step_index
                )));
            }
            expected_min = step.step_index + 1;
            step.validate()
                .map_err(|e| Error::validation(format!("episode {}: {e}", self.episode_id)))?;
        }
        Ok(())
    }

    pub fn is_failure(&self) -> bool {
        self.weak_label
    }

    /// Strong labels of every step, failing on the first unlabeled one.
    pub fn strong_labels(&self) -> Result<Vec<bool>> {
        self.steps
            .iter()
            .map(|s| {
                s.strong_label.ok_or_else(|| {
                    Error::validation(format!(
                        "episode {} step {} has no strong label",
                        self.episode_id, s.step_index
                    ))
                })
            })
            .collect()
    }
}

/// Rejects datasets with repeated episode ids.
pub fn check_unique_ids(episodes: &[EpisodeRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for e in episodes {
        if !seen.insert(e.episode_id.as_str()) {
            return Err(Error::validation(format!("duplicate episode_id {}", e.episode_id)));
        }
    }
    Ok(())
}

/// Serializes labels as the integers 0 and 1.
mod binary_label {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(D::Error::custom(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub mod optional {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<bool>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(b) => s.serialize_u8(u8::from(*b)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<bool>, D::Error> {
            match Option::<u8>::deserialize(d)? {
                None => Ok(None),
                Some(0) => Ok(Some(false)),
                Some(1) => Ok(Some(true)),
                Some(other) => Err(D::Error::custom(format!(
                    "strong_label must be 0, 1 or null, got {other}"
                ))),
            }
        }
    }
}

//! Episode-grouped, label-stratified fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_unique_ids, EpisodeRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, episode_id: &str) -> Option<usize> {
        self.assignments.get(episode_id).copied()
    }

    /// `(train, test)` views for one fold, preserving dataset order.
    pub fn partition<'a>(
        &self,
        episodes: &'a [EpisodeRecord],
        fold: usize,
    ) -> Result<(Vec<&'a EpisodeRecord>, Vec<&'a EpisodeRecord>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for e in episodes {
            match self.fold_of(&e.episode_id) {
                Some(f) if f == fold => test.push(e),
                Some(_) => train.push(e),
                None => {
                    return Err(Error::validation(format!(
                        "episode {} has no fold assignment",
                        e.episode_id
                    )))
                }
            }
        }
        Ok((train, test))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles failures and successes separately and deals them round-robin,
/// successes continuing where failures stopped, so fold sizes differ by at
/// most one and each fold's failure count is within one of `n_fail / k`.
pub fn split_folds(episodes: &[EpisodeRecord], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    if k > episodes.len() {
        return Err(Error::config(format!(
            "{k} folds requested for {} episodes",
            episodes.len()
        )));
    }
    check_unique_ids(episodes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fails, mut succ): (Vec<&EpisodeRecord>, Vec<&EpisodeRecord>) =
        episodes.iter().partition(|e| e.weak_label);
    fails.shuffle(&mut rng);
    succ.shuffle(&mut rng);

    let assignments = fails
        .iter()
        .chain(succ.iter())
        .enumerate()
        .map(|(i, e)| (e.episode_id.clone(), i % k))
        .collect();
    Ok(FoldSplit { k, assignments })
}

/// Stratified `(train, holdout)` split with roughly `fraction` of each class
/// held out (at least one episode when the class has two or more).
pub fn stratified_holdout<'a>(
    episodes: &[&'a EpisodeRecord],
    fraction: f64,
    seed: u64,
) -> (Vec<&'a EpisodeRecord>, Vec<&'a EpisodeRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for class in [true, false] {
        let mut members: Vec<&EpisodeRecord> = episodes
            .iter()
            .copied()
            .filter(|e| e.weak_label == class)
            .collect();
        members.shuffle(&mut rng);
        let mut n_hold = (members.len() as f64 * fraction).round() as usize;
        if n_hold == 0 && members.len() >= 2 && fraction > 0.0 {
            n_hold = 1;
        }
        holdout.extend(members.drain(..n_hold));
        train.extend(members);
    }
    (train, holdout)
}

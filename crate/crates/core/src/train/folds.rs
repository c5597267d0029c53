//! Subject-wise k-fold splits, stratified by acquisition center.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Splits every center's subjects into `k` equal groups after a seeded
/// shuffle. Fold `f` tests on group `f` of each center and trains on the rest,
/// so each subject is tested exactly once and all of its slices stay on one
/// side of the split.
pub fn split_folds(
    subjects_by_center: &BTreeMap<String, Vec<String>>,
    k: usize,
    seed: u64,
) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 folds, got {k}")));
    }
    let mut seen = BTreeSet::new();
    let mut groups: Vec<Vec<Vec<String>>> = Vec::new();
    for (ci, (center, ids)) in subjects_by_center.iter().enumerate() {
        if ids.len() % k != 0 || ids.is_empty() {
            return Err(Error::config(format!(
                "center `{center}` has {} subjects, which is not a positive multiple of {k} folds",
                ids.len()
            )));
        }
        for id in ids {
            if !seen.insert(id.clone()) {
                return Err(Error::config(format!("subject `{id}` listed twice")));
            }
        }
        let mut shuffled = ids.clone();
        shuffled.shuffle(&mut stream_rng(seed, &[0x464f_4c44, ci as u64]));
        let per = ids.len() / k;
        groups.push(shuffled.chunks(per).map(<[String]>::to_vec).collect());
    }
    if groups.is_empty() {
        return Err(Error::config("no subjects to split"));
    }
    Ok((0..k)
        .map(|f| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for center in &groups {
                for (g, members) in center.iter().enumerate() {
                    if g == f {
                        test.extend_from_slice(members);
                    } else {
                        train.extend_from_slice(members);
                    }
                }
            }
            Fold { index: f, train, test }
        })
        .collect())
}

//! Scores produced outside this crate, joined back onto the patch grid.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use crate::error::{Error, Result};
use crate::model::{PatchKey, ScoreTriplet, SCORE_SUM_TOLERANCE};
use crate::records::read_rows;

/// Sums within this distance of 1 are renormalized; anything further is rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExternalScores {
    pub scores: BTreeMap<PatchKey, ScoreTriplet>,
}

impl ExternalScores {
    pub fn get(&self, key: &PatchKey) -> Option<ScoreTriplet> {
        self.scores.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Validate one raw triplet, renormalizing small drift in the sum.
pub fn accept_triplet(key: &PatchKey, raw: [f64; 3]) -> Result<ScoreTriplet> {
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!("patch {key}: scores {raw:?} must be finite and nonnegative")));
    }
    let sum: f64 = raw.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(Error::Validation(format!("patch {key}: scores sum to {sum}")));
    }
    let [a, b, c] = if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
        raw.map(|v| v / sum)
    } else {
        raw
    };
    ScoreTriplet::new(a, b, c)
}

/// Read a patch-record CSV with score columns. Rows without scores are ignored.
/// With `known` set, every scored key must be one of them.
pub fn ingest_external_scores<R: Read>(input: R, known: Option<&BTreeSet<PatchKey>>) -> Result<ExternalScores> {
    let mut out = ExternalScores::default();
    for row in read_rows(input)? {
        let key = row.key();
        let Some(raw) = row.raw_scores()? else {
            continue;
        };
        if let Some(known) = known {
            if !known.contains(&key) {
                return Err(Error::Join(format!("scored patch {key} is not on any known grid")));
            }
        }
        let triplet = accept_triplet(&key, raw)?;
        if out.scores.insert(key.clone(), triplet).is_some() {
            return Err(Error::Validation(format!("duplicate scores for patch {key}")));
        }
    }
    Ok(out)
}

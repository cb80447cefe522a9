//! Slide-level majority vote and top-k ROI selection.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PatchClass, PatchRecord, ScoreTriplet, SlideLabel, SlideResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VoteSummary {
    pub n_mel: usize,
    pub n_nev: usize,
    pub n_other: usize,
    pub tie_flag: bool,
}

impl VoteSummary {
    pub fn total(&self) -> usize {
        self.n_mel + self.n_nev + self.n_other
    }
}

/// A tissue patch with its scores, as consumed by aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPatch {
    pub grid_x: u32,
    pub grid_y: u32,
    pub scores: ScoreTriplet,
}

impl ScoredPatch {
    pub fn pos(&self) -> (u32, u32) {
        (self.grid_x, self.grid_y)
    }
}

/// Scored tissue patches of a slide, in record order.
pub fn scored_patches(records: &[PatchRecord]) -> Vec<ScoredPatch> {
    records
        .iter()
        .filter(|r| r.tissue)
        .filter_map(|r| {
            r.scores.map(|scores| ScoredPatch {
                grid_x: r.grid_x,
                grid_y: r.grid_y,
                scores,
            })
        })
        .collect()
}

/// Majority vote over argmax classes, ignoring Other. Ties go to Melanoma.
pub fn classify_slide(patches: &[ScoredPatch]) -> Result<(SlideLabel, VoteSummary)> {
    if patches.is_empty() {
        return Err(Error::EmptySlide("no scored tissue patches".into()));
    }
    let mut v = VoteSummary::default();
    for p in patches {
        match p.scores.argmax() {
            PatchClass::Melanoma => v.n_mel += 1,
            PatchClass::Nevus => v.n_nev += 1,
            PatchClass::Other => v.n_other += 1,
        }
    }
    let label = match v.n_mel.cmp(&v.n_nev) {
        Ordering::Greater => SlideLabel::Melanoma,
        Ordering::Less => SlideLabel::Nevus,
        Ordering::Equal => {
            v.tie_flag = true;
            SlideLabel::Melanoma
        }
    };
    Ok((label, v))
}

/// Descending by the slide class score; ties by `(grid_y, grid_x)` ascending.
pub fn rank_patches(patches: &[ScoredPatch], slide_label: SlideLabel) -> Vec<ScoredPatch> {
    let class = slide_label.patch_class();
    let mut out = patches.to_vec();
    out.sort_by(|a, b| {
        b.scores
            .get(class)
            .total_cmp(&a.scores.get(class))
            .then_with(|| (a.grid_y, a.grid_x).cmp(&(b.grid_y, b.grid_x)))
    });
    out
}

/// `round(n·β)`, halves away from zero.
pub fn roi_size(n: usize, beta: f64) -> usize {
    (n as f64 * beta).round() as usize
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Validation(format!("beta {beta} outside [0,1]")));
    }
    Ok(())
}

pub fn select_roi(ranked: &[ScoredPatch], beta: f64) -> Result<BTreeSet<(u32, u32)>> {
    check_beta(beta)?;
    let k = roi_size(ranked.len(), beta);
    Ok(ranked[..k].iter().map(ScoredPatch::pos).collect())
}

/// Classify, rank and select in one step.
pub fn detect_slide(slide_id: &str, records: &[PatchRecord], beta: f64) -> Result<SlideResult> {
    let patches = scored_patches(records);
    let (label, votes) =
        classify_slide(&patches).map_err(|_| Error::EmptySlide(format!("slide {slide_id} has no scored tissue patches")))?;
    let ranked = rank_patches(&patches, label);
    let roi = select_roi(&ranked, beta)?;
    Ok(SlideResult {
        slide_id: slide_id.to_string(),
        predicted_label: label,
        n_mel: votes.n_mel,
        n_nev: votes.n_nev,
        beta,
        k: roi.len(),
        roi_patches: roi,
        iou: None,
        tie_flag: votes.tie_flag,
    })
}

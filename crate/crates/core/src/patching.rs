//! Patch labeling and train/test dataset assembly.
//!
//! Annotated tissue patches take the slide's class. Unannotated tissue
//! patches become `Other` only when they sit at Chebyshev distance ≥ 2
//! (in grid units) from every annotated patch; the one-patch ring around an
//! annotation is left unlabeled. During dataset assembly the number of `Other`
//! patches per slide is capped at twice the slide's annotated count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PatchClass, PatchGrid, PatchKey, PatchRecord, SlideLabel};
use crate::rng::rng_for;

/// Minimum Chebyshev distance from any annotated patch for an `Other` label.
pub const OTHER_BUFFER: u32 = 2;
/// `Other` patches kept per slide, as a multiple of its annotated patches.
pub const OTHER_CAP_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub label: PatchClass,
}

impl DatasetEntry {
    pub fn key(&self) -> PatchKey {
        PatchKey::new(self.slide_id.clone(), self.grid_x, self.grid_y)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub melanoma: usize,
    pub nevus: usize,
    pub other: usize,
}

impl ClassCounts {
    pub fn add(&mut self, c: PatchClass) {
        match c {
            PatchClass::Melanoma => self.melanoma += 1,
            PatchClass::Nevus => self.nevus += 1,
            PatchClass::Other => self.other += 1,
        }
    }

    pub fn get(&self, c: PatchClass) -> usize {
        match c {
            PatchClass::Melanoma => self.melanoma,
            PatchClass::Nevus => self.nevus,
            PatchClass::Other => self.other,
        }
    }

    pub fn total(&self) -> usize {
        self.melanoma + self.nevus + self.other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchDataset {
    pub entries: Vec<DatasetEntry>,
    pub class_counts: ClassCounts,
    pub provenance: SplitTag,
}

impl PatchDataset {
    /// Sorts entries and recomputes counts; rejects duplicate keys.
    pub fn new(mut entries: Vec<DatasetEntry>, provenance: SplitTag) -> Result<Self> {
        entries.sort();
        if let Some(w) = entries
            .windows(2)
            .find(|w| (&w[0].slide_id, w[0].grid_x, w[0].grid_y) == (&w[1].slide_id, w[1].grid_x, w[1].grid_y))
        {
            return Err(Error::Validation(format!("duplicate dataset entry {}", w[0].key())));
        }
        let mut class_counts = ClassCounts::default();
        for e in &entries {
            class_counts.add(e.label);
        }
        Ok(Self {
            entries,
            class_counts,
            provenance,
        })
    }
}

/// Assign training labels in place, returning the labeled records.
pub fn label_patches(grid: &PatchGrid, records: &[PatchRecord], slide_label: SlideLabel) -> Vec<PatchRecord> {
    // Dilate the annotated cells by OTHER_BUFFER - 1 to get the exclusion zone.
    let mut near = vec![false; grid.len()];
    let reach = (OTHER_BUFFER - 1) as i64;
    for r in records.iter().filter(|r| r.in_annotation) {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (i64::from(r.grid_x) + dx, i64::from(r.grid_y) + dy);
                if x >= 0 && y >= 0 && grid.contains(x as u32, y as u32) {
                    near[grid.index(x as u32, y as u32)] = true;
                }
            }
        }
    }
    records
        .iter()
        .map(|r| {
            let mut out = r.clone();
            out.label = if !r.tissue {
                None
            } else if r.in_annotation {
                Some(slide_label.patch_class())
            } else if !near[grid.index(r.grid_x, r.grid_y)] {
                Some(PatchClass::Other)
            } else {
                None
            };
            out
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified slide-level split. Within each label the slides are sorted by
/// id and shuffled with a label-keyed seed, so input order does not matter.
pub fn split_slides(slides: &[(String, SlideLabel)], fraction: f64, seed: u64) -> Result<SlideSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must be in (0,1)")));
    }
    if slides.is_empty() {
        return Err(Error::Stratification("empty cohort".into()));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in SlideLabel::ALL {
        let mut ids: Vec<&String> = slides.iter().filter(|(_, l)| *l == label).map(|(id, _)| id).collect();
        ids.sort();
        ids.dedup();
        if ids.is_empty() {
            continue;
        }
        let n_train = (fraction * ids.len() as f64).round() as usize;
        if n_train == 0 || n_train == ids.len() {
            return Err(Error::Stratification(format!(
                "class {label} ({} slides) would be absent from one side at fraction {fraction}",
                ids.len()
            )));
        }
        let mut rng = rng_for(seed, &["split", label.as_str()]);
        ids.shuffle(&mut rng);
        train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        test.extend(ids[n_train..].iter().map(|s| s.to_string()));
    }
    train.sort();
    test.sort();
    Ok(SlideSplit { train, test })
}

/// Draw a stratified subset of `slides` holding `fraction` of each class.
/// `fraction = 1` returns everything.
pub fn subsample_slides(slides: &[(String, SlideLabel)], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if fraction >= 1.0 {
        let mut all: Vec<String> = slides.iter().map(|(s, _)| s.clone()).collect();
        all.sort();
        return Ok(all);
    }
    Ok(split_slides(slides, fraction, seed)?.train)
}

/// One slide's input to dataset assembly: records with tissue and
/// `in_annotation` already computed.
#[derive(Debug, Clone)]
pub struct CohortSlide {
    pub slide_id: String,
    pub label: SlideLabel,
    pub grid: PatchGrid,
    pub records: Vec<PatchRecord>,
}

/// Label a slide's patches and apply the per-slide `Other` cap.
pub fn slide_entries(slide: &CohortSlide, seed: u64) -> Vec<DatasetEntry> {
    let labeled = label_patches(&slide.grid, &slide.records, slide.label);
    let mut annotated = Vec::new();
    let mut other = Vec::new();
    for r in &labeled {
        let entry = |label| DatasetEntry {
            slide_id: slide.slide_id.clone(),
            grid_x: r.grid_x,
            grid_y: r.grid_y,
            label,
        };
        match r.label {
            Some(PatchClass::Other) => other.push(entry(PatchClass::Other)),
            Some(c) => annotated.push(entry(c)),
            None => {}
        }
    }
    let cap = OTHER_CAP_FACTOR * annotated.len();
    if other.len() > cap {
        let mut rng = rng_for(seed, &["other-cap", &slide.slide_id]);
        other.shuffle(&mut rng);
        other.truncate(cap);
    }
    annotated.extend(other);
    annotated.sort();
    annotated
}

pub fn dataset_from_slides(slides: &[&CohortSlide], seed: u64, provenance: SplitTag) -> Result<PatchDataset> {
    let entries = slides.iter().flat_map(|s| slide_entries(s, seed)).collect();
    PatchDataset::new(entries, provenance)
}

/// Split the cohort and assemble the training dataset.
pub fn build_dataset(cohort: &[CohortSlide], fraction: f64, seed: u64) -> Result<(PatchDataset, Vec<String>)> {
    let ids: Vec<(String, SlideLabel)> = cohort.iter().map(|s| (s.slide_id.clone(), s.label)).collect();
    let split = split_slides(&ids, fraction, seed)?;
    let by_id: BTreeMap<&str, &CohortSlide> = cohort.iter().map(|s| (s.slide_id.as_str(), s)).collect();
    let train: Vec<&CohortSlide> = split.train.iter().map(|id| by_id[id.as_str()]).collect();
    let dataset = dataset_from_slides(&train, seed, SplitTag::Train)?;
    Ok((dataset, split.test))
}

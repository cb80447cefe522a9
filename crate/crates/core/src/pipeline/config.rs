use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::DEFAULT_FIXED_BETA;
use crate::preprocess::augment::AugmentationConfig;
use crate::preprocess::stain::StainProfile;
use crate::preprocess::tissue::TissueParams;
use crate::scorer::TrainParams;
use crate::synth::CohortSpec;
use crate::viz::RenderSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StainSampling {
    /// Tissue patches sampled per slide for stain estimation.
    pub sample_patches: usize,
    /// Keep every n-th pixel along each axis of a sampled patch.
    pub pixel_stride: usize,
}

impl Default for StainSampling {
    fn default() -> Self {
        Self {
            sample_patches: 100,
            pixel_stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub fixed_beta: f64,
    pub fractions: Vec<f64>,
    pub n_repeats: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            fixed_beta: DEFAULT_FIXED_BETA,
            fractions: vec![0.2, 0.4, 0.6, 0.8],
            n_repeats: 3,
        }
    }
}

/// Everything a pipeline run needs. Relative paths resolve against the
/// working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub output: PathBuf,
    /// Defaults to `<output>/cohort/manifest.json`, where `synth` writes.
    pub manifest: Option<PathBuf>,
    /// Generator settings for `synth`; its `seed` is replaced by one derived
    /// from the global seed.
    pub cohort: CohortSpec,
    pub split_fraction: f64,
    pub tissue: TissueParams,
    pub reference_stain: StainProfile,
    pub stain_sampling: StainSampling,
    /// `rng_seed` is replaced by one derived from the global seed.
    pub augmentation: AugmentationConfig,
    /// `seed` is replaced by one derived from the global seed.
    pub training: TrainParams,
    /// Patch scores CSV used instead of the trained classifier.
    pub external_scores: Option<PathBuf>,
    pub evaluation: EvaluationConfig,
    pub render: RenderSpec,
    /// Also write each visualized slide's reachability plot as CSV.
    pub dump_reachability: bool,
    pub workers: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output: PathBuf::from("roidet_out"),
            manifest: None,
            cohort: CohortSpec::default(),
            split_fraction: 0.8,
            tissue: TissueParams::default(),
            reference_stain: StainProfile::reference(),
            stain_sampling: StainSampling::default(),
            augmentation: AugmentationConfig::default(),
            training: TrainParams::default(),
            external_scores: None,
            evaluation: EvaluationConfig::default(),
            render: RenderSpec::default(),
            dump_reachability: false,
            workers: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.output.join("cohort").join("manifest.json"))
    }

    /// Range checks on every parameter. Path existence is checked per stage.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seed.is_none() {
            return bad("seed is missing; set `seed` in the config or pass --seed".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split_fraction {} must be in (0,1)", self.split_fraction));
        }
        if self.stain_sampling.sample_patches == 0 || self.stain_sampling.pixel_stride == 0 {
            return bad("stain_sampling values must be positive".into());
        }
        let ev = &self.evaluation;
        if !(0.0..=1.0).contains(&ev.fixed_beta) {
            return bad(format!("evaluation.fixed_beta {} outside [0,1]", ev.fixed_beta));
        }
        if ev.fractions.is_empty() || ev.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad(format!("evaluation.fractions {:?} must be nonempty and within (0,1]", ev.fractions));
        }
        if ev.n_repeats < 2 {
            return bad(format!("evaluation.n_repeats {} must be at least 2", ev.n_repeats));
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        if let Some(p) = &self.external_scores {
            if !p.is_file() {
                return bad(format!("external_scores {} does not exist", p.display()));
            }
        }
        self.cohort.validate()?;
        self.tissue.validate()?;
        self.reference_stain.validate()?;
        self.augmentation.validate()?;
        self.training.validate()?;
        self.render.validate()
    }
}

//! Patch scoring: feature extraction, a trained classifier, and externally supplied scores.

pub mod external;
pub mod features;
pub mod logreg;

pub use external::{ingest_external_scores, ExternalScores};
pub use features::{extract_features, FeatureExtractor, PatchFeatures, FEATURE_COUNT};
pub use logreg::{train, ClassifierModel, TrainParams};

use crate::error::{Error, Result};
use crate::model::{PatchKey, ScoreTriplet};

/// Anything that can assign a class-score triplet to a tissue patch.
pub trait PatchScorer: Sync {
    fn score_patch(&self, key: &PatchKey, features: &PatchFeatures) -> Result<ScoreTriplet>;
}

impl PatchScorer for ClassifierModel {
    fn score_patch(&self, _key: &PatchKey, features: &PatchFeatures) -> Result<ScoreTriplet> {
        self.score(features)
    }
}

impl PatchScorer for ExternalScores {
    fn score_patch(&self, key: &PatchKey, _features: &PatchFeatures) -> Result<ScoreTriplet> {
        self.get(key)
            .ok_or_else(|| Error::Join(format!("no external score for tissue patch {key}")))
    }
}

//! Tissue detection, stain normalization and training-time augmentation.

pub mod augment;
pub mod stain;
pub mod tissue;

pub use augment::{augment, AugmentationConfig, PatchTensor};
pub use stain::{estimate_stains, normalize_patch, StainNormalizer, StainProfile};
pub use tissue::{detect_tissue, tissue_fraction, TissueParams};

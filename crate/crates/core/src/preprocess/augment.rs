use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RgbPatch, PATCH_SIZE};

/// Random crop, horizontal flip and per-channel standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub crop_size: usize,
    pub hflip_probability: f64,
    pub channel_mean: [f64; 3],
    pub channel_std: [f64; 3],
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_size: 224,
            hflip_probability: 0.5,
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            rng_seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > PATCH_SIZE as usize {
            return Err(Error::Config(format!(
                "crop_size {} must be in 1..={PATCH_SIZE}",
                self.crop_size
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(Error::Config(format!(
                "hflip_probability {} outside [0,1]",
                self.hflip_probability
            )));
        }
        if self.channel_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config(format!(
                "channel_std {:?} must be positive",
                self.channel_std
            )));
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("channel_mean must be finite".into()));
        }
        Ok(())
    }

    /// Test-time transform: full patch, no flip, same standardization.
    pub fn for_inference(&self) -> Self {
        Self {
            crop_size: PATCH_SIZE as usize,
            hflip_probability: 0.0,
            ..self.clone()
        }
    }
}

/// HWC float tensor with standardized channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTensor {
    pub size: usize,
    pub data: Vec<f32>,
}

impl PatchTensor {
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * 3 + c]
    }
}

/// The geometric part of a draw: crop offset and flip decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub offset_x: usize,
    pub offset_y: usize,
    pub flip: bool,
}

pub fn draw(cfg: &AugmentationConfig, source_size: usize, draw_index: u64) -> Result<AugmentDraw> {
    cfg.validate()?;
    if cfg.crop_size > source_size {
        return Err(Error::Config(format!(
            "crop_size {} exceeds patch size {source_size}",
            cfg.crop_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(draw_index);
    let span = source_size - cfg.crop_size;
    Ok(AugmentDraw {
        offset_x: rng.random_range(0..=span),
        offset_y: rng.random_range(0..=span),
        flip: rng.random::<f64>() < cfg.hflip_probability,
    })
}

pub fn crop(patch: &RgbPatch, size: usize, offset_x: usize, offset_y: usize) -> RgbPatch {
    RgbPatch::from_fn(size, |x, y| patch.get(offset_x + x, offset_y + y))
}

/// Apply crop and flip, leaving pixels as RGB8.
pub fn augment_geometry(patch: &RgbPatch, cfg: &AugmentationConfig, draw_index: u64) -> Result<RgbPatch> {
    let d = draw(cfg, patch.size(), draw_index)?;
    let c = crop(patch, cfg.crop_size, d.offset_x, d.offset_y);
    Ok(if d.flip { c.hflip() } else { c })
}

/// `(x/255 - mean) / std` per channel.
pub fn standardize(patch: &RgbPatch, mean: [f64; 3], std: [f64; 3]) -> PatchTensor {
    let data = patch
        .data()
        .chunks_exact(3)
        .flat_map(|px| (0..3).map(move |c| ((f64::from(px[c]) / 255.0 - mean[c]) / std[c]) as f32))
        .collect();
    PatchTensor {
        size: patch.size(),
        data,
    }
}

pub fn augment(patch: &RgbPatch, cfg: &AugmentationConfig, draw_index: u64) -> Result<PatchTensor> {
    let g = augment_geometry(patch, cfg, draw_index)?;
    Ok(standardize(&g, cfg.channel_mean, cfg.channel_std))
}

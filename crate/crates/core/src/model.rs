//! Shared domain types and patch-grid geometry.
//!
//! A slide is tiled into non-overlapping 256×256 patches anchored at the
//! top-left corner. Pixels in the right and bottom remainder strips that do
//! not fill a whole patch are discarded. A patch is identified everywhere by
//! `(slide_id, grid_x, grid_y)`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PATCH_SIZE: u32 = 256;

/// Tolerance on `s_mel + s_nev + s_other = 1`.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Magnification {
    #[default]
    X20,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideLabel {
    Melanoma,
    Nevus,
}

impl SlideLabel {
    pub const ALL: [SlideLabel; 2] = [SlideLabel::Melanoma, SlideLabel::Nevus];

    /// The patch class that annotated patches of a slide with this label take.
    pub fn patch_class(self) -> PatchClass {
        match self {
            SlideLabel::Melanoma => PatchClass::Melanoma,
            SlideLabel::Nevus => PatchClass::Nevus,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SlideLabel::Melanoma => "melanoma",
            SlideLabel::Nevus => "nevus",
        }
    }
}

impl fmt::Display for SlideLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchClass {
    Melanoma,
    Nevus,
    Other,
}

impl PatchClass {
    pub const ALL: [PatchClass; 3] = [PatchClass::Melanoma, PatchClass::Nevus, PatchClass::Other];

    pub fn index(self) -> usize {
        match self {
            PatchClass::Melanoma => 0,
            PatchClass::Nevus => 1,
            PatchClass::Other => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatchClass::Melanoma => "melanoma",
            PatchClass::Nevus => "nevus",
            PatchClass::Other => "other",
        }
    }
}

impl fmt::Display for PatchClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stable cross-module join key for a patch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchKey {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
}

impl PatchKey {
    pub fn new(slide_id: impl Into<String>, grid_x: u32, grid_y: u32) -> Self {
        Self {
            slide_id: slide_id.into(),
            grid_x,
            grid_y,
        }
    }
}

impl fmt::Display for PatchKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.slide_id, self.grid_x, self.grid_y)
    }
}

/// Row-major RGB8 slide raster at 20×.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideRaster {
    pub slide_id: String,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub magnification: Magnification,
    pub true_label: Option<SlideLabel>,
}

impl SlideRaster {
    pub fn new(
        slide_id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        true_label: Option<SlideLabel>,
    ) -> Result<Self> {
        let slide_id = slide_id.into();
        if width < PATCH_SIZE || height < PATCH_SIZE {
            return Err(Error::InvalidSlide(format!(
                "{slide_id}: {width}x{height} is smaller than one {PATCH_SIZE}x{PATCH_SIZE} patch"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::InvalidSlide(format!(
                "{slide_id}: pixel buffer has {} bytes, expected {expected}",
                pixels.len()
            )));
        }
        Ok(Self {
            slide_id,
            width,
            height,
            pixels,
            magnification: Magnification::X20,
            true_label,
        })
    }

    pub fn from_image(
        slide_id: impl Into<String>,
        image: image::RgbImage,
        true_label: Option<SlideLabel>,
    ) -> Result<Self> {
        let (w, h) = image.dimensions();
        Self::new(slide_id, w, h, image.into_raw(), true_label)
    }

    /// Load a PNG or PPM raster.
    pub fn load(
        slide_id: impl Into<String>,
        path: &Path,
        true_label: Option<SlideLabel>,
    ) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_image(slide_id, img, true_label)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction")
    }
}

/// A square RGB8 block, row-major. Patches are 256 wide; crops may be smaller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbPatch {
    size: usize,
    data: Vec<u8>,
}

impl RgbPatch {
    pub fn new(size: usize, data: Vec<u8>) -> Result<Self> {
        if size == 0 || data.len() != size * size * 3 {
            return Err(Error::Validation(format!(
                "patch buffer of {} bytes does not match {size}x{size}x3",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, size * size).flatten().collect();
        Self { size, data }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn hflip(&self) -> Self {
        Self::from_fn(self.size, |x, y| self.get(self.size - 1 - x, y))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub slide_id: String,
    pub patch_size: u32,
    pub cols: u32,
    pub rows: u32,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.cols as usize * self.rows as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, grid_x: u32, grid_y: u32) -> bool {
        grid_x < self.cols && grid_y < self.rows
    }

    /// Row-major linear index.
    pub fn index(&self, grid_x: u32, grid_y: u32) -> usize {
        grid_y as usize * self.cols as usize + grid_x as usize
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.rows).flat_map(move |y| (0..self.cols).map(move |x| (x, y)))
    }

    /// Pixel coordinates of the patch center.
    pub fn center(&self, grid_x: u32, grid_y: u32) -> (f64, f64) {
        let half = f64::from(self.patch_size) / 2.0;
        (
            f64::from(grid_x * self.patch_size) + half,
            f64::from(grid_y * self.patch_size) + half,
        )
    }

    fn check(&self, grid_x: u32, grid_y: u32) -> Result<()> {
        if self.contains(grid_x, grid_y) {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                grid_x,
                grid_y,
                cols: self.cols,
                rows: self.rows,
            })
        }
    }
}

pub fn build_grid(raster: &SlideRaster) -> Result<PatchGrid> {
    let cols = raster.width() / PATCH_SIZE;
    let rows = raster.height() / PATCH_SIZE;
    if cols == 0 || rows == 0 {
        return Err(Error::InvalidSlide(format!(
            "{}: smaller than one patch",
            raster.slide_id
        )));
    }
    Ok(PatchGrid {
        slide_id: raster.slide_id.clone(),
        patch_size: PATCH_SIZE,
        cols,
        rows,
    })
}

/// Copy out the 256×256 block at grid position `(grid_x, grid_y)`.
pub fn patch_pixels(raster: &SlideRaster, grid_x: u32, grid_y: u32) -> Result<RgbPatch> {
    let grid = build_grid(raster)?;
    grid.check(grid_x, grid_y)?;
    let size = PATCH_SIZE as usize;
    let x0 = (grid_x * PATCH_SIZE) as usize;
    let y0 = (grid_y * PATCH_SIZE) as usize;
    let stride = raster.width() as usize * 3;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in y0..y0 + size {
        let row = y * stride + x0 * 3;
        data.extend_from_slice(&raster.pixels()[row..row + size * 3]);
    }
    Ok(RgbPatch { size, data })
}

/// Per-patch (melanoma, nevus, other) probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriplet {
    pub s_mel: f64,
    pub s_nev: f64,
    pub s_other: f64,
}

impl ScoreTriplet {
    pub fn new(s_mel: f64, s_nev: f64, s_other: f64) -> Result<Self> {
        let t = Self {
            s_mel,
            s_nev,
            s_other,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn uniform() -> Self {
        Self {
            s_mel: 1.0 / 3.0,
            s_nev: 1.0 / 3.0,
            s_other: 1.0 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.as_array();
        if v.iter().any(|s| !s.is_finite() || *s < 0.0 || *s > 1.0) {
            return Err(Error::Validation(format!(
                "score components must lie in [0,1]: {v:?}"
            )));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > SCORE_SUM_TOLERANCE {
            return Err(Error::Validation(format!("scores sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.s_mel, self.s_nev, self.s_other]
    }

    pub fn get(&self, class: PatchClass) -> f64 {
        self.as_array()[class.index()]
    }

    /// Highest-scoring class. Exact ties resolve in the order
    /// melanoma, nevus, other.
    pub fn argmax(&self) -> PatchClass {
        let v = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if v[i] > v[best] {
                best = i;
            }
        }
        PatchClass::ALL[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub grid_x: u32,
    pub grid_y: u32,
    pub tissue: bool,
    pub label: Option<PatchClass>,
    pub scores: Option<ScoreTriplet>,
    pub in_annotation: bool,
}

impl PatchRecord {
    pub fn new(grid_x: u32, grid_y: u32, tissue: bool) -> Self {
        Self {
            grid_x,
            grid_y,
            tissue,
            label: None,
            scores: None,
            in_annotation: false,
        }
    }

    pub fn pos(&self) -> (u32, u32) {
        (self.grid_x, self.grid_y)
    }

    /// Check the record against its grid and the scores-imply-tissue rule.
    pub fn validate(&self, grid: &PatchGrid) -> Result<()> {
        grid.check(self.grid_x, self.grid_y)?;
        if let Some(s) = &self.scores {
            if !self.tissue {
                return Err(Error::Validation(format!(
                    "patch ({}, {}) has scores but is not tissue",
                    self.grid_x, self.grid_y
                )));
            }
            s.validate()?;
        }
        Ok(())
    }
}

/// Slide-level outcome of classification and ROI detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub slide_id: String,
    pub predicted_label: SlideLabel,
    pub n_mel: usize,
    pub n_nev: usize,
    pub beta: f64,
    pub k: usize,
    /// `(grid_x, grid_y)` pairs, sorted.
    pub roi_patches: BTreeSet<(u32, u32)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    pub tie_flag: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(w: u32, h: u32) -> SlideRaster {
        SlideRaster::new("s", w, h, vec![255; (w * h * 3) as usize], None).unwrap()
    }

    #[test]
    fn grid_dimensions_use_floor_division() {
        let g = build_grid(&blank(512, 512)).unwrap();
        assert_eq!((g.cols, g.rows), (2, 2));
        let g = build_grid(&blank(600, 300)).unwrap();
        assert_eq!((g.cols, g.rows), (2, 1));
    }

    #[test]
    fn sub_patch_slide_is_rejected() {
        let err = SlideRaster::new("tiny", 255, 255, vec![0; 255 * 255 * 3], None).unwrap_err();
        assert!(matches!(err, Error::InvalidSlide(_)));
    }

    #[test]
    fn patch_pixels_offsets() {
        let (w, h) = (512u32, 256u32);
        let mut px = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[(x % 256) as u8, (y % 256) as u8, (x / 256) as u8]);
            }
        }
        let r = SlideRaster::new("s", w, h, px, None).unwrap();

        let p0 = patch_pixels(&r, 0, 0).unwrap();
        assert_eq!(p0.get(0, 0), [0, 0, 0]);
        assert_eq!(p0.get(255, 255), [255, 255, 0]);

        let p1 = patch_pixels(&r, 1, 0).unwrap();
        assert_eq!(p1.get(0, 0), [0, 0, 1]);
        assert_eq!(p1.get(17, 3), r.pixel(256 + 17, 3));

        assert!(matches!(
            patch_pixels(&r, 2, 0),
            Err(Error::IndexOutOfRange { grid_x: 2, .. })
        ));
    }

    #[test]
    fn grid_partitions_retained_pixels() {
        let r = blank(700, 530);
        let g = build_grid(&r).unwrap();
        let mut owner = vec![0u32; (r.width() * r.height()) as usize];
        for (gx, gy) in g.cells() {
            for y in gy * 256..(gy + 1) * 256 {
                for x in gx * 256..(gx + 1) * 256 {
                    owner[(y * r.width() + x) as usize] += 1;
                }
            }
        }
        assert!(owner.iter().all(|&c| c <= 1));
        let covered: u32 = owner.iter().sum();
        assert_eq!(covered, 256 * 256 * g.cols * g.rows);
    }

    #[test]
    fn score_triplet_checks() {
        assert!(ScoreTriplet::new(0.5, 0.3, 0.2).is_ok());
        assert!(ScoreTriplet::new(0.5, 0.3, 0.3).is_err());
        assert!(ScoreTriplet::new(1.2, -0.1, -0.1).is_err());
        assert_eq!(ScoreTriplet::uniform().argmax(), PatchClass::Melanoma);
        let t = ScoreTriplet::new(0.2, 0.4, 0.4).unwrap();
        assert_eq!(t.argmax(), PatchClass::Nevus);
    }

    #[test]
    fn scores_require_tissue() {
        let g = PatchGrid {
            slide_id: "s".into(),
            patch_size: 256,
            cols: 2,
            rows: 2,
        };
        let mut r = PatchRecord::new(1, 1, false);
        r.scores = Some(ScoreTriplet::uniform());
        assert!(r.validate(&g).is_err());
        r.tissue = true;
        assert!(r.validate(&g).is_ok());
        assert!(PatchRecord::new(2, 0, true).validate(&g).is_err());
    }
}

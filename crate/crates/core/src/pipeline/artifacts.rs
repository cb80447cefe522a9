//! Stage artifact schemas and their file I/O.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PatchClass, PatchKey, SlideLabel};
use crate::patching::SplitTag;
use crate::preprocess::stain::StainProfile;
use crate::scorer::{PatchFeatures, FEATURE_COUNT};

/// Per-slide facts recorded by `extract`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideInfo {
    pub slide_id: String,
    pub label: Option<SlideLabel>,
    pub split: SplitTag,
    /// Whether an annotation file was applied.
    pub annotated: bool,
    pub stain: StainProfile,
    /// True when estimation failed and the reference profile was used.
    pub stain_fallback: bool,
    pub tissue_patches: usize,
    pub annotated_patches: usize,
}

/// Features of one patch, optionally with a training label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub key: PatchKey,
    pub label: Option<PatchClass>,
    pub features: PatchFeatures,
}

/// Fixed output locations under the output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub root: PathBuf,
}

impl ArtifactPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn extract_dir(&self) -> PathBuf {
        self.root.join("extract")
    }
    pub fn slides(&self) -> PathBuf {
        self.extract_dir().join("slides.json")
    }
    pub fn split(&self) -> PathBuf {
        self.extract_dir().join("split.json")
    }
    pub fn patches(&self) -> PathBuf {
        self.extract_dir().join("patches.csv")
    }
    pub fn features(&self) -> PathBuf {
        self.extract_dir().join("features.csv")
    }
    pub fn train_features(&self) -> PathBuf {
        self.extract_dir().join("features_train.csv")
    }
    pub fn dataset(&self) -> PathBuf {
        self.extract_dir().join("dataset.json")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }
    pub fn slide_results(&self) -> PathBuf {
        self.root.join("slide_results.json")
    }
    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
    pub fn eval_table(&self) -> PathBuf {
        self.root.join("eval_table.txt")
    }
    pub fn robustness(&self) -> PathBuf {
        self.root.join("robustness.json")
    }
    pub fn robustness_table(&self) -> PathBuf {
        self.root.join("robustness_table.txt")
    }
    pub fn viz_dir(&self) -> PathBuf {
        self.root.join("viz")
    }
}

pub fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        })
    }
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T> {
    require(path, stage)?;
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn open_file(path: &Path, stage: &'static str) -> Result<BufReader<File>> {
    require(path, stage)?;
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn feature_header(with_label: bool) -> Vec<String> {
    let mut h: Vec<String> = vec!["slide_id".into(), "grid_x".into(), "grid_y".into()];
    if with_label {
        h.push("label".into());
    }
    h.extend((0..FEATURE_COUNT).map(|i| format!("f{i:02}")));
    h
}

/// Columns: `slide_id,grid_x,grid_y[,label],f00..f39`. Floats are written
/// in shortest round-trip form.
pub fn write_features(path: &Path, rows: &[FeatureRow], with_label: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(feature_header(with_label))?;
    for r in rows {
        let mut rec = vec![r.key.slide_id.clone(), r.key.grid_x.to_string(), r.key.grid_y.to_string()];
        if with_label {
            rec.push(r.label.map(|l| l.as_str().to_string()).unwrap_or_default());
        }
        rec.extend(r.features.0.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Validation(format!("{}: bad field {i} in row {:?}", path.display(), rec.position().map(|p| p.line()))))
}

pub fn read_features(path: &Path, stage: &'static str) -> Result<Vec<FeatureRow>> {
    let mut r = csv::Reader::from_reader(open_file(path, stage)?);
    let with_label = r.headers()?.iter().nth(3) == Some("label");
    if r.headers()?.len() != feature_header(with_label).len() {
        return Err(Error::Validation(format!("{}: unexpected header", path.display())));
    }
    let first = if with_label { 4 } else { 3 };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let key = PatchKey::new(
            rec.get(0).unwrap_or_default(),
            parse_field(path, &rec, 1)?,
            parse_field(path, &rec, 2)?,
        );
        let label = if with_label {
            match rec.get(3).unwrap_or_default() {
                "" => None,
                s => Some(PatchClass::parse(s).ok_or_else(|| Error::Validation(format!("unknown patch class {s:?}")))?),
            }
        } else {
            None
        };
        let mut f = [0.0; FEATURE_COUNT];
        for (k, v) in f.iter_mut().enumerate() {
            *v = parse_field(path, &rec, first + k)?;
        }
        out.push(FeatureRow {
            key,
            label,
            features: PatchFeatures(f),
        });
    }
    Ok(out)
}

pub fn feature_map(rows: Vec<FeatureRow>) -> BTreeMap<PatchKey, PatchFeatures> {
    rows.into_iter().map(|r| (r.key, r.features)).collect()
}

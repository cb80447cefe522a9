//! Stage orchestration. Each stage reads earlier artifacts from the output
//! directory and writes its own; per-slide work runs on a rayon pool and is
//! merged in slide-id order.

pub mod artifacts;
pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{detect_slide, scored_patches};
use crate::annotation::{annotated_ratio, parse_annotation_xml, patch_membership};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_cohort, format_eval_table, format_robustness_table, robustness_sweep, EvalOptions, EvalReport, EvalSlide, RobustnessSummary};
use crate::manifest::{CohortManifest, ManifestEntry};
use crate::model::{build_grid, patch_pixels, PatchClass, PatchKey, PatchRecord, RgbPatch, SlideLabel, SlideRaster, SlideResult};
use crate::patching::{label_patches, slide_entries, split_slides, CohortSlide, DatasetEntry, PatchDataset, SlideSplit, SplitTag};
use crate::preprocess::augment::{augment_geometry, AugmentationConfig};
use crate::preprocess::stain::{estimate_stains, StainNormalizer, StainProfile};
use crate::preprocess::tissue::detect_tissue;
use crate::records::{read_rows, write_rows, PatchRow};
use crate::rng::{derive_seed, rng_for};
use crate::scorer::{ingest_external_scores, train, ClassifierModel, FeatureExtractor, PatchFeatures, PatchScorer, TrainParams};
use crate::synth::write_cohort;
use crate::viz::{optics_order, render, roi_points};

pub use artifacts::{ArtifactPaths, FeatureRow, SlideInfo};
pub use config::{EvaluationConfig, PipelineConfig, StainSampling};

use artifacts::{create_dir, create_file, feature_map, open_file, read_features, read_json, require, write_features, write_json, write_text};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Extract,
    Train,
    Score,
    Classify,
    Evaluate,
    Sweep,
    Visualize,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Extract,
        Stage::Train,
        Stage::Score,
        Stage::Classify,
        Stage::Evaluate,
        Stage::Sweep,
        Stage::Visualize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Score => "score",
            Stage::Classify => "classify",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
            Stage::Visualize => "visualize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

/// What `extract` produced, for logging and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub split: SlideSplit,
    pub slides: Vec<SlideInfo>,
    pub dataset: PatchDataset,
}

struct SlideExtract {
    info: SlideInfo,
    rows: Vec<PatchRow>,
    features: Vec<FeatureRow>,
    train: Vec<(DatasetEntry, PatchFeatures)>,
}

pub struct Pipeline {
    config: PipelineConfig,
    seed: u64,
    paths: ArtifactPaths,
}

fn build_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn group_records(rows: Vec<PatchRow>) -> Result<BTreeMap<String, Vec<PatchRecord>>> {
    let mut out: BTreeMap<String, Vec<PatchRecord>> = BTreeMap::new();
    for row in rows {
        let (id, rec) = row.into_record()?;
        out.entry(id).or_default().push(rec);
    }
    Ok(out)
}

fn sample_pixels(patch: &RgbPatch, stride: usize) -> impl Iterator<Item = [u8; 3]> + '_ {
    let n = patch.size();
    (0..n)
        .step_by(stride)
        .flat_map(move |y| (0..n).step_by(stride).map(move |x| patch.get(x, y)))
}

/// Attach scores to every tissue row.
fn score_rows(rows: &[PatchRow], features: &BTreeMap<PatchKey, PatchFeatures>, scorer: &dyn PatchScorer) -> Result<Vec<PatchRow>> {
    rows.par_iter()
        .map(|row| {
            let mut row = row.clone();
            if row.tissue {
                let key = row.key();
                let f = features
                    .get(&key)
                    .ok_or_else(|| Error::Join(format!("no features for tissue patch {key}")))?;
                let s = scorer.score_patch(&key, f)?;
                (row.s_mel, row.s_nev, row.s_other) = (Some(s.s_mel), Some(s.s_nev), Some(s.s_other));
            }
            Ok(row)
        })
        .collect()
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed.unwrap_or_default();
        let paths = ArtifactPaths::new(&config.output);
        Ok(Self { config, seed, paths })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn paths(&self) -> &ArtifactPaths {
        &self.paths
    }

    fn stage_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, &[name])
    }

    /// Run one stage on the configured worker pool. Returns the text to show
    /// the user.
    pub fn run(&self, stage: Stage) -> Result<String> {
        build_pool(self.config.workers)?.install(|| self.run_inline(stage))
    }

    fn run_inline(&self, stage: Stage) -> Result<String> {
        Ok(match stage {
            Stage::Synth => {
                let m = self.synth()?;
                format!("wrote {} slides to {}\n", m.slides.len(), self.config.manifest_path().display())
            }
            Stage::Extract => {
                let s = self.extract()?;
                let c = s.dataset.class_counts;
                format!(
                    "{} train / {} test slides; training patches: {} melanoma, {} nevus, {} other\n",
                    s.split.train.len(),
                    s.split.test.len(),
                    c.melanoma,
                    c.nevus,
                    c.other
                )
            }
            Stage::Train => {
                let m = self.train()?;
                let meta = m.training_meta.as_ref();
                format!(
                    "trained for {} epochs, final loss {:.6}\n",
                    meta.map_or(0, |t| t.epochs_run),
                    meta.and_then(|t| t.loss_curve.last().copied()).unwrap_or(f64::NAN)
                )
            }
            Stage::Score => format!("scored {} tissue patches\n", self.score()?),
            Stage::Classify => format!("classified {} slides\n", self.classify()?.len()),
            Stage::Evaluate => format_eval_table(&self.evaluate()?),
            Stage::Sweep => format_robustness_table(&self.sweep()?),
            Stage::Visualize => format!("wrote {} images\n", self.visualize()?.len()),
        })
    }

    pub fn synth(&self) -> Result<CohortManifest> {
        let mut spec = self.config.cohort.clone();
        spec.seed = self.stage_seed("synth");
        let manifest_path = self.config.manifest_path();
        let dir = manifest_path.parent().map(PathBuf::from).unwrap_or_default();
        let manifest = write_cohort(&spec, &dir)?;
        if manifest_path.file_name().is_some_and(|n| n != "manifest.json") {
            manifest.save(&manifest_path)?;
        }
        Ok(manifest)
    }

    fn load_manifest(&self) -> Result<(PathBuf, CohortManifest)> {
        let path = self.config.manifest_path();
        require(&path, "synth")?;
        let m = CohortManifest::load(&path)?;
        Ok((path, m))
    }

    fn slide_stain(&self, slide_id: &str, records: &[PatchRecord], patches: &[RgbPatch]) -> (StainProfile, bool) {
        let sampling = &self.config.stain_sampling;
        let mut idx: Vec<usize> = records.iter().enumerate().filter(|(_, r)| r.tissue).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng_for(self.seed, &["stain", slide_id]));
        idx.truncate(sampling.sample_patches);
        idx.sort_unstable();
        let pixels: Vec<[u8; 3]> = idx
            .iter()
            .flat_map(|&i| sample_pixels(&patches[i], sampling.pixel_stride))
            .collect();
        match estimate_stains(&pixels) {
            Ok(s) => (s, false),
            Err(e) => {
                log::warn!("{slide_id}: stain estimation failed ({e}); using the reference profile");
                (self.config.reference_stain, true)
            }
        }
    }

    fn extract_slide(
        &self,
        entry: &ManifestEntry,
        manifest_path: &std::path::Path,
        split: SplitTag,
        extractor: &FeatureExtractor,
        augmentation: &AugmentationConfig,
    ) -> Result<SlideExtract> {
        let id = entry.slide_id.as_str();
        let raster = SlideRaster::load(id, &CohortManifest::resolve(manifest_path, &entry.path), entry.label)?;
        let grid = build_grid(&raster)?;
        let patches: Vec<RgbPatch> = grid
            .cells()
            .map(|(x, y)| patch_pixels(&raster, x, y))
            .collect::<Result<_>>()?;
        let mut records: Vec<PatchRecord> = grid
            .cells()
            .zip(&patches)
            .map(|((x, y), p)| PatchRecord::new(x, y, detect_tissue(p, &self.config.tissue)))
            .collect();
        let (stain, stain_fallback) = self.slide_stain(id, &records, &patches);

        // Test slides are scored against the complete annotation when one exists.
        let annotation = match split {
            SplitTag::Train => entry.annotation.as_deref(),
            SplitTag::Test => entry.truth_annotation.as_deref().or(entry.annotation.as_deref()),
        };
        if let Some(rel) = annotation {
            let path = CohortManifest::resolve(manifest_path, rel);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let parsed = parse_annotation_xml(&text)?;
            for w in &parsed.warnings {
                log::warn!("{id}: {w}");
            }
            let mut set = parsed.set;
            set.slide_id = id.to_string();
            set.clamp_to(raster.width(), raster.height());
            for (r, inside) in records.iter_mut().zip(patch_membership(&grid, &set)?) {
                r.in_annotation = inside;
            }
        }
        let labeled = match entry.label {
            Some(l) => label_patches(&grid, &records, l),
            None => records.clone(),
        };

        let normalizer = StainNormalizer::new(&stain, &self.config.reference_stain)?;
        let normalized: Vec<Option<RgbPatch>> = records
            .iter()
            .zip(&patches)
            .map(|(r, p)| r.tissue.then(|| normalizer.apply(p)))
            .collect();
        let features: Vec<FeatureRow> = records
            .iter()
            .zip(&normalized)
            .filter_map(|(r, p)| {
                p.as_ref().map(|p| FeatureRow {
                    key: PatchKey::new(id, r.grid_x, r.grid_y),
                    label: None,
                    features: extractor.extract(p),
                })
            })
            .collect();

        let mut train = Vec::new();
        if let (SplitTag::Train, Some(label)) = (split, entry.label) {
            let slide = CohortSlide {
                slide_id: id.to_string(),
                label,
                grid: grid.clone(),
                records: records.clone(),
            };
            for e in slide_entries(&slide, self.stage_seed("dataset")) {
                let gx = e.grid_x.to_string();
                let gy = e.grid_y.to_string();
                let draw_index = derive_seed(0, &[id, &gx, &gy]);
                let patch = normalized[grid.index(e.grid_x, e.grid_y)]
                    .as_ref()
                    .ok_or_else(|| Error::Validation(format!("dataset entry {} is not tissue", e.key())))?;
                let view = augment_geometry(patch, augmentation, draw_index)?;
                let f = extractor.extract(&view);
                train.push((e, f));
            }
        }

        let info = SlideInfo {
            slide_id: id.to_string(),
            label: entry.label,
            split,
            annotated: annotation.is_some(),
            stain,
            stain_fallback,
            tissue_patches: records.iter().filter(|r| r.tissue).count(),
            annotated_patches: records.iter().filter(|r| r.tissue && r.in_annotation).count(),
        };
        log::info!("extracted {id}: {} tissue patches, {} annotated", info.tissue_patches, info.annotated_patches);
        Ok(SlideExtract {
            info,
            rows: labeled.iter().map(|r| PatchRow::from_record(id, r)).collect(),
            features,
            train,
        })
    }

    pub fn extract(&self) -> Result<ExtractSummary> {
        let (manifest_path, manifest) = self.load_manifest()?;
        let labeled: Vec<(String, SlideLabel)> = manifest
            .slides
            .iter()
            .filter_map(|e| e.label.map(|l| (e.slide_id.clone(), l)))
            .collect();
        let mut split = split_slides(&labeled, self.config.split_fraction, self.stage_seed("split"))?;
        // Unlabeled slides cannot train; they are only ever evaluated.
        split.test.extend(manifest.slides.iter().filter(|e| e.label.is_none()).map(|e| e.slide_id.clone()));
        split.test.sort();
        let train_ids: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();

        let extractor = FeatureExtractor::new(&self.config.reference_stain, self.config.tissue)?;
        let mut augmentation = self.config.augmentation.clone();
        augmentation.rng_seed = self.stage_seed("augment");

        let mut entries: Vec<&ManifestEntry> = manifest.slides.iter().collect();
        entries.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        let slides: Vec<SlideExtract> = entries
            .par_iter()
            .map(|e| {
                let tag = if train_ids.contains(e.slide_id.as_str()) { SplitTag::Train } else { SplitTag::Test };
                self.extract_slide(e, &manifest_path, tag, &extractor, &augmentation)
            })
            .collect::<Result<_>>()?;

        let mut rows = Vec::new();
        let mut features = Vec::new();
        let mut train_rows = Vec::new();
        let mut dataset_entries = Vec::new();
        let mut infos = Vec::new();
        for s in slides {
            rows.extend(s.rows);
            features.extend(s.features);
            for (e, f) in s.train {
                train_rows.push(FeatureRow {
                    key: e.key(),
                    label: Some(e.label),
                    features: f,
                });
                dataset_entries.push(e);
            }
            infos.push(s.info);
        }
        let dataset = PatchDataset::new(dataset_entries, SplitTag::Train)?;

        create_dir(&self.paths.extract_dir())?;
        write_json(&self.paths.split(), &split)?;
        write_json(&self.paths.slides(), &infos)?;
        write_json(&self.paths.dataset(), &dataset)?;
        write_rows(create_file(&self.paths.patches())?, &rows)?;
        write_features(&self.paths.features(), &features, false)?;
        write_features(&self.paths.train_features(), &train_rows, true)?;
        Ok(ExtractSummary {
            split,
            slides: infos,
            dataset,
        })
    }

    fn slide_infos(&self) -> Result<Vec<SlideInfo>> {
        read_json(&self.paths.slides(), "extract")
    }

    fn patch_rows(&self) -> Result<Vec<PatchRow>> {
        read_rows(open_file(&self.paths.patches(), "extract")?)
    }

    fn train_params(&self, seed: u64) -> TrainParams {
        TrainParams {
            seed,
            ..self.config.training.clone()
        }
    }

    fn training_samples(rows: &[FeatureRow], slides: Option<&BTreeSet<&str>>) -> Vec<(PatchFeatures, PatchClass)> {
        rows.iter()
            .filter(|r| slides.is_none_or(|s| s.contains(r.key.slide_id.as_str())))
            .filter_map(|r| r.label.map(|l| (r.features.clone(), l)))
            .collect()
    }

    pub fn train(&self) -> Result<ClassifierModel> {
        let rows = read_features(&self.paths.train_features(), "extract")?;
        let model = train(&Self::training_samples(&rows, None), &self.train_params(self.stage_seed("train")))?;
        model.save(&self.paths.model())?;
        Ok(model)
    }

    /// External scores when configured, else the trained model.
    fn scorer(&self, rows: &[PatchRow]) -> Result<Box<dyn PatchScorer>> {
        match &self.config.external_scores {
            Some(path) => {
                let known: BTreeSet<PatchKey> = rows.iter().filter(|r| r.tissue).map(PatchRow::key).collect();
                let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
                Ok(Box::new(ingest_external_scores(std::io::BufReader::new(f), Some(&known))?))
            }
            None => {
                require(&self.paths.model(), "train")?;
                Ok(Box::new(ClassifierModel::load(&self.paths.model())?))
            }
        }
    }

    /// Score every tissue patch and write `scores.csv`. Returns the count.
    pub fn score(&self) -> Result<usize> {
        let rows = self.patch_rows()?;
        let features = feature_map(read_features(&self.paths.features(), "extract")?);
        let scorer = self.scorer(&rows)?;
        let scored = score_rows(&rows, &features, scorer.as_ref())?;
        write_rows(create_file(&self.paths.scores())?, &scored)?;
        Ok(scored.iter().filter(|r| r.s_mel.is_some()).count())
    }

    fn beta_for(&self, info: &SlideInfo, records: &[PatchRecord]) -> Result<f64> {
        if info.annotated {
            annotated_ratio(records)
        } else {
            Ok(self.config.evaluation.fixed_beta)
        }
    }

    /// Slide label and ROI for every slide with scored patches.
    pub fn classify(&self) -> Result<Vec<SlideResult>> {
        let infos = self.slide_infos()?;
        let by_slide = group_records(read_rows(open_file(&self.paths.scores(), "score")?)?)?;
        let results: Vec<Option<SlideResult>> = infos
            .par_iter()
            .map(|info| {
                let records = by_slide.get(&info.slide_id).map(Vec::as_slice).unwrap_or_default();
                if scored_patches(records).is_empty() {
                    log::warn!("slide {} has no scored tissue patches; skipped", info.slide_id);
                    return Ok(None);
                }
                let beta = self.beta_for(info, records)?;
                detect_slide(&info.slide_id, records, beta).map(Some)
            })
            .collect::<Result<_>>()?;
        let results: Vec<SlideResult> = results.into_iter().flatten().collect();
        write_json(&self.paths.slide_results(), &results)?;
        Ok(results)
    }

    fn evaluate_with(&self, infos: &[SlideInfo], test_rows: &[PatchRow], features: &BTreeMap<PatchKey, PatchFeatures>, scorer: &dyn PatchScorer) -> Result<EvalReport> {
        let mut by_slide = group_records(score_rows(test_rows, features, scorer)?)?;
        let slides: Vec<EvalSlide> = infos
            .iter()
            .filter(|i| i.split == SplitTag::Test)
            .map(|i| EvalSlide {
                slide_id: i.slide_id.clone(),
                true_label: i.label,
                annotated: i.annotated,
                records: by_slide.remove(&i.slide_id).unwrap_or_default(),
            })
            .collect();
        let opts = EvalOptions {
            fixed_beta: self.config.evaluation.fixed_beta,
        };
        evaluate_cohort(&slides, &opts, self.config.split_fraction, self.seed)
    }

    fn test_rows(infos: &[SlideInfo], rows: Vec<PatchRow>) -> Vec<PatchRow> {
        let test: BTreeSet<&str> = infos
            .iter()
            .filter(|i| i.split == SplitTag::Test)
            .map(|i| i.slide_id.as_str())
            .collect();
        rows.into_iter().filter(|r| test.contains(r.slide_id.as_str())).collect()
    }

    /// Score the held-out slides with the configured scorer and write the report.
    pub fn evaluate(&self) -> Result<EvalReport> {
        let infos = self.slide_infos()?;
        let rows = self.patch_rows()?;
        let scorer = self.scorer(&rows)?;
        let features = feature_map(read_features(&self.paths.features(), "extract")?);
        let report = self.evaluate_with(&infos, &Self::test_rows(&infos, rows), &features, scorer.as_ref())?;
        write_json(&self.paths.eval_report(), &report)?;
        write_text(&self.paths.eval_table(), &format_eval_table(&report))?;
        Ok(report)
    }

    /// Retrain on stratified subsets of the training slides and evaluate each
    /// model on the fixed test split.
    pub fn sweep(&self) -> Result<RobustnessSummary> {
        let infos = self.slide_infos()?;
        let test_rows = Self::test_rows(&infos, self.patch_rows()?);
        let features = feature_map(read_features(&self.paths.features(), "extract")?);
        let train_rows = read_features(&self.paths.train_features(), "extract")?;
        let train_slides: Vec<(String, SlideLabel)> = infos
            .iter()
            .filter(|i| i.split == SplitTag::Train)
            .filter_map(|i| i.label.map(|l| (i.slide_id.clone(), l)))
            .collect();
        let ev = &self.config.evaluation;
        let summary = robustness_sweep(&train_slides, &ev.fractions, ev.n_repeats, self.stage_seed("sweep"), |subset, seed| {
            let ids: BTreeSet<&str> = subset.iter().map(String::as_str).collect();
            let model = train(&Self::training_samples(&train_rows, Some(&ids)), &self.train_params(seed))?;
            self.evaluate_with(&infos, &test_rows, &features, &model)
        })?;
        write_json(&self.paths.robustness(), &summary)?;
        write_text(&self.paths.robustness_table(), &format_robustness_table(&summary))?;
        Ok(summary)
    }

    /// Render every configured map for each held-out slide.
    pub fn visualize(&self) -> Result<Vec<PathBuf>> {
        let (manifest_path, manifest) = self.load_manifest()?;
        let results: Vec<SlideResult> = read_json(&self.paths.slide_results(), "classify")?;
        let by_slide = group_records(read_rows(open_file(&self.paths.scores(), "score")?)?)?;
        let test: BTreeSet<String> = self
            .slide_infos()?
            .into_iter()
            .filter(|i| i.split == SplitTag::Test)
            .map(|i| i.slide_id)
            .collect();
        let entries: BTreeMap<&str, &ManifestEntry> = manifest.slides.iter().map(|e| (e.slide_id.as_str(), e)).collect();
        let dir = self.paths.viz_dir();
        create_dir(&dir)?;
        let spec = &self.config.render;
        let written: Vec<Vec<PathBuf>> = results
            .par_iter()
            .filter(|r| test.contains(&r.slide_id))
            .map(|result| {
                let id = result.slide_id.as_str();
                let entry = entries
                    .get(id)
                    .ok_or_else(|| Error::Identity(format!("slide {id} is not in the manifest")))?;
                let raster = SlideRaster::load(id, &CohortManifest::resolve(&manifest_path, &entry.path), entry.label)?;
                let grid = build_grid(&raster)?;
                let records = by_slide.get(id).map(Vec::as_slice).unwrap_or_default();
                let mut out = Vec::new();
                for &mode in &spec.modes {
                    let img = render(&raster, &grid, result, records, mode, spec)?;
                    let path = dir.join(format!("{id}_{}.png", mode.as_str()));
                    img.save(&path)?;
                    out.push(path);
                }
                if self.config.dump_reachability {
                    if let Some(path) = self.write_reachability(id, &result.roi_patches)? {
                        out.push(path);
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(written.into_iter().flatten().collect())
    }

    /// Columns `order_index,point_id,grid_x,grid_y,reachability`; an empty
    /// reachability marks the start of a component. Skipped for ROIs smaller
    /// than `min_pts`.
    fn write_reachability(&self, slide_id: &str, roi: &BTreeSet<(u32, u32)>) -> Result<Option<PathBuf>> {
        let params = &self.config.render.cluster;
        let (cells, points) = roi_points(roi);
        let plot = match optics_order(&points, params.min_pts, params.eps) {
            Ok(p) => p,
            Err(Error::SingleClusterFallback { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let path = self.paths.viz_dir().join(format!("{slide_id}_reachability.csv"));
        let mut w = csv::Writer::from_writer(create_file(&path)?);
        w.write_record(["order_index", "point_id", "grid_x", "grid_y", "reachability"])?;
        for (k, (&p, reach)) in plot.ordering.iter().zip(&plot.reachability).enumerate() {
            w.write_record([
                k.to_string(),
                p.to_string(),
                cells[p].0.to_string(),
                cells[p].1.to_string(),
                reach.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(Some(path))
    }
}

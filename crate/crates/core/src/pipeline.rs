//! The three stages over directories of per-image files, plus evaluation.
//!
//! Inputs are matched by file stem: `features/NAME.btf`, `boxes/NAME.json`,
//! `images/NAME.ppm` and optionally `gt/NAME.pgm`. Outputs go under `out_dir`:
//!
//! ```text
//! head/head.btf head/head.json head/loss.csv
//! labels/{crf,ret,fused}/NAME.pgm labels/filling_rate.csv labels/metrics.json
//! seg/head.btf seg/head.json seg/loss.csv
//! eval/pred/NAME.pgm eval/metrics.json
//! ```
//!
//! Each finished stage leaves a `stage.json` holding the settings it ran with, which
//! lets a resumed run skip it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bgattn::{attention_map, bap_pool, extract_queries};
use crate::clshead::{cam, sgd_train, ClassifierHead, HeadMeta, HeadMode, Sample, SgdConfig, DEFAULT_COSINE_SCALE};
use crate::crf::{build_unary, mean_field, CrfParams};
use crate::error::{Error, Result};
use crate::geometry::{build_background_mask, resize_boxes, BoxSet};
use crate::io::{
    read_boxes, read_features, read_image, read_json, read_labels, read_tensor, write_atomic, write_json,
    write_labels, write_tensor, Tensor,
};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::nal::{confidence, correlation_d, inject_disagreement_noise, sgd_train_seg_head, NalParams, SegExample};
use crate::pseudolabel::{
    extract_prototypes, filling_rate_rows, fuse, retrieval_labels, write_filling_rate_csv, FusedLabels,
};
use crate::resample::{bilinear, nearest_labels};
use crate::types::{FeatureMap, LabelMap, Plane, RgbImage, Stack};

/// Optimizer schedule; the seed comes from the top-level config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_step: Option<usize>,
}

impl Default for Schedule {
    fn default() -> Self {
        let d = SgdConfig::default();
        Self {
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr_step: d.lr_step,
        }
    }
}

impl Schedule {
    pub fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_step: self.lr_step,
            seed,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Invalid(format!("{what}: bad lr/momentum/weight_decay")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadStage {
    /// Background queries come from an `N×N` grid.
    pub grid_size: usize,
    pub mode: HeadMode,
    pub scale: f64,
    pub schedule: Schedule,
}

impl Default for HeadStage {
    fn default() -> Self {
        Self {
            grid_size: 4,
            mode: HeadMode::Dot,
            scale: DEFAULT_COSINE_SCALE,
            schedule: Schedule {
                epochs: 40,
                lr: 0.05,
                ..Schedule::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelStage {
    pub grid_size: usize,
    /// Attention at or above this counts as confident background; 0 uses raw attention.
    pub attn_threshold: f64,
    pub crf: CrfParams,
    pub dump_attention: bool,
}

impl Default for LabelStage {
    fn default() -> Self {
        Self {
            grid_size: 1,
            attn_threshold: 0.99,
            crf: CrfParams::default(),
            dump_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NalStage {
    pub gamma: f64,
    pub lambda: f64,
    pub scale: f64,
    /// Fraction of disagreement pixels whose CRF label is replaced by a random other class.
    pub disagreement_noise: f64,
    pub schedule: Schedule,
    pub dump_confidence: bool,
}

impl Default for NalStage {
    fn default() -> Self {
        let p = NalParams::default();
        Self {
            gamma: p.gamma,
            lambda: p.lambda,
            scale: DEFAULT_COSINE_SCALE,
            disagreement_noise: 0.0,
            schedule: Schedule {
                epochs: 40,
                lr: 1e-4,
                batch_size: 1,
                ..Schedule::default()
            },
            dump_confidence: false,
        }
    }
}

impl NalStage {
    pub fn params(&self) -> NalParams {
        NalParams {
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub train_head: bool,
    pub labels: bool,
    pub nal_train: bool,
    pub eval: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            train_head: true,
            labels: true,
            nal_train: true,
            eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub features_dir: PathBuf,
    pub images_dir: PathBuf,
    pub boxes_dir: PathBuf,
    /// Ground truth for evaluation; evaluation metrics are skipped without it.
    pub gt_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Use these head weights instead of `out_dir/head/head.btf`.
    pub head_path: Option<PathBuf>,
    /// Number of foreground classes `L`.
    pub num_classes: usize,
    pub seed: u64,
    pub jobs: usize,
    pub resume: bool,
    pub stages: Stages,
    pub head: HeadStage,
    pub labels: LabelStage,
    pub nal: NalStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            features_dir: "features".into(),
            images_dir: "images".into(),
            boxes_dir: "boxes".into(),
            gt_dir: None,
            out_dir: "out".into(),
            head_path: None,
            num_classes: 0,
            seed: 0,
            jobs: 1,
            resume: false,
            stages: Stages::default(),
            head: HeadStage::default(),
            labels: LabelStage::default(),
            nal: NalStage::default(),
        }
    }
}

impl PipelineConfig {
    /// Config for a corpus laid out like [`crate::synth::synth_corpus`] output.
    pub fn for_corpus(corpus: impl AsRef<Path>, out_dir: impl Into<PathBuf>, num_classes: usize) -> Self {
        let c = corpus.as_ref();
        Self {
            features_dir: c.join("features"),
            images_dir: c.join("images"),
            boxes_dir: c.join("boxes"),
            gt_dir: Some(c.join("gt")),
            out_dir: out_dir.into(),
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > crate::types::MAX_CLASSES {
            return Err(Error::Invalid(format!(
                "num_classes must be in 1..={}, got {}",
                crate::types::MAX_CLASSES,
                self.num_classes
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Invalid("jobs must be at least 1".into()));
        }
        if self.head.grid_size == 0 || self.labels.grid_size == 0 {
            return Err(Error::Invalid("grid sizes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.labels.attn_threshold) {
            return Err(Error::Invalid("attn_threshold must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.nal.disagreement_noise) {
            return Err(Error::Invalid("disagreement_noise must lie in [0, 1]".into()));
        }
        if !(self.head.scale > 0.0 && self.nal.scale > 0.0) {
            return Err(Error::Invalid("head scales must be positive".into()));
        }
        self.labels.crf.validate()?;
        self.nal.params().validate()?;
        self.head.schedule.validate("head")?;
        self.nal.schedule.validate("nal")
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out_dir)
    }

    fn head_weights(&self) -> PathBuf {
        self.head_path.clone().unwrap_or_else(|| self.layout().head())
    }
}

/// Output paths under one artifact directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn head(&self) -> PathBuf {
        self.root.join("head/head.btf")
    }

    pub fn labels(&self, kind: &str) -> PathBuf {
        self.root.join("labels").join(kind)
    }

    pub fn seg_head(&self) -> PathBuf {
        self.root.join("seg/head.btf")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("eval/pred")
    }

    fn marker(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("stage.json")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Sorted stems of `*.ext` files in `dir`.
pub fn list_stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn file(dir: &Path, name: &str, ext: &str) -> PathBuf {
    dir.join(format!("{name}.{ext}"))
}

/// Head weights as a rank-2 `(L+1)×C` tensor plus a JSON sidecar with the same stem.
pub fn save_head(path: impl AsRef<Path>, head: &ClassifierHead) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let data = head.weights().iter().map(|&w| w as f32).collect();
    write_tensor(path, &Tensor::new(vec![head.num_classes() + 1, head.dim()], data)?)?;
    write_json(path.with_extension("json"), &head.meta())
}

pub fn load_head(path: impl AsRef<Path>) -> Result<ClassifierHead> {
    let path = path.as_ref();
    let meta: HeadMeta = read_json(path.with_extension("json"))?;
    let t = read_tensor(path)?;
    if t.dims != [meta.num_classes + 1, meta.dim] {
        return Err(Error::format(
            path,
            0,
            format!("weights are {:?}, sidecar says {}x{}", t.dims, meta.num_classes + 1, meta.dim),
        ));
    }
    ClassifierHead::from_weights(
        meta.num_classes,
        meta.dim,
        meta.mode,
        meta.scale,
        t.data.iter().map(|&v| f64::from(v)).collect(),
    )
    .map_err(|e| e.at(path))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}

/// Run `f` over `names` on `jobs` workers, keeping input order.
fn per_image<T: Send>(
    jobs: usize,
    names: &[String],
    f: impl Fn(&str) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    pool(jobs)?.install(|| names.par_iter().map(|n| f(n)).collect())
}

fn require_dir(stage: &'static str, dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Invalid("input directory does not exist".into()).in_stage(stage, dir))
    }
}

/// Training samples of one image: one pooled feature per box plus every background query.
pub fn head_samples(f: &FeatureMap, boxes: &BoxSet, grid_size: usize) -> Result<Vec<Sample>> {
    let resized = resize_boxes(boxes, f.height(), f.width());
    let mask = build_background_mask(&resized, f.height(), f.width());
    let queries = extract_queries(f, &mask, grid_size)?;
    let attention = attention_map(f, &queries, &resized)?;
    let mut samples = Vec::with_capacity(resized.len() + queries.len());
    for b in &resized.boxes {
        samples.push(Sample {
            feature: bap_pool(f, &attention, b)?.feature,
            target: b.class_id,
        });
    }
    samples.extend(queries.queries.into_iter().map(|q| Sample { feature: q, target: 0 }));
    Ok(samples)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadSummary {
    pub images: usize,
    pub samples: usize,
    pub final_loss: f64,
}

/// Train the classification head on `features_dir` + `boxes_dir` and write it to `out`.
pub fn train_head_dirs(
    features_dir: &Path,
    boxes_dir: &Path,
    num_classes: usize,
    stage: &HeadStage,
    seed: u64,
    jobs: usize,
    out: &Path,
) -> Result<(ClassifierHead, HeadSummary)> {
    const STAGE: &str = "train-head";
    require_dir(STAGE, features_dir)?;
    require_dir(STAGE, boxes_dir)?;
    let names = list_stems(features_dir, "btf").map_err(|e| e.in_stage(STAGE, features_dir))?;
    if names.is_empty() {
        return Err(Error::Invalid("no .btf feature maps".into()).in_stage(STAGE, features_dir));
    }
    let per = per_image(jobs, &names, |name| {
        let fp = file(features_dir, name, "btf");
        let bp = file(boxes_dir, name, "json");
        let f = read_features(&fp).map_err(|e| e.in_stage(STAGE, &fp))?;
        let boxes = read_boxes(&bp, Some(num_classes)).map_err(|e| e.in_stage(STAGE, &bp))?;
        head_samples(&f, &boxes, stage.grid_size).map_err(|e| e.in_stage(STAGE, &fp))
    })?;
    let samples: Vec<Sample> = per.into_iter().flatten().collect();
    let dim = samples.first().map(|s| s.feature.len()).unwrap_or(0);
    let head = ClassifierHead::init(num_classes, dim, stage.mode, stage.scale, seed)
        .map_err(|e| e.in_stage(STAGE, features_dir))?;
    let outcome = sgd_train(head, &samples, &stage.schedule.sgd(seed.wrapping_add(1)))
        .map_err(|e| e.in_stage(STAGE, features_dir))?;
    save_head(out, &outcome.head).map_err(|e| e.in_stage(STAGE, out))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        writeln!(csv, "{i},{l:.8}").expect("string write");
    }
    let loss_path = out.with_file_name("loss.csv");
    write_atomic(&loss_path, csv.as_bytes()).map_err(|e| e.in_stage(STAGE, &loss_path))?;
    let summary = HeadSummary {
        images: names.len(),
        samples: samples.len(),
        final_loss: outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
    };
    log::info!("{STAGE}: {} samples from {} images, final loss {:.4}", summary.samples, summary.images, summary.final_loss);
    Ok((outcome.head, summary))
}

/// Pseudo labels of one image, all at image resolution.
#[derive(Debug, Clone)]
pub struct ImageLabels {
    pub attention: Plane,
    pub labels: FusedLabels,
}

/// `Y_crf`, `Y_ret` and their fusion for one image.
pub fn label_image(
    f: &FeatureMap,
    boxes: &BoxSet,
    image: &RgbImage,
    head: &ClassifierHead,
    stage: &LabelStage,
) -> Result<ImageLabels> {
    if boxes.width != image.width() || boxes.height != image.height() {
        return Err(Error::Shape(format!(
            "boxes frame {}x{} vs image {}x{}",
            boxes.height,
            boxes.width,
            image.height(),
            image.width()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let resized = resize_boxes(boxes, f.height(), f.width());
    let mask = build_background_mask(&resized, f.height(), f.width());
    let queries = extract_queries(f, &mask, stage.grid_size)?;
    if queries.is_empty() {
        log::warn!("no background cells; attention is zero inside every box");
    }
    let attention = attention_map(f, &queries, &resized)?;
    let cams = (1..=head.num_classes())
        .map(|c| cam(f, head, c))
        .collect::<Result<Vec<_>>>()?;
    let unary = build_unary(&cams, &attention, boxes, stage.attn_threshold, h, w)?;
    let crf = mean_field(&unary, image, &stage.crf)?.labels;
    let protos = extract_prototypes(f, &nearest_labels(&crf, f.height(), f.width()))?;
    let ret = retrieval_labels(f, &protos, h, w)?;
    Ok(ImageLabels {
        attention,
        labels: fuse(&crf, &ret)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelQuality {
    pub crf: EvalReport,
    pub ret: EvalReport,
    /// Scored over the agreement region only.
    pub fused: EvalReport,
    /// Share of pixels in the agreement region.
    pub fused_coverage: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSummary {
    pub images: usize,
    pub mean_filling_rate: f64,
    pub quality: Option<LabelQuality>,
}

fn report(stage: &'static str, cm: &ConfusionMatrix, dir: &Path) -> Result<EvalReport> {
    cm.report().map_err(|e| e.in_stage(stage, dir))
}

/// Label every image of the config and write the PGMs and reports.
pub fn generate_labels(cfg: &PipelineConfig, head: &ClassifierHead) -> Result<LabelSummary> {
    const STAGE: &str = "labels";
    for d in [&cfg.features_dir, &cfg.boxes_dir, &cfg.images_dir] {
        require_dir(STAGE, d)?;
    }
    let layout = cfg.layout();
    for kind in ["crf", "ret", "fused"] {
        create_dir(&layout.labels(kind))?;
    }
    if cfg.labels.dump_attention {
        create_dir(&layout.labels("attention"))?;
    }
    let names = list_stems(&cfg.features_dir, "btf").map_err(|e| e.in_stage(STAGE, &cfg.features_dir))?;
    let l = cfg.num_classes;
    let gt_dir = cfg.gt_dir.as_deref();
    let per = per_image(cfg.jobs, &names, |name| {
        let fp = file(&cfg.features_dir, name, "btf");
        let bp = file(&cfg.boxes_dir, name, "json");
        let ip = file(&cfg.images_dir, name, "ppm");
        let f = read_features(&fp).map_err(|e| e.in_stage(STAGE, &fp))?;
        let boxes = read_boxes(&bp, Some(l)).map_err(|e| e.in_stage(STAGE, &bp))?;
        let image = read_image(&ip).map_err(|e| e.in_stage(STAGE, &ip))?;
        let out = label_image(&f, &boxes, &image, head, &cfg.labels).map_err(|e| e.in_stage(STAGE, &fp))?;
        let y = &out.labels;
        for (kind, map) in [("crf", &y.crf), ("ret", &y.ret), ("fused", &y.fused)] {
            let p = file(&layout.labels(kind), name, "pgm");
            write_labels(&p, map).map_err(|e| e.in_stage(STAGE, &p))?;
        }
        if cfg.labels.dump_attention {
            let p = file(&layout.labels("attention"), name, "btf");
            write_tensor(&p, &Tensor::from(&out.attention)).map_err(|e| e.in_stage(STAGE, &p))?;
        }
        let rows = filling_rate_rows(name, &y.crf, &boxes).map_err(|e| e.in_stage(STAGE, &bp))?;
        let scores = match gt_dir {
            Some(dir) => {
                let gp = file(dir, name, "pgm");
                let gt = read_labels(&gp, Some(l)).map_err(|e| e.in_stage(STAGE, &gp))?;
                let mut cms = [(); 3].map(|_| ConfusionMatrix::new(l + 1));
                cms[0].accumulate(&y.crf, &gt, false).map_err(|e| e.in_stage(STAGE, &gp))?;
                cms[1].accumulate(&y.ret, &gt, false).map_err(|e| e.in_stage(STAGE, &gp))?;
                cms[2].accumulate(&y.fused, &gt, true).map_err(|e| e.in_stage(STAGE, &gp))?;
                Some(cms)
            }
            None => None,
        };
        Ok((rows, scores, y.agreement_count(), y.fused.data().len()))
    })?;

    let mut rows = Vec::new();
    let mut totals: Option<[ConfusionMatrix; 3]> = None;
    let (mut agree, mut pixels) = (0, 0);
    for (r, scores, a, n) in per {
        rows.extend(r);
        agree += a;
        pixels += n;
        if let Some(cms) = scores {
            match totals.as_mut() {
                None => totals = Some(cms),
                Some(t) => {
                    for (acc, cm) in t.iter_mut().zip(&cms) {
                        acc.merge(cm)?;
                    }
                }
            }
        }
    }
    let csv = layout.root.join("labels/filling_rate.csv");
    write_filling_rate_csv(&csv, &rows).map_err(|e| e.in_stage(STAGE, &csv))?;
    let quality = match totals {
        Some([crf, ret, fused]) => {
            let dir = gt_dir.unwrap_or(Path::new("."));
            Some(LabelQuality {
                crf: report(STAGE, &crf, dir)?,
                ret: report(STAGE, &ret, dir)?,
                fused: report(STAGE, &fused, dir)?,
                fused_coverage: agree as f64 / pixels.max(1) as f64,
            })
        }
        None => None,
    };
    if let Some(q) = &quality {
        let p = layout.root.join("labels/metrics.json");
        write_json(&p, q).map_err(|e| e.in_stage(STAGE, &p))?;
        log::info!(
            "{STAGE}: mIoU crf {:.4} ret {:.4} fused {:.4} (coverage {:.3})",
            q.crf.miou,
            q.ret.miou,
            q.fused.miou,
            q.fused_coverage
        );
    }
    let summary = LabelSummary {
        images: names.len(),
        mean_filling_rate: rows.iter().map(|r| r.rate).sum::<f64>() / rows.len().max(1) as f64,
        quality,
    };
    Ok(summary)
}

/// Fused labels at feature resolution from image-resolution `Y_crf` / `Y_ret`.
pub fn fused_at_features(crf: &LabelMap, ret: &LabelMap, fh: usize, fw: usize) -> Result<FusedLabels> {
    fuse(&nearest_labels(crf, fh, fw), &nearest_labels(ret, fh, fw))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NalSummary {
    pub images: usize,
    pub flipped_pixels: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

/// Train the segmentation head on features and stored `Y_crf` / `Y_ret` maps.
#[allow(clippy::too_many_arguments)]
pub fn nal_train_dirs(
    features_dir: &Path,
    crf_dir: &Path,
    ret_dir: &Path,
    num_classes: usize,
    stage: &NalStage,
    seed: u64,
    jobs: usize,
    out: &Path,
) -> Result<(ClassifierHead, NalSummary)> {
    const STAGE: &str = "nal-train";
    for d in [features_dir, crf_dir, ret_dir] {
        require_dir(STAGE, d)?;
    }
    let names = list_stems(features_dir, "btf").map_err(|e| e.in_stage(STAGE, features_dir))?;
    if names.is_empty() {
        return Err(Error::Invalid("no .btf feature maps".into()).in_stage(STAGE, features_dir));
    }
    let mut data = per_image(jobs, &names, |name| {
        let fp = file(features_dir, name, "btf");
        let cp = file(crf_dir, name, "pgm");
        let rp = file(ret_dir, name, "pgm");
        let phi = read_features(&fp).map_err(|e| e.in_stage(STAGE, &fp))?;
        let crf = read_labels(&cp, Some(num_classes)).map_err(|e| e.in_stage(STAGE, &cp))?;
        let ret = read_labels(&rp, Some(num_classes)).map_err(|e| e.in_stage(STAGE, &rp))?;
        let labels = fused_at_features(&crf, &ret, phi.height(), phi.width()).map_err(|e| e.in_stage(STAGE, &cp))?;
        Ok(SegExample {
            name: name.to_string(),
            phi,
            labels,
        })
    })?;
    let mut flipped = 0;
    if stage.disagreement_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
        for ex in &mut data {
            flipped += inject_disagreement_noise(&mut ex.labels, stage.disagreement_noise, num_classes, &mut rng);
        }
    }
    let dim = data[0].phi.channels();
    let head = ClassifierHead::init(num_classes, dim, HeadMode::Cosine, stage.scale, seed.wrapping_add(2))
        .map_err(|e| e.in_stage(STAGE, features_dir))?;
    let outcome = sgd_train_seg_head(head, &data, &stage.params(), &stage.schedule.sgd(seed.wrapping_add(4)))
        .map_err(|e| e.in_stage(STAGE, features_dir))?;
    save_head(out, &outcome.head).map_err(|e| e.in_stage(STAGE, out))?;
    let mut csv = String::from("epoch,total,ce,wce\n");
    for e in &outcome.epochs {
        writeln!(csv, "{},{:.8},{:.8},{:.8}", e.epoch, e.total, e.ce, e.wce).expect("string write");
    }
    let loss_path = out.with_file_name("loss.csv");
    write_atomic(&loss_path, csv.as_bytes()).map_err(|e| e.in_stage(STAGE, &loss_path))?;
    if stage.dump_confidence {
        let dir = out.with_file_name("confidence");
        create_dir(&dir)?;
        for ex in &data {
            let d = correlation_d(&ex.phi, &outcome.head)?;
            let sigma = confidence(&d, &ex.labels.crf, stage.gamma)?;
            let p = file(&dir, &ex.name, "btf");
            write_tensor(&p, &Tensor::from(&sigma)).map_err(|e| e.in_stage(STAGE, &p))?;
        }
    }
    let summary = NalSummary {
        images: data.len(),
        flipped_pixels: flipped,
        first_loss: outcome.epochs.first().map_or(f64::NAN, |e| e.total),
        final_loss: outcome.epochs.last().map_or(f64::NAN, |e| e.total),
    };
    log::info!(
        "{STAGE}: loss {:.4} -> {:.4}, {} noisy pixels",
        summary.first_loss,
        summary.final_loss,
        summary.flipped_pixels
    );
    Ok((outcome.head, summary))
}

/// Per-pixel class scores at feature resolution, upsampled bilinearly, then argmax.
pub fn predict(phi: &FeatureMap, head: &ClassifierHead, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let n = phi.len_pixels();
    let k = head.num_classes() + 1;
    let pixels = phi.pixel_major();
    let c = phi.channels();
    let mut planes = vec![vec![0.0; n]; k];
    for p in 0..n {
        let logits = head.logits(&pixels[p * c..(p + 1) * c])?;
        for (plane, v) in planes.iter_mut().zip(logits) {
            plane[p] = v;
        }
    }
    let up = planes
        .into_iter()
        .map(|data| Plane::new(phi.height(), phi.width(), data).map(|p| bilinear(&p, out_h, out_w)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stack::from_planes(&up)?.argmax())
}

/// Confusion matrix of every `pred_dir/NAME.pgm` against `ref_dir/NAME.pgm`.
pub fn evaluate_dirs(pred_dir: &Path, ref_dir: &Path, num_classes: usize, skip_unlabeled: bool) -> Result<EvalReport> {
    const STAGE: &str = "eval";
    require_dir(STAGE, pred_dir)?;
    require_dir(STAGE, ref_dir)?;
    let names = list_stems(pred_dir, "pgm").map_err(|e| e.in_stage(STAGE, pred_dir))?;
    if names.is_empty() {
        return Err(Error::Invalid("no .pgm predictions".into()).in_stage(STAGE, pred_dir));
    }
    let mut cm = ConfusionMatrix::new(num_classes + 1);
    for name in &names {
        let pp = file(pred_dir, name, "pgm");
        let rp = file(ref_dir, name, "pgm");
        let pred = read_labels(&pp, Some(num_classes)).map_err(|e| e.in_stage(STAGE, &pp))?;
        let reference = read_labels(&rp, Some(num_classes)).map_err(|e| e.in_stage(STAGE, &rp))?;
        cm.accumulate(&pred, &reference, skip_unlabeled)
            .map_err(|e| e.in_stage(STAGE, &pp))?;
    }
    report(STAGE, &cm, pred_dir)
}

/// Write predictions of the segmentation head for every image; score them if ground
/// truth is configured.
pub fn evaluate(cfg: &PipelineConfig, head: &ClassifierHead) -> Result<Option<EvalReport>> {
    const STAGE: &str = "eval";
    require_dir(STAGE, &cfg.features_dir)?;
    let layout = cfg.layout();
    let pred_dir = layout.predictions();
    create_dir(&pred_dir)?;
    let names = list_stems(&cfg.features_dir, "btf").map_err(|e| e.in_stage(STAGE, &cfg.features_dir))?;
    per_image(cfg.jobs, &names, |name| {
        let fp = file(&cfg.features_dir, name, "btf");
        let ip = file(&cfg.images_dir, name, "ppm");
        let phi = read_features(&fp).map_err(|e| e.in_stage(STAGE, &fp))?;
        let image = read_image(&ip).map_err(|e| e.in_stage(STAGE, &ip))?;
        let pred = predict(&phi, head, image.height(), image.width()).map_err(|e| e.in_stage(STAGE, &fp))?;
        let p = file(&pred_dir, name, "pgm");
        write_labels(&p, &pred).map_err(|e| e.in_stage(STAGE, &p))
    })?;
    let Some(gt) = &cfg.gt_dir else {
        log::warn!("{STAGE}: no ground truth configured, skipping metrics");
        return Ok(None);
    };
    let report = evaluate_dirs(&pred_dir, gt, cfg.num_classes, false)?;
    let p = layout.root.join("eval/metrics.json");
    write_json(&p, &report).map_err(|e| e.in_stage(STAGE, &p))?;
    log::info!("{STAGE}: mIoU {:.4}, pixel accuracy {:.4}", report.miou, report.pixel_acc);
    Ok(Some(report))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub head: Option<HeadSummary>,
    pub labels: Option<LabelSummary>,
    pub nal: Option<NalSummary>,
    pub eval: Option<EvalReport>,
    pub skipped: Vec<String>,
}

/// The settings a stage depends on; a resumed run skips a stage whose marker matches.
fn stage_key(cfg: &PipelineConfig, stage: &str) -> serde_json::Value {
    let inputs = serde_json::json!({
        "features_dir": cfg.features_dir,
        "images_dir": cfg.images_dir,
        "boxes_dir": cfg.boxes_dir,
        "gt_dir": cfg.gt_dir,
        "num_classes": cfg.num_classes,
        "seed": cfg.seed,
    });
    let settings = match stage {
        "head" => serde_json::to_value(&cfg.head),
        "labels" => serde_json::to_value((&cfg.labels, &cfg.head_path)),
        "seg" => serde_json::to_value(&cfg.nal),
        _ => Ok(serde_json::Value::Null),
    }
    .expect("config serializes");
    serde_json::json!({ "stage": stage, "inputs": inputs, "settings": settings })
}

fn already_done(cfg: &PipelineConfig, stage: &str) -> bool {
    if !cfg.resume {
        return false;
    }
    match read_json::<serde_json::Value>(cfg.layout().marker(stage)) {
        Ok(v) => v == stage_key(cfg, stage),
        Err(_) => false,
    }
}

fn mark_done(cfg: &PipelineConfig, stage: &str) -> Result<()> {
    write_json(cfg.layout().marker(stage), &stage_key(cfg, stage))
}

fn missing(stage: &'static str, path: &Path, hint: &str) -> Error {
    Error::Invalid(format!("missing input; {hint}")).in_stage(stage, path)
}

/// Run the enabled stages in order.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let layout = cfg.layout();
    create_dir(&layout.root)?;
    let mut summary = RunSummary::default();
    let seg_path = layout.seg_head();

    if cfg.stages.train_head {
        if already_done(cfg, "head") {
            summary.skipped.push("train-head".into());
        } else {
            let (_, s) = train_head_dirs(
                &cfg.features_dir,
                &cfg.boxes_dir,
                cfg.num_classes,
                &cfg.head,
                cfg.seed,
                cfg.jobs,
                &layout.head(),
            )?;
            mark_done(cfg, "head")?;
            summary.head = Some(s);
        }
    }

    if cfg.stages.labels {
        if already_done(cfg, "labels") {
            summary.skipped.push("labels".into());
        } else {
            let hp = cfg.head_weights();
            if !hp.is_file() {
                return Err(missing("labels", &hp, "run train-head first or set head_path"));
            }
            let head = load_head(&hp).map_err(|e| e.in_stage("labels", &hp))?;
            summary.labels = Some(generate_labels(cfg, &head)?);
            mark_done(cfg, "labels")?;
        }
    }

    if cfg.stages.nal_train {
        if already_done(cfg, "seg") {
            summary.skipped.push("nal-train".into());
        } else {
            let crf_dir = layout.labels("crf");
            if !crf_dir.is_dir() {
                return Err(missing("nal-train", &crf_dir, "run labels first"));
            }
            let (_, s) = nal_train_dirs(
                &cfg.features_dir,
                &crf_dir,
                &layout.labels("ret"),
                cfg.num_classes,
                &cfg.nal,
                cfg.seed,
                cfg.jobs,
                &seg_path,
            )?;
            mark_done(cfg, "seg")?;
            summary.nal = Some(s);
        }
    }

    if cfg.stages.eval {
        if !seg_path.is_file() {
            return Err(missing("eval", &seg_path, "run nal-train first"));
        }
        let head = load_head(&seg_path).map_err(|e| e.in_stage("eval", &seg_path))?;
        summary.eval = evaluate(cfg, &head)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_corpus, SynthConfig};

    #[test]
    fn config_round_trips() {
        let mut cfg = PipelineConfig::for_corpus("/data", "/out", 3);
        cfg.nal.lambda = 0.0;
        cfg.labels.crf.iterations = 3;
        cfg.head_path = Some("/w/head.btf".into());
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"num_classes": 2, "nal": {"gamma": 3}}"#).unwrap();
        assert_eq!(cfg.nal.gamma, 3.0);
        assert_eq!(cfg.nal.lambda, 0.1);
        assert_eq!(cfg.head.grid_size, 4);
        assert_eq!(cfg.labels.grid_size, 1);
        assert_eq!(cfg.labels.attn_threshold, 0.99);
        cfg.validate().unwrap();
        assert!(PipelineConfig::default().validate().is_err());
    }

    #[test]
    fn head_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let head = ClassifierHead::init(2, 5, HeadMode::Cosine, 10.0, 3).unwrap();
        let p = dir.path().join("w/head.btf");
        save_head(&p, &head).unwrap();
        let back = load_head(&p).unwrap();
        assert_eq!(back.meta(), head.meta());
        for (a, b) in back.weights().iter().zip(head.weights()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
    }

    #[test]
    fn labels_need_a_head() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        synth_corpus(&SynthConfig { n_images: 2, size: 32, ..SynthConfig::default() }, &corpus).unwrap();
        let mut cfg = PipelineConfig::for_corpus(&corpus, dir.path().join("out"), 3);
        cfg.stages.train_head = false;
        let err = run_pipeline(&cfg).unwrap_err();
        match err {
            Error::Stage { stage, path, .. } => {
                assert_eq!(stage, "labels");
                assert!(path.ends_with("head/head.btf"));
            }
            other => panic!("unexpected {other}"),
        }
    }
}

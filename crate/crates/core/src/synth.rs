//! Synthetic corpus: colored shapes on textured backgrounds, with ground truth,
//! boxes and dense features.
//!
//! Feature vectors are built from one orthonormal direction per class plus a
//! per-image background direction. The lower part of every shape gets a feature
//! that leans towards the background, so prototype retrieval disagrees with the
//! color-driven CRF there while the ground truth still says "object".

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxSet};
use crate::io::{write_boxes, write_features, write_image, write_json, write_labels};
use crate::linalg::{dot, norm};
use crate::types::{FeatureMap, LabelMap, RgbImage};

pub const MAX_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    /// Image side length, at most 128.
    pub size: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Image pixels per feature cell along each axis.
    pub stride: usize,
    /// Per-channel Gaussian noise added to the features.
    pub noise: f64,
    /// Fraction of each shape's height (from the bottom) with background-leaning features.
    pub weak_fraction: f64,
    /// Weight of the class direction in the weak part; the background gets the rest.
    pub weak_mix: f64,
    pub max_objects: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 50,
            size: 64,
            n_classes: 3,
            feature_dim: 16,
            stride: 4,
            noise: 0.02,
            weak_fraction: 0.3,
            weak_mix: 0.4,
            max_objects: 3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size > MAX_SIZE {
            return Err(Error::Invalid(format!("size must be in 1..={MAX_SIZE}, got {}", self.size)));
        }
        if self.stride == 0 || !self.size.is_multiple_of(self.stride) {
            return Err(Error::Invalid(format!(
                "stride {} must divide size {}",
                self.stride, self.size
            )));
        }
        if self.size < 16 {
            return Err(Error::Invalid("size must be at least 16".into()));
        }
        if self.n_classes == 0 || self.feature_dim < self.n_classes + 1 {
            return Err(Error::Invalid(format!(
                "need 1 <= n_classes < feature_dim, got {} and {}",
                self.n_classes, self.feature_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.weak_fraction) || !(0.0..=1.0).contains(&self.weak_mix) {
            return Err(Error::Invalid("weak_fraction and weak_mix must be in [0, 1]".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || self.max_objects == 0 {
            return Err(Error::Invalid("noise must be >= 0 and max_objects >= 1".into()));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.size / self.stride
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub name: String,
    pub image: RgbImage,
    pub gt: LabelMap,
    pub boxes: BoxSet,
    pub features: FeatureMap,
}

pub fn sample_name(index: usize) -> String {
    format!("img{index:04}")
}

const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 200, 60],
    [60, 80, 235],
    [235, 205, 40],
    [210, 60, 210],
    [40, 205, 210],
    [245, 130, 30],
    [150, 240, 150],
];

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Row 0 is the background direction, row `c` the direction of class `c`.
pub fn class_directions(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes + 1);
    while basis.len() <= cfg.n_classes {
        let mut v: Vec<f64> = (0..cfg.feature_dim).map(|_| gaussian(&mut rng)).collect();
        for b in &basis {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if norm(&v) > 1e-6 {
            basis.push(normalized(v));
        }
    }
    basis
}

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
}

impl Shape {
    fn contains(self, y: usize, x: usize, r: &BBox) -> bool {
        let (h, w) = ((r.ymax - r.ymin) as f64, (r.xmax - r.xmin) as f64);
        let (u, v) = ((x - r.xmin) as f64 + 0.5, (y - r.ymin) as f64 + 0.5);
        match self {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (dx, dy) = (2.0 * u / w - 1.0, 2.0 * v / h - 1.0);
                dx * dx + dy * dy <= 1.0
            }
            Shape::Triangle => (2.0 * u / w - 1.0).abs() <= v / h,
        }
    }
}

fn overlaps(a: &BBox, b: &BBox, gap: usize) -> bool {
    a.xmin < b.xmax + gap && b.xmin < a.xmax + gap && a.ymin < b.ymax + gap && b.ymin < a.ymax + gap
}

/// Generate image `index` of the corpus; each image has its own RNG stream.
pub fn generate(cfg: &SynthConfig, index: usize) -> Result<SynthSample> {
    cfg.validate()?;
    let dirs = class_directions(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let size = cfg.size;

    let n_objects = rng.random_range(1..=cfg.max_objects);
    let mut placed: Vec<(BBox, Shape)> = Vec::new();
    for _ in 0..200 {
        if placed.len() == n_objects {
            break;
        }
        let h = rng.random_range(size / 4..=size / 2);
        let w = rng.random_range(size / 4..=size / 2);
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        let class_id = rng.random_range(1..=cfg.n_classes) as u8;
        let shape = [Shape::Rect, Shape::Ellipse, Shape::Triangle][rng.random_range(0..3)];
        let b = BBox::new(class_id, x0, y0, x0 + w, y0 + h);
        if placed.iter().all(|(o, _)| !overlaps(o, &b, 2)) {
            placed.push((b, shape));
        }
    }

    let mut gt = vec![0u8; size * size];
    // 0 = background, 1 = object core, 2 = weak part.
    let mut part = vec![0u8; size * size];
    let mut owner = vec![usize::MAX; size * size];
    let mut boxes = Vec::with_capacity(placed.len());
    for (k, (frame, shape)) in placed.iter().enumerate() {
        let (mut ymin, mut xmin, mut ymax, mut xmax) = (usize::MAX, usize::MAX, 0, 0);
        for y in frame.ymin..frame.ymax {
            for x in frame.xmin..frame.xmax {
                if shape.contains(y, x, frame) {
                    let p = y * size + x;
                    gt[p] = frame.class_id;
                    owner[p] = k;
                    (ymin, xmin) = (ymin.min(y), xmin.min(x));
                    (ymax, xmax) = (ymax.max(y + 1), xmax.max(x + 1));
                }
            }
        }
        let tight = BBox::new(frame.class_id, xmin, ymin, xmax, ymax);
        let weak_from = ymax - ((ymax - ymin) as f64 * cfg.weak_fraction).round() as usize;
        for p in tight.pixels(size) {
            if owner[p] == k {
                part[p] = if p / size >= weak_from { 2 } else { 1 };
            }
        }
        boxes.push(tight);
    }

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..110.0));
    let (fy, fx) = (rng.random_range(2.5..5.0), rng.random_range(2.5..5.0));
    let mut rgb = Vec::with_capacity(size * size * 3);
    for p in 0..size * size {
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let color: [f64; 3] = if owner[p] == usize::MAX {
            let texture = 12.0 * (x / fx).sin() * (y / fy).cos();
            std::array::from_fn(|i| base[i] + texture)
        } else {
            PALETTE[(usize::from(gt[p]) - 1) % PALETTE.len()].map(f64::from)
        };
        for c in color {
            rgb.push((c + rng.random_range(-5.0..5.0)).round().clamp(0.0, 255.0) as u8);
        }
    }

    let dim = cfg.feature_dim;
    let background = normalized(dirs[0].iter().map(|v| v + 0.1 * gaussian(&mut rng)).collect());
    let fs = cfg.feature_size();
    let cell = (cfg.stride * cfg.stride) as f64;
    let mut data = vec![0f32; dim * fs * fs];
    let mut acc = vec![0.0; dim];
    for cy in 0..fs {
        for cx in 0..fs {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for y in cy * cfg.stride..(cy + 1) * cfg.stride {
                for x in cx * cfg.stride..(cx + 1) * cfg.stride {
                    let p = y * size + x;
                    let class_dir = &dirs[usize::from(gt[p])];
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += match part[p] {
                            0 => background[i],
                            1 => class_dir[i],
                            _ => cfg.weak_mix * class_dir[i] + (1.0 - cfg.weak_mix) * background[i],
                        };
                    }
                }
            }
            for (i, a) in acc.iter().enumerate() {
                data[(i * fs + cy) * fs + cx] = (a / cell + cfg.noise * gaussian(&mut rng)) as f32;
            }
        }
    }

    Ok(SynthSample {
        name: sample_name(index),
        image: RgbImage::new(size, size, rgb)?,
        gt: LabelMap::new(size, size, gt)?,
        boxes: BoxSet::new(size, size, boxes),
        features: FeatureMap::new(dim, fs, fs, data)?,
    })
}

/// Write the corpus as `images/*.ppm`, `gt/*.pgm`, `boxes/*.json`, `features/*.btf`
/// and `corpus.json`. Returns the image names in order.
pub fn synth_corpus(cfg: &SynthConfig, dir: impl AsRef<Path>) -> Result<Vec<String>> {
    cfg.validate()?;
    let dir = dir.as_ref();
    for sub in ["images", "gt", "boxes", "features"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut names = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let s = generate(cfg, i)?;
        write_image(dir.join("images").join(format!("{}.ppm", s.name)), &s.image)?;
        write_labels(dir.join("gt").join(format!("{}.pgm", s.name)), &s.gt)?;
        write_boxes(dir.join("boxes").join(format!("{}.json", s.name)), &s.boxes)?;
        write_features(dir.join("features").join(format!("{}.btf", s.name)), &s.features)?;
        names.push(s.name);
    }
    write_json(dir.join("corpus.json"), cfg)?;
    Ok(names)
}

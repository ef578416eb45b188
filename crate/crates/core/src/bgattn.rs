//! Background queries, background attention and background-aware pooling.
//!
//! Queries are mask-weighted means of the features in each cell of an `N×N` grid,
//! restricted to the definite background. Pixels inside boxes are scored by the
//! mean truncated cosine similarity to those queries; pooling a box then weights
//! each pixel by its foreground probability `1 - A(p)`.

use crate::error::{Error, Result};
use crate::geometry::{BBox, BackgroundMask, BoxSet};
use crate::linalg::cosine;
use crate::types::{AttentionMap, FeatureMap};

/// Denominator below which pooling falls back to the plain box mean.
pub const POOL_EPS: f64 = 1e-12;

/// Background queries of one image; only cells touching the definite background appear.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub grid_size: usize,
    pub queries: Vec<Vec<f64>>,
    /// Row-major cell id (`row · N + col`) of each query.
    pub cell_index: Vec<usize>,
}

impl QuerySet {
    /// Number of valid cells, `J`.
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Foreground feature of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub feature: Vec<f64>,
    /// `Σ (1 - A(p))` over the box.
    pub weight: f64,
}

/// Half-open span of grid row/column `k` out of `n` over `len` pixels.
pub fn cell_span(k: usize, n: usize, len: usize) -> (usize, usize) {
    (k * len / n, (k + 1) * len / n)
}

pub fn extract_queries(f: &FeatureMap, mask: &BackgroundMask, grid_size: usize) -> Result<QuerySet> {
    if grid_size == 0 {
        return Err(Error::Invalid("grid size must be at least 1".into()));
    }
    if mask.height != f.height() || mask.width != f.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs features {}x{}",
            mask.height,
            mask.width,
            f.height(),
            f.width()
        )));
    }
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let plane = h * w;
    let data = f.data();
    let mut queries = Vec::new();
    let mut cell_index = Vec::new();
    for row in 0..grid_size {
        let (y0, y1) = cell_span(row, grid_size, h);
        for col in 0..grid_size {
            let (x0, x1) = cell_span(col, grid_size, w);
            let mut sum = vec![0.0; c];
            let mut count = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * w + x;
                    if mask.is_background(p) {
                        count += 1;
                        for (k, s) in sum.iter_mut().enumerate() {
                            *s += f64::from(data[k * plane + p]);
                        }
                    }
                }
            }
            if count > 0 {
                let n = count as f64;
                queries.push(sum.into_iter().map(|s| s / n).collect());
                cell_index.push(row * grid_size + col);
            }
        }
    }
    Ok(QuerySet {
        grid_size,
        queries,
        cell_index,
    })
}

/// Background attention on the feature grid. `boxes` must already be resized to it.
///
/// With no valid query (`J = 0`) pixels inside boxes get `A = 0`, which turns
/// background-aware pooling into plain average pooling.
pub fn attention_map(f: &FeatureMap, queries: &QuerySet, boxes: &BoxSet) -> Result<AttentionMap> {
    if boxes.width != f.width() || boxes.height != f.height() {
        return Err(Error::Shape(format!(
            "boxes are on a {}x{} grid, features are {}x{}",
            boxes.height,
            boxes.width,
            f.height(),
            f.width()
        )));
    }
    if let Some(q) = queries.queries.iter().find(|q| q.len() != f.channels()) {
        return Err(Error::Shape(format!(
            "query dim {} vs feature channels {}",
            q.len(),
            f.channels()
        )));
    }
    let inside = boxes.coverage();
    let j = queries.len();
    let data = inside
        .iter()
        .enumerate()
        .map(|(p, &covered)| {
            if !covered {
                1.0
            } else if j == 0 {
                0.0
            } else {
                let fp = f.pixel(p);
                let total: f64 = queries.queries.iter().map(|q| cosine(&fp, q).max(0.0)).sum();
                (total / j as f64).clamp(0.0, 1.0)
            }
        })
        .collect();
    AttentionMap::new(f.height(), f.width(), data)
}

/// Foreground-weighted average of the features inside `bbox`.
pub fn bap_pool(f: &FeatureMap, attention: &AttentionMap, bbox: &BBox) -> Result<PooledFeature> {
    if attention.height != f.height() || attention.width != f.width() {
        return Err(Error::Shape("attention and features differ in resolution".into()));
    }
    if bbox.xmax > f.width() || bbox.ymax > f.height() || bbox.area() == 0 {
        return Err(Error::Invalid(format!("box {bbox:?} is not on the feature grid")));
    }
    let c = f.channels();
    let plane = f.len_pixels();
    let data = f.data();
    let mut weighted = vec![0.0; c];
    let mut plain = vec![0.0; c];
    let mut weight = 0.0;
    let mut count = 0usize;
    for p in bbox.pixels(f.width()) {
        let wp = 1.0 - attention.data[p];
        weight += wp;
        count += 1;
        for k in 0..c {
            let v = f64::from(data[k * plane + p]);
            weighted[k] += wp * v;
            plain[k] += v;
        }
    }
    let feature = if weight > POOL_EPS {
        weighted.into_iter().map(|s| s / weight).collect()
    } else {
        plain.into_iter().map(|s| s / count as f64).collect()
    };
    Ok(PooledFeature { feature, weight })
}

//! Python bindings. Maps cross the boundary as flat row-major sequences; label maps come back as `bytes`.

use std::path::PathBuf;

use bana_core::clshead::{self, HeadMode, Sample};
use bana_core::pipeline::{self, PipelineConfig};
use bana_core::synth::{self, SynthConfig};
use bana_core::{bgattn, crf, io, metrics, nal, pseudolabel};
use bana_core::{BBox, BoxSet, Error, LabelMap, Plane, RgbImage, Stack};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type BoxTuple = (u8, usize, usize, usize, usize);

fn err(e: Error) -> PyErr {
    let mut root = &e;
    while let Error::Stage { source, .. } = root {
        root = source;
    }
    match root {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Internal(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn box_set(width: usize, height: usize, boxes: Vec<BoxTuple>) -> BoxSet {
    let boxes = boxes
        .into_iter()
        .map(|(c, xmin, ymin, xmax, ymax)| BBox::new(c, xmin, ymin, xmax, ymax))
        .collect();
    BoxSet::new(width, height, boxes)
}

fn tuples(set: &BoxSet) -> Vec<BoxTuple> {
    set.boxes
        .iter()
        .map(|b| (b.class_id, b.xmin, b.ymin, b.xmax, b.ymax))
        .collect()
}

fn labels(height: usize, width: usize, data: Vec<u8>) -> PyResult<LabelMap> {
    LabelMap::new(height, width, data).map_err(err)
}

fn parse_mode(mode: &str) -> PyResult<HeadMode> {
    match mode {
        "dot" => Ok(HeadMode::Dot),
        "cosine" => Ok(HeadMode::Cosine),
        other => Err(PyValueError::new_err(format!("mode must be 'dot' or 'cosine', got {other:?}"))),
    }
}

/// Dense features, `C×H×W`.
#[pyclass(name = "FeatureMap", frozen)]
struct PyFeatureMap {
    inner: bana_core::FeatureMap,
}

#[pymethods]
impl PyFeatureMap {
    /// `data` is channel-major: index `(c·H + y)·W + x`.
    #[new]
    fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        let inner = bana_core::FeatureMap::new(channels, height, width, data).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_features(path).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_features(path, &self.inner).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.channels(), self.inner.height(), self.inner.width())
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<Vec<f64>> {
        if y >= self.inner.height() || x >= self.inner.width() {
            return Err(PyValueError::new_err("pixel outside the map"));
        }
        Ok(self.inner.pixel(y * self.inner.width() + x))
    }

    fn scaled(&self, alpha: f32) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.scaled(alpha).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        let (c, h, w) = self.shape();
        format!("FeatureMap(channels={c}, height={h}, width={w})")
    }
}

/// `(L+1)`-way linear or cosine classifier.
#[pyclass(name = "ClassifierHead")]
struct PyHead {
    inner: clshead::ClassifierHead,
}

#[pymethods]
impl PyHead {
    #[new]
    #[pyo3(signature = (num_classes, dim, mode = "dot", scale = clshead::DEFAULT_COSINE_SCALE, seed = 0))]
    fn new(num_classes: usize, dim: usize, mode: &str, scale: f64, seed: u64) -> PyResult<Self> {
        let inner = clshead::ClassifierHead::init(num_classes, dim, parse_mode(mode)?, scale, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (num_classes, dim, weights, mode = "dot", scale = clshead::DEFAULT_COSINE_SCALE))]
    fn from_weights(num_classes: usize, dim: usize, weights: Vec<f64>, mode: &str, scale: f64) -> PyResult<Self> {
        let inner =
            clshead::ClassifierHead::from_weights(num_classes, dim, parse_mode(mode)?, scale, weights).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pipeline::load_head(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        pipeline::save_head(path, &self.inner).map_err(err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.logits(&x).map_err(err)
    }

    fn probabilities(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.probabilities(&x).map_err(err)
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<u8> {
        self.inner.predict(&x).map_err(err)
    }

    /// Mean cross-entropy over the batch and its gradient w.r.t. the flat weights.
    fn ce_loss_and_grad(&self, features: Vec<Vec<f64>>, targets: Vec<u8>) -> PyResult<(f64, Vec<f64>)> {
        if features.len() != targets.len() {
            return Err(PyValueError::new_err("features and targets differ in length"));
        }
        let batch: Vec<Sample> = features
            .into_iter()
            .zip(targets)
            .map(|(feature, target)| Sample { feature, target })
            .collect();
        self.inner.ce_loss_and_grad(&batch).map_err(err)
    }

    /// Momentum SGD; returns the mean loss of each epoch.
    #[pyo3(signature = (features, targets, lr = 0.1, epochs = 30, batch_size = 20, seed = 0))]
    fn fit(
        &mut self,
        features: Vec<Vec<f64>>,
        targets: Vec<u8>,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        if features.len() != targets.len() {
            return Err(PyValueError::new_err("features and targets differ in length"));
        }
        let samples: Vec<Sample> = features
            .into_iter()
            .zip(targets)
            .map(|(feature, target)| Sample { feature, target })
            .collect();
        let cfg = clshead::SgdConfig {
            lr,
            epochs,
            batch_size,
            seed,
            ..clshead::SgdConfig::default()
        };
        let out = clshead::sgd_train(self.inner.clone(), &samples, &cfg).map_err(err)?;
        self.inner = out.head;
        Ok(out.epoch_losses)
    }

    fn __repr__(&self) -> String {
        let m = self.inner.meta();
        format!("ClassifierHead(L={}, C={}, mode={:?}, scale={})", m.num_classes, m.dim, m.mode, m.scale)
    }
}

/// Boxes `(class, xmin, ymin, xmax, ymax)` from a `width×height` frame onto a `feat_h×feat_w` grid.
#[pyfunction]
fn resize_boxes(boxes: Vec<BoxTuple>, width: usize, height: usize, feat_h: usize, feat_w: usize) -> Vec<BoxTuple> {
    tuples(&bana_core::resize_boxes(&box_set(width, height, boxes), feat_h, feat_w))
}

/// Background attention on the feature grid; `boxes` are already on that grid.
/// Returns the flat map and the number of valid queries.
#[pyfunction]
fn attention(f: &PyFeatureMap, boxes: Vec<BoxTuple>, grid_size: usize) -> PyResult<(Vec<f64>, usize)> {
    let (h, w) = (f.inner.height(), f.inner.width());
    let set = box_set(w, h, boxes);
    let mask = bana_core::build_background_mask(&set, h, w);
    let q = bgattn::extract_queries(&f.inner, &mask, grid_size).map_err(err)?;
    let a = bgattn::attention_map(&f.inner, &q, &set).map_err(err)?;
    Ok((a.data, q.len()))
}

/// Attention-weighted mean feature of one box (on the feature grid).
#[pyfunction]
fn bap_pool(f: &PyFeatureMap, attention: Vec<f64>, bbox: BoxTuple) -> PyResult<Vec<f64>> {
    let a = Plane::new(f.inner.height(), f.inner.width(), attention).map_err(err)?;
    let (c, xmin, ymin, xmax, ymax) = bbox;
    let pooled = bgattn::bap_pool(&f.inner, &a, &BBox::new(c, xmin, ymin, xmax, ymax)).map_err(err)?;
    Ok(pooled.feature)
}

#[pyfunction]
fn cam(f: &PyFeatureMap, head: &PyHead, class_id: usize) -> PyResult<Vec<f64>> {
    Ok(clshead::cam(&f.inner, &head.inner, class_id).map_err(err)?.data)
}

/// Mean-field CRF. `unary` holds `num_labels` planes of `height·width` scores; `rgb`
/// is interleaved 8-bit color. Returns labels and flat marginals.
#[pyfunction]
#[pyo3(signature = (unary, num_labels, height, width, rgb, iterations = 10, w1 = None, w2 = None, theta_alpha = None, theta_beta = None, theta_gamma = None))]
#[allow(clippy::too_many_arguments)]
fn dense_crf(
    unary: Vec<f64>,
    num_labels: usize,
    height: usize,
    width: usize,
    rgb: Vec<u8>,
    iterations: usize,
    w1: Option<f64>,
    w2: Option<f64>,
    theta_alpha: Option<f64>,
    theta_beta: Option<f64>,
    theta_gamma: Option<f64>,
) -> PyResult<(Vec<u8>, Vec<f64>)> {
    let n = height * width;
    if unary.len() != num_labels * n {
        return Err(PyValueError::new_err("unary length must be num_labels·height·width"));
    }
    let planes = unary
        .chunks(n.max(1))
        .map(|c| Plane::new(height, width, c.to_vec()))
        .collect::<bana_core::Result<Vec<_>>>()
        .map_err(err)?;
    let u = Stack::from_planes(&planes).map_err(err)?;
    let image = RgbImage::new(height, width, rgb).map_err(err)?;
    let d = crf::CrfParams::default();
    let params = crf::CrfParams {
        iterations,
        w1: w1.unwrap_or(d.w1),
        w2: w2.unwrap_or(d.w2),
        theta_alpha: theta_alpha.unwrap_or(d.theta_alpha),
        theta_beta: theta_beta.unwrap_or(d.theta_beta),
        theta_gamma: theta_gamma.unwrap_or(d.theta_gamma),
        ..d
    };
    let out = crf::mean_field(&u, &image, &params).map_err(err)?;
    Ok((out.labels.data().to_vec(), out.marginals.data))
}

/// `σ = (D_{y}/max_c D_c)^γ` from the cosine head's correlation maps.
#[pyfunction]
fn confidence(phi: &PyFeatureMap, head: &PyHead, y_crf: Vec<u8>, gamma: f64) -> PyResult<Vec<f64>> {
    let y = labels(phi.inner.height(), phi.inner.width(), y_crf)?;
    let d = nal::correlation_d(&phi.inner, &head.inner).map_err(err)?;
    Ok(nal::confidence(&d, &y, gamma).map_err(err)?.data)
}

/// Noise-aware loss of one image; returns `(total, ce, wce, gradient)`.
#[pyfunction]
#[pyo3(signature = (phi, head, y_crf, y_ret, gamma = 7.0, lambda_ = 0.1))]
fn nal_loss_and_grad(
    phi: &PyFeatureMap,
    head: &PyHead,
    y_crf: Vec<u8>,
    y_ret: Vec<u8>,
    gamma: f64,
    lambda_: f64,
) -> PyResult<(f64, f64, f64, Vec<f64>)> {
    let (h, w) = (phi.inner.height(), phi.inner.width());
    let fused = pseudolabel::fuse(&labels(h, w, y_crf)?, &labels(h, w, y_ret)?).map_err(err)?;
    let params = nal::NalParams { gamma, lambda: lambda_ };
    let (r, g) = nal::nal_loss_and_grad(&phi.inner, &head.inner, &fused, &params).map_err(err)?;
    Ok((r.total, r.ce, r.wce, g))
}

/// Retrieval labels at `out_h×out_w` from prototypes of `y` (given at feature resolution).
#[pyfunction]
fn retrieval_labels(f: &PyFeatureMap, y: Vec<u8>, out_h: usize, out_w: usize) -> PyResult<Vec<u8>> {
    let y = labels(f.inner.height(), f.inner.width(), y)?;
    let protos = pseudolabel::extract_prototypes(&f.inner, &y).map_err(err)?;
    Ok(pseudolabel::retrieval_labels(&f.inner, &protos, out_h, out_w)
        .map_err(err)?
        .data()
        .to_vec())
}

/// `(mIoU, per-class IoU)`; classes absent from both maps are `None`.
#[pyfunction]
fn miou(pred: Vec<u8>, reference: Vec<u8>, num_classes: usize) -> PyResult<(f64, Vec<Option<f64>>)> {
    let n = pred.len();
    let cm = metrics::confusion(&labels(1, n, pred)?, &labels(1, reference.len(), reference)?, num_classes)
        .map_err(err)?;
    cm.miou().map_err(err)
}

#[pyfunction]
fn filling_rate(y: Vec<u8>, height: usize, width: usize, boxes: Vec<BoxTuple>) -> PyResult<Vec<f64>> {
    pseudolabel::filling_rate(&labels(height, width, y)?, &box_set(width, height, boxes)).map_err(err)
}

/// Read a `.btf` tensor as `(dims, data)`.
#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let t = io::read_tensor(path).map_err(err)?;
    Ok((t.dims, t.data))
}

#[pyfunction]
fn write_tensor(path: PathBuf, dims: Vec<usize>, data: Vec<f32>) -> PyResult<()> {
    io::write_tensor(path, &io::Tensor::new(dims, data).map_err(err)?).map_err(err)
}

/// Write a synthetic corpus; returns the image names.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, n_images = 50, size = 64, n_classes = 3))]
fn synth_corpus(out: PathBuf, seed: u64, n_images: usize, size: usize, n_classes: usize) -> PyResult<Vec<String>> {
    let cfg = SynthConfig {
        seed,
        n_images,
        size,
        n_classes,
        ..SynthConfig::default()
    };
    synth::synth_corpus(&cfg, out).map_err(err)
}

/// Run the pipeline from a JSON config string; returns the JSON run summary.
#[pyfunction]
fn run_pipeline(config_json: &str) -> PyResult<String> {
    let cfg: PipelineConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    let summary = pipeline::run_pipeline(&cfg).map_err(err)?;
    serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Default pipeline config for a synthetic corpus directory, as JSON.
#[pyfunction]
fn corpus_config(corpus: PathBuf, out_dir: PathBuf, num_classes: usize) -> PyResult<String> {
    serde_json::to_string(&PipelineConfig::for_corpus(corpus, out_dir, num_classes))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn bana(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IGNORE", bana_core::IGNORE)?;
    m.add_class::<PyFeatureMap>()?;
    m.add_class::<PyHead>()?;
    m.add_function(wrap_pyfunction!(resize_boxes, m)?)?;
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(bap_pool, m)?)?;
    m.add_function(wrap_pyfunction!(cam, m)?)?;
    m.add_function(wrap_pyfunction!(dense_crf, m)?)?;
    m.add_function(wrap_pyfunction!(confidence, m)?)?;
    m.add_function(wrap_pyfunction!(nal_loss_and_grad, m)?)?;
    m.add_function(wrap_pyfunction!(retrieval_labels, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(filling_rate, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_config, m)?)?;
    Ok(())
}

//! `(L+1)`-way softmax classifier head with hand-written gradients, its SGD trainer,
//! and class activation maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_softmax_at, norm, softmax, ZERO_NORM};
use crate::types::{FeatureMap, Plane};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 1e-2;
pub const DEFAULT_COSINE_SCALE: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// `logit_c = x · w_c`
    Dot,
    /// `logit_c = s · cos(x, w_c)`
    Cosine,
}

/// Linear classifier over `L` object classes plus background (class 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    num_classes: usize,
    dim: usize,
    mode: HeadMode,
    scale: f64,
    /// `(L+1) × C`, row-major.
    weights: Vec<f64>,
}

/// One training example: a feature vector and its target class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub target: u8,
}

/// JSON sidecar stored next to the weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub mode: HeadMode,
    pub scale: f64,
    #[serde(rename = "L")]
    pub num_classes: usize,
    #[serde(rename = "C")]
    pub dim: usize,
}

impl ClassifierHead {
    pub fn from_weights(
        num_classes: usize,
        dim: usize,
        mode: HeadMode,
        scale: f64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > crate::types::MAX_CLASSES {
            return Err(Error::Invalid(format!("class count {num_classes} out of range")));
        }
        if dim == 0 {
            return Err(Error::Invalid("head dimension must be positive".into()));
        }
        if weights.len() != (num_classes + 1) * dim {
            return Err(Error::Shape(format!(
                "head ({}+1)x{dim} needs {} weights, got {}",
                num_classes,
                (num_classes + 1) * dim,
                weights.len()
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Invalid(format!("head scale must be positive, got {scale}")));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Invalid("non-finite head weight".into()));
        }
        Ok(Self {
            num_classes,
            dim,
            mode,
            scale,
            weights,
        })
    }

    /// Gaussian initialisation, mean 0 and std [`INIT_STD`].
    pub fn init(num_classes: usize, dim: usize, mode: HeadMode, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let weights = (0..(num_classes + 1) * dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self::from_weights(num_classes, dim, mode, scale, weights)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        *self = Self::from_weights(self.num_classes, self.dim, self.mode, self.scale, weights)?;
        Ok(())
    }

    pub fn weight(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn meta(&self) -> HeadMeta {
        HeadMeta {
            mode: self.mode,
            scale: self.scale,
            num_classes: self.num_classes,
            dim: self.dim,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature dim {} vs head dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.logits_unchecked(x))
    }

    pub(crate) fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let classes = 0..=self.num_classes;
        match self.mode {
            HeadMode::Dot => classes.map(|c| dot(x, self.weight(c))).collect(),
            HeadMode::Cosine => {
                let nx = norm(x);
                classes
                    .map(|c| {
                        let w = self.weight(c);
                        let nw = norm(w);
                        if nx <= ZERO_NORM || nw <= ZERO_NORM {
                            0.0
                        } else {
                            self.scale * dot(x, w) / (nx * nw)
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Cross-entropy of one sample, scaled by `factor`; adds `factor · ∂CE/∂W` into `grad`.
    pub(crate) fn accumulate_ce(&self, x: &[f64], target: usize, factor: f64, grad: &mut [f64]) -> f64 {
        let logits = self.logits_unchecked(x);
        let probs = softmax(&logits);
        let loss = -log_softmax_at(&logits, target);
        let nx = norm(x);
        for c in 0..=self.num_classes {
            let dz = factor * (probs[c] - if c == target { 1.0 } else { 0.0 });
            if dz == 0.0 {
                continue;
            }
            let g = &mut grad[c * self.dim..(c + 1) * self.dim];
            let w = &self.weights[c * self.dim..(c + 1) * self.dim];
            match self.mode {
                HeadMode::Dot => {
                    for (gk, xk) in g.iter_mut().zip(x) {
                        *gk += dz * xk;
                    }
                }
                HeadMode::Cosine => {
                    let nw = norm(w);
                    if nx <= ZERO_NORM || nw <= ZERO_NORM {
                        continue;
                    }
                    // ∂/∂w [s·x·w/(|x||w|)] = s/(|x||w|) · (x − (x·w/|w|²) w)
                    let xw = dot(x, w);
                    let a = dz * self.scale / (nx * nw);
                    let b = xw / (nw * nw);
                    for ((gk, xk), wk) in g.iter_mut().zip(x).zip(w) {
                        *gk += a * (xk - b * wk);
                    }
                }
            }
        }
        factor * loss
    }

    /// Mean cross-entropy over `batch` and its gradient w.r.t. the weights.
    pub fn ce_loss_and_grad(&self, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for s in batch {
            self.check_dim(&s.feature)?;
            if usize::from(s.target) > self.num_classes {
                return Err(Error::Invalid(format!(
                    "target {} outside 0..={}",
                    s.target, self.num_classes
                )));
            }
        }
        let factor = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let loss = batch
            .iter()
            .map(|s| self.accumulate_ce(&s.feature, usize::from(s.target), factor, &mut grad))
            .sum();
        Ok((loss, grad))
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for c in 1..logits.len() {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        Ok(best as u8)
    }
}

/// SGD hyperparameters. Momentum and weight decay default to 0.9 and 5e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Divide the learning rate by 10 every `lr_step` epochs.
    pub lr_step: Option<usize>,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            batch_size: 20,
            lr_step: None,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            Some(step) if step > 0 => self.lr * 0.1f64.powi((epoch / step) as i32),
            _ => self.lr,
        }
    }
}

/// Heavy-ball momentum with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Momentum {
    velocity: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
}

impl Momentum {
    pub fn new(len: usize, cfg: &SgdConfig) -> Self {
        Self {
            velocity: vec![0.0; len],
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, head: &mut ClassifierHead, grad: &[f64], lr: f64) {
        for ((w, v), g) in head.weights.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *w;
            *w -= lr * *v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: ClassifierHead,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch SGD over `samples`, shuffled each epoch by a seeded RNG.
pub fn sgd_train(head: ClassifierHead, samples: &[Sample], cfg: &SgdConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    let mut head = head;
    let mut opt = Momentum::new(head.weights.len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let batch_size = cfg.batch_size.max(1);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (loss, grad) = head.ce_loss_and_grad(&batch)?;
            opt.step(&mut head, &grad, lr);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("head epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { head, epoch_losses })
}

/// `CAM_c(p) = ReLU(f(p) · w_c)` with the raw weights in either mode.
pub fn cam(f: &FeatureMap, head: &ClassifierHead, class: usize) -> Result<Plane> {
    if class == 0 || class > head.num_classes {
        return Err(Error::Invalid(format!(
            "CAM class must be in 1..={}, got {class}",
            head.num_classes
        )));
    }
    if f.channels() != head.dim {
        return Err(Error::Shape(format!(
            "feature channels {} vs head dim {}",
            f.channels(),
            head.dim
        )));
    }
    let w = head.weight(class);
    let plane = f.len_pixels();
    let data = f.data();
    let mut out = vec![0.0; plane];
    for (k, &wk) in w.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&data[k * plane..(k + 1) * plane]) {
            *o += wk * f64::from(v);
        }
    }
    for o in &mut out {
        *o = o.max(0.0);
    }
    Plane::new(f.height(), f.width(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn head(mode: HeadMode, scale: f64, rows: &[&[f64]]) -> ClassifierHead {
        let dim = rows[0].len();
        ClassifierHead::from_weights(
            rows.len() - 1,
            dim,
            mode,
            scale,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_logit_at_weight_is_scale() {
        let h = head(HeadMode::Cosine, 10.0, &[&[0.0, 1.0], &[3.0, 4.0]]);
        let z = h.logits(&[3.0, 4.0]).unwrap();
        assert!((z[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn dot_logit_orthogonal_is_zero() {
        let h = head(HeadMode::Dot, 1.0, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let z = h.logits(&[1.0, 0.0]).unwrap();
        assert_eq!(z, vec![1.0, 0.0]);
        let p = softmax(&z);
        // e/(e+1), 1/(e+1)
        assert!((p[0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((p[1] - 0.268_941_421_4).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let h = head(HeadMode::Dot, 1.0, &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(h.logits(&[1.0]).is_err());
        assert!(h.ce_loss_and_grad(&[]).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let h = head(HeadMode::Dot, 1.0, &[&[0.0], &[0.0], &[0.0]]);
        let (loss, _) = h
            .ce_loss_and_grad(&[Sample {
                feature: vec![1.0],
                target: 2,
            }])
            .unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cosine_saturation() {
        let h = head(HeadMode::Cosine, 200.0, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let (loss, _) = h
            .ce_loss_and_grad(&[Sample {
                feature: vec![0.0, 2.0],
                target: 1,
            }])
            .unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    fn finite_difference(h: &ClassifierHead, batch: &[Sample], step: f64) -> Vec<f64> {
        let base = h.weights().to_vec();
        (0..base.len())
            .map(|i| {
                let mut plus = h.clone();
                let mut w = base.clone();
                w[i] += step;
                plus.set_weights(w).unwrap();
                let mut minus = h.clone();
                let mut w = base.clone();
                w[i] -= step;
                minus.set_weights(w).unwrap();
                let lp = plus.ce_loss_and_grad(batch).unwrap().0;
                let lm = minus.ce_loss_and_grad(batch).unwrap().0;
                (lp - lm) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for mode in [HeadMode::Dot, HeadMode::Cosine] {
            for _ in 0..10 {
                let weights = (0..4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let h = ClassifierHead::from_weights(3, 5, mode, 4.0, weights).unwrap();
                let batch: Vec<Sample> = (0..4)
                    .map(|_| Sample {
                        feature: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        target: rng.random_range(0..4),
                    })
                    .collect();
                let (_, grad) = h.ce_loss_and_grad(&batch).unwrap();
                let fd = finite_difference(&h, &batch, 1e-5);
                for (a, b) in grad.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{mode:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn init_statistics() {
        let h = ClassifierHead::init(20, 200, HeadMode::Dot, 1.0, 7).unwrap();
        let n = h.weights().len() as f64;
        let mean = h.weights().iter().sum::<f64>() / n;
        let var = h.weights().iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }

    fn clusters(seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centers = [[0.0, 0.0, 4.0], [4.0, 0.0, 0.0], [0.0, 4.0, 0.0]];
        (0..150)
            .map(|i| {
                let c = i % 3;
                Sample {
                    feature: centers[c].iter().map(|m| m + noise.sample(&mut rng)).collect(),
                    target: c as u8,
                }
            })
            .collect()
    }

    #[test]
    fn sgd_separates_clusters_deterministically() {
        let data = clusters(11);
        let cfg = SgdConfig {
            lr: 0.05,
            epochs: 20,
            batch_size: 10,
            seed: 5,
            ..SgdConfig::default()
        };
        let h0 = ClassifierHead::init(2, 3, HeadMode::Dot, 1.0, 1).unwrap();
        let initial = h0.ce_loss_and_grad(&data).unwrap().0;
        let out = sgd_train(h0.clone(), &data, &cfg).unwrap();
        let final_loss = out.head.ce_loss_and_grad(&data).unwrap().0;
        assert!(final_loss < initial);
        let correct = data
            .iter()
            .filter(|s| out.head.predict(&s.feature).unwrap() == s.target)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
        let again = sgd_train(h0, &data, &cfg).unwrap();
        assert_eq!(again.head, out.head);
    }

    #[test]
    fn cam_values() {
        let h = head(HeadMode::Cosine, 15.0, &[&[0.0, 0.0], &[1.0, 1.0]]);
        let f = FeatureMap::from_pixels(1, 3, &[vec![1.0, 1.0], vec![1.0, -1.0], vec![-2.0, 0.0]]).unwrap();
        let m = cam(&f, &h, 1).unwrap();
        assert_eq!(m.data, vec![2.0, 0.0, 0.0]);
        assert!(cam(&f, &h, 0).is_err());
        assert!(cam(&f, &h, 2).is_err());
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = SgdConfig {
            lr: 1.0,
            lr_step: Some(10),
            ..SgdConfig::default()
        };
        assert_eq!(cfg.lr_at(9), 1.0);
        assert!((cfg.lr_at(10) - 0.1).abs() < 1e-15);
    }
}

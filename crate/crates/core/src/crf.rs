//! Unary terms from CAMs and background attention, and fully connected CRF inference.
//!
//! The pairwise term is a Potts model weighted by
//!
//! ```text
//! k(i, j) = w1 · exp(-|p_i - p_j|² / 2θα² - |I_i - I_j|² / 2θβ²) + w2 · exp(-|p_i - p_j|² / 2θγ²)
//! ```
//!
//! and marginals are updated synchronously. Two message-passing paths exist: a
//! truncated-window path used in production and a quadratic reference path that
//! sums over every pixel pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{resize_boxes, BoxSet};
use crate::resample::bilinear;
use crate::types::{AttentionMap, LabelMap, MarginalStack, Plane, RgbImage, Stack, UnaryStack};

/// Largest image the reference path accepts (`H·W`).
pub const NAIVE_MAX_PIXELS: usize = 64 * 64;

/// Upper bound on cached kernel values (8 bytes each) before the windowed path
/// recomputes kernels every iteration instead.
const KERNEL_CACHE_PAIRS: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfParams {
    /// Weight of the appearance (bilateral) kernel.
    pub w1: f64,
    /// Weight of the smoothness kernel.
    pub w2: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
    /// Floor applied to scores before they become potentials.
    pub unary_floor: f64,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w1: 4.0,
            w2: 3.0,
            theta_alpha: 49.0,
            theta_beta: 5.0,
            theta_gamma: 3.0,
            iterations: 10,
            unary_floor: 1e-5,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let bandwidths = [self.theta_alpha, self.theta_beta, self.theta_gamma];
        if bandwidths.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
            return Err(Error::Invalid(format!("CRF bandwidths must be positive: {bandwidths:?}")));
        }
        if !(self.w1.is_finite() && self.w2.is_finite() && self.w1 >= 0.0 && self.w2 >= 0.0) {
            return Err(Error::Invalid("CRF kernel weights must be non-negative".into()));
        }
        if !(self.unary_floor > 0.0 && self.unary_floor < 1.0) {
            return Err(Error::Invalid("unary floor must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Window radius that keeps every pair within three spatial bandwidths.
    pub fn default_radius(&self) -> usize {
        (3.0 * self.theta_alpha.max(self.theta_gamma)).ceil() as usize
    }
}

/// Build `(L+1)` unary score maps at `out_h × out_w`.
///
/// `cams[c - 1]` is the CAM of class `c` at feature resolution; `boxes` are in the
/// image frame. Each CAM is normalised by its maximum over the boxes of its class,
/// upsampled, and zeroed outside those boxes. The background channel is the
/// upsampled attention, binarised at `threshold` when `threshold > 0`, and 1
/// outside every box.
pub fn build_unary(
    cams: &[Plane],
    attention: &AttentionMap,
    boxes: &BoxSet,
    threshold: f64,
    out_h: usize,
    out_w: usize,
) -> Result<UnaryStack> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let (fh, fw) = (attention.height, attention.width);
    if let Some(c) = cams.iter().find(|c| c.height != fh || c.width != fw) {
        return Err(Error::Shape(format!(
            "CAM is {}x{} but attention is {fh}x{fw}",
            c.height, c.width
        )));
    }
    let num_classes = cams.len();
    let on_features = resize_boxes(boxes, fh, fw);
    let on_output = resize_boxes(boxes, out_h, out_w);
    let mut planes = Vec::with_capacity(num_classes + 1);

    let inside_any = on_output.coverage();
    let mut background = bilinear(attention, out_h, out_w);
    for (v, &inside) in background.data.iter_mut().zip(&inside_any) {
        if !inside {
            *v = 1.0;
        } else if threshold > 0.0 {
            *v = if *v >= threshold { 1.0 } else { 0.0 };
        } else {
            *v = v.clamp(0.0, 1.0);
        }
    }
    planes.push(background);

    for (k, cam) in cams.iter().enumerate() {
        let class = (k + 1) as u8;
        let region = on_features.class_coverage(class);
        let peak = cam
            .data
            .iter()
            .zip(&region)
            .filter(|(_, &r)| r)
            .map(|(&v, _)| v)
            .fold(0.0, f64::max);
        if peak <= 0.0 {
            planes.push(Plane::filled(out_h, out_w, 0.0));
            continue;
        }
        let normalized = Plane {
            height: fh,
            width: fw,
            data: cam.data.iter().map(|v| (v / peak).clamp(0.0, 1.0)).collect(),
        };
        let mut up = bilinear(&normalized, out_h, out_w);
        let covered = on_output.class_coverage(class);
        for (v, &inside) in up.data.iter_mut().zip(&covered) {
            if !inside {
                *v = 0.0;
            }
        }
        planes.push(up);
    }
    Stack::from_planes(&planes)
}

/// `ψ(p, c) = -log(max(u_c(p), ε) / Z_p)`, with `Z_p` the per-pixel sum of floored scores.
pub fn unary_potentials(unary: &UnaryStack, floor: f64) -> Stack {
    let n = unary.height * unary.width;
    let mut out = Stack::zeros(unary.planes, unary.height, unary.width);
    for p in 0..n {
        let z: f64 = (0..unary.planes).map(|c| unary.at(c, p).max(floor)).sum();
        for c in 0..unary.planes {
            out.data[c * n + p] = -(unary.at(c, p).max(floor) / z).ln();
        }
    }
    out
}

/// Result of mean-field inference.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfOutput {
    pub labels: LabelMap,
    pub marginals: MarginalStack,
}

struct Kernel<'a> {
    image: &'a RgbImage,
    width: usize,
    w1: f64,
    w2: f64,
    inv_alpha: f64,
    inv_beta: f64,
    inv_gamma: f64,
}

impl<'a> Kernel<'a> {
    fn new(image: &'a RgbImage, params: &CrfParams) -> Self {
        Self {
            image,
            width: image.width(),
            w1: params.w1,
            w2: params.w2,
            inv_alpha: 1.0 / (2.0 * params.theta_alpha * params.theta_alpha),
            inv_beta: 1.0 / (2.0 * params.theta_beta * params.theta_beta),
            inv_gamma: 1.0 / (2.0 * params.theta_gamma * params.theta_gamma),
        }
    }

    fn eval(&self, i: usize, j: usize) -> f64 {
        let (yi, xi) = (i / self.width, i % self.width);
        let (yj, xj) = (j / self.width, j % self.width);
        let dy = yi as f64 - yj as f64;
        let dx = xi as f64 - xj as f64;
        let d2 = dx * dx + dy * dy;
        let (a, b) = (self.image.pixel(i), self.image.pixel(j));
        let c2: f64 = a
            .iter()
            .zip(&b)
            .map(|(&u, &v)| {
                let d = f64::from(u) - f64::from(v);
                d * d
            })
            .sum();
        let mut k = 0.0;
        if self.w1 != 0.0 {
            k += self.w1 * (-d2 * self.inv_alpha - c2 * self.inv_beta).exp();
        }
        if self.w2 != 0.0 {
            k += self.w2 * (-d2 * self.inv_gamma).exp();
        }
        k
    }
}

/// Visit every unordered pair `(i, j)`, `i < j`, whose offsets are within `radius`
/// along both axes, in a fixed order.
fn for_each_window_pair(h: usize, w: usize, radius: usize, mut visit: impl FnMut(usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for xj in x + 1..=(x + radius).min(w - 1) {
                visit(i, y * w + xj);
            }
            for yj in y + 1..=(y + radius).min(h - 1) {
                for xj in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                    visit(i, yj * w + xj);
                }
            }
        }
    }
}

fn window_pair_count(h: usize, w: usize, radius: usize) -> usize {
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            n += (x + radius).min(w - 1) - x;
            let rows = (y + radius).min(h - 1) - y;
            let cols = (x + radius).min(w - 1) - x.saturating_sub(radius) + 1;
            n += rows * cols;
        }
    }
    n
}

/// Computes `m_i(l) = Σ_{j≠i} k(i, j) · Q_j(l)` from pixel-major marginals.
trait MessagePass {
    fn messages(&mut self, q: &[f64], labels: usize, out: &mut [f64]);
}

struct WindowPass<'a> {
    kernel: Kernel<'a>,
    h: usize,
    w: usize,
    radius: usize,
    cache: Option<Vec<f64>>,
}

impl<'a> WindowPass<'a> {
    fn new(kernel: Kernel<'a>, h: usize, w: usize, radius: usize) -> Self {
        let cache = (window_pair_count(h, w, radius) <= KERNEL_CACHE_PAIRS).then(|| {
            let mut values = Vec::new();
            for_each_window_pair(h, w, radius, |i, j| values.push(kernel.eval(i, j)));
            values
        });
        Self {
            kernel,
            h,
            w,
            radius,
            cache,
        }
    }
}

impl MessagePass for WindowPass<'_> {
    fn messages(&mut self, q: &[f64], labels: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut pair = 0usize;
        let cache = self.cache.as_deref();
        let kernel = &self.kernel;
        for_each_window_pair(self.h, self.w, self.radius, |i, j| {
            let k = match cache {
                Some(values) => values[pair],
                None => kernel.eval(i, j),
            };
            pair += 1;
            if k == 0.0 {
                return;
            }
            for l in 0..labels {
                out[i * labels + l] += k * q[j * labels + l];
                out[j * labels + l] += k * q[i * labels + l];
            }
        });
    }
}

struct NaivePass<'a> {
    kernel: Kernel<'a>,
    n: usize,
}

impl MessagePass for NaivePass<'_> {
    fn messages(&mut self, q: &[f64], labels: usize, out: &mut [f64]) {
        for i in 0..self.n {
            let m = &mut out[i * labels..(i + 1) * labels];
            m.iter_mut().for_each(|v| *v = 0.0);
            for j in (0..self.n).filter(|&j| j != i) {
                let k = self.kernel.eval(i, j);
                for l in 0..labels {
                    m[l] += k * q[j * labels + l];
                }
            }
        }
    }
}

fn check_inputs(unary: &UnaryStack, image: &RgbImage, params: &CrfParams) -> Result<()> {
    params.validate()?;
    if unary.height != image.height() || unary.width != image.width() {
        return Err(Error::Shape(format!(
            "unary is {}x{} but image is {}x{}",
            unary.height,
            unary.width,
            image.height(),
            image.width()
        )));
    }
    if unary.planes < 2 {
        return Err(Error::Invalid("CRF needs at least two labels".into()));
    }
    Ok(())
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn to_stack(q: &[f64], labels: usize, h: usize, w: usize) -> Stack {
    let n = h * w;
    let mut s = Stack::zeros(labels, h, w);
    for p in 0..n {
        for l in 0..labels {
            s.data[l * n + p] = q[p * labels + l];
        }
    }
    s
}

fn run(
    unary: &UnaryStack,
    params: &CrfParams,
    pass: &mut dyn MessagePass,
    observer: &mut dyn FnMut(usize, &MarginalStack),
) -> CrfOutput {
    let (labels, h, w) = (unary.planes, unary.height, unary.width);
    let n = h * w;
    let psi = unary_potentials(unary, params.unary_floor);
    // pixel-major negative potentials
    let mut neg_psi = vec![0.0; n * labels];
    for p in 0..n {
        for l in 0..labels {
            neg_psi[p * labels + l] = -psi.at(l, p);
        }
    }
    let mut q = vec![0.0; n * labels];
    for p in 0..n {
        softmax_into(&neg_psi[p * labels..(p + 1) * labels], &mut q[p * labels..(p + 1) * labels]);
    }
    let mut msg = vec![0.0; n * labels];
    let mut logits = vec![0.0; labels];
    for iter in 0..params.iterations {
        pass.messages(&q, labels, &mut msg);
        for p in 0..n {
            for l in 0..labels {
                logits[l] = neg_psi[p * labels + l] + msg[p * labels + l];
            }
            softmax_into(&logits, &mut q[p * labels..(p + 1) * labels]);
        }
        observer(iter + 1, &to_stack(&q, labels, h, w));
    }
    let marginals = to_stack(&q, labels, h, w);
    CrfOutput {
        labels: marginals.argmax(),
        marginals,
    }
}

/// Mean-field inference with the default truncated window.
pub fn mean_field(unary: &UnaryStack, image: &RgbImage, params: &CrfParams) -> Result<CrfOutput> {
    mean_field_windowed(unary, image, params, params.default_radius(), &mut |_, _| {})
}

/// Mean-field inference summing pairwise messages over a `(2r+1)²` window.
/// `observer` sees the marginals after each iteration.
pub fn mean_field_windowed(
    unary: &UnaryStack,
    image: &RgbImage,
    params: &CrfParams,
    radius: usize,
    observer: &mut dyn FnMut(usize, &MarginalStack),
) -> Result<CrfOutput> {
    check_inputs(unary, image, params)?;
    let mut pass = WindowPass::new(Kernel::new(image, params), unary.height, unary.width, radius);
    Ok(run(unary, params, &mut pass, observer))
}

/// Reference inference with exact `O((HW)²)` message sums, for images up to 64×64.
pub fn mean_field_naive_oracle(
    unary: &UnaryStack,
    image: &RgbImage,
    params: &CrfParams,
) -> Result<CrfOutput> {
    check_inputs(unary, image, params)?;
    let n = unary.height * unary.width;
    if n > NAIVE_MAX_PIXELS {
        return Err(Error::Invalid(format!(
            "reference CRF is limited to {NAIVE_MAX_PIXELS} pixels, got {n}"
        )));
    }
    let mut pass = NaivePass {
        kernel: Kernel::new(image, params),
        n,
    };
    Ok(run(unary, params, &mut pass, &mut |_, _| {}))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: usize) -> (UnaryStack, RgbImage) {
        let unary = Stack {
            planes: labels,
            height: h,
            width: w,
            data: (0..labels * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        };
        let image = RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.random()).collect()).unwrap();
        (unary, image)
    }

    #[test]
    fn window_pair_enumeration_matches_count() {
        for (h, w, r) in [(1, 1, 3), (3, 5, 1), (6, 4, 2), (5, 5, 10)] {
            let mut seen = 0;
            let mut pairs = std::collections::BTreeSet::new();
            for_each_window_pair(h, w, r, |i, j| {
                assert!(i < j);
                assert!(pairs.insert((i, j)));
                seen += 1;
            });
            assert_eq!(seen, window_pair_count(h, w, r));
            // brute force: all pairs within Chebyshev radius r
            let expect = (0..h * w)
                .flat_map(|i| (i + 1..h * w).map(move |j| (i, j)))
                .filter(|&(i, j)| (i / w).abs_diff(j / w) <= r && (i % w).abs_diff(j % w) <= r)
                .count();
            assert_eq!(seen, expect);
        }
    }

    #[test]
    fn zero_iterations_is_softmax_of_unary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (unary, image) = random_case(&mut rng, 3, 4, 3);
        let params = CrfParams {
            iterations: 0,
            ..CrfParams::default()
        };
        let out = mean_field(&unary, &image, &params).unwrap();
        let psi = unary_potentials(&unary, params.unary_floor);
        for p in 0..12 {
            let z: f64 = (0..3).map(|l| (-psi.at(l, p)).exp()).sum();
            for l in 0..3 {
                let expect = (-psi.at(l, p)).exp() / z;
                assert!((out.marginals.at(l, p) - expect).abs() < 1e-12);
                // normalised scores
                let s: f64 = (0..3).map(|c| unary.at(c, p).max(1e-5)).sum();
                assert!((expect - unary.at(l, p).max(1e-5) / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_pairwise_keeps_unary_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (unary, image) = random_case(&mut rng, 5, 6, 4);
        let params = CrfParams {
            w1: 0.0,
            w2: 0.0,
            ..CrfParams::default()
        };
        let out = mean_field(&unary, &image, &params).unwrap();
        assert_eq!(out.labels, unary.argmax());
    }

    fn energy(psi: &Stack, kernel: &Kernel, x: &[usize]) -> f64 {
        let mut e: f64 = x.iter().enumerate().map(|(p, &l)| psi.at(l, p)).sum();
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                if x[i] != x[j] {
                    e += kernel.eval(i, j);
                }
            }
        }
        e
    }

    #[test]
    fn strong_coupling_agrees_with_exact_enumeration() {
        // pixel 0 prefers label 0 strongly, pixel 1 weakly prefers label 1
        let unary = Stack {
            planes: 2,
            height: 1,
            width: 2,
            data: vec![0.9, 0.4, 0.1, 0.6],
        };
        let image = RgbImage::new(1, 2, vec![10, 10, 10, 12, 12, 12]).unwrap();
        let params = CrfParams {
            w1: 5.0,
            w2: 5.0,
            ..CrfParams::default()
        };
        let psi = unary_potentials(&unary, params.unary_floor);
        let kernel = Kernel::new(&image, &params);
        let best = [[0, 0], [0, 1], [1, 0], [1, 1]]
            .into_iter()
            .min_by(|a, b| energy(&psi, &kernel, a).total_cmp(&energy(&psi, &kernel, b)))
            .unwrap();
        assert_eq!(best, [0, 0]);
        let out = mean_field(&unary, &image, &params).unwrap();
        assert_eq!(out.labels.data(), &[0, 0]);
        let weak = CrfParams {
            w1: 0.0,
            w2: 0.0,
            ..params
        };
        assert_eq!(mean_field(&unary, &image, &weak).unwrap().labels.data(), &[0, 1]);
    }

    #[test]
    fn uniform_unary_gives_constant_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, image) = random_case(&mut rng, 6, 6, 3);
        let unary = Stack {
            planes: 3,
            height: 6,
            width: 6,
            data: vec![0.5; 3 * 36],
        };
        let out = mean_field(&unary, &image, &CrfParams::default()).unwrap();
        assert!(out.labels.data().iter().all(|&l| l == out.labels.data()[0]));
    }

    #[test]
    fn windowed_matches_reference_and_stays_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let h = rng.random_range(2..9);
            let w = rng.random_range(2..9);
            let (unary, image) = random_case(&mut rng, h, w, 3);
            let params = CrfParams {
                theta_alpha: 3.0,
                theta_beta: 40.0,
                w1: 1.0,
                w2: 0.5,
                ..CrfParams::default()
            };
            let mut sums_ok = true;
            let fast = mean_field_windowed(&unary, &image, &params, 16, &mut |_, q| {
                for p in 0..h * w {
                    let s: f64 = (0..3).map(|l| q.at(l, p)).sum();
                    sums_ok &= (s - 1.0).abs() <= 1e-9;
                }
            })
            .unwrap();
            assert!(sums_ok);
            let slow = mean_field_naive_oracle(&unary, &image, &params).unwrap();
            let diff = fast
                .marginals
                .data
                .iter()
                .zip(&slow.marginals.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn reference_rejects_large_images() {
        let unary = Stack::zeros(2, 65, 64);
        let image = RgbImage::new(65, 64, vec![0; 65 * 64 * 3]).unwrap();
        assert!(mean_field_naive_oracle(&unary, &image, &CrfParams::default()).is_err());
    }

    #[test]
    fn unary_from_constant_cam() {
        // 2×2 features, one class-1 box covering the left column, image 4×4
        let cam = Plane::filled(2, 2, 3.0);
        let attention = Plane::new(2, 2, vec![0.2, 1.0, 0.2, 1.0]).unwrap();
        let boxes = BoxSet::new(4, 4, vec![BBox::new(1, 0, 0, 2, 4)]);
        let u = build_unary(&[cam], &attention, &boxes, 0.99, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let p = y * 4 + x;
                if x < 2 {
                    assert_eq!(u.at(1, p), 1.0);
                } else {
                    assert_eq!(u.at(1, p), 0.0);
                    assert_eq!(u.at(0, p), 1.0);
                }
            }
        }
        // inside the box the bilinear attention never reaches 0.99
        assert!((0..16).filter(|p| p % 4 < 2).all(|p| u.at(0, p) == 0.0));
        // raw mode keeps the upsampled attention
        let raw = build_unary(&[Plane::filled(2, 2, 3.0)], &attention, &boxes, 0.0, 4, 4).unwrap();
        assert!((raw.at(0, 0) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_cam_gives_zero_unary() {
        let boxes = BoxSet::new(2, 2, vec![BBox::new(1, 0, 0, 2, 2)]);
        let u = build_unary(&[Plane::filled(2, 2, 0.0)], &Plane::filled(2, 2, 0.0), &boxes, 0.99, 2, 2)
            .unwrap();
        assert!(u.plane(1).iter().all(|&v| v == 0.0));
        let bad = build_unary(&[Plane::filled(3, 2, 1.0)], &Plane::filled(2, 2, 0.0), &boxes, 0.99, 2, 2);
        assert!(bad.is_err());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (unary, image) = random_case(&mut rng, 8, 8, 3);
        let a = mean_field(&unary, &image, &CrfParams::default()).unwrap();
        let b = mean_field(&unary, &image, &CrfParams::default()).unwrap();
        let bits = |o: &CrfOutput| o.marginals.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels, b.labels);
    }
}

//! Noise-aware loss for training a segmentation head on fused pseudo labels.
//!
//! Pixels where the two pseudo labels agree (`S`) get plain cross-entropy. The
//! remaining pixels (`~S`) keep their CRF label and are weighted by a confidence
//!
//! ```text
//! σ(p) = (D_{c*}(p) / max_c D_c(p))^γ,   D_c(p) = 1 + cos(φ(p), W_c)
//! ```
//!
//! computed from the current head and held constant for the gradient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clshead::{ClassifierHead, Momentum, SgdConfig};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::pseudolabel::FusedLabels;
use crate::types::{ConfidenceMap, FeatureMap, LabelMap, Stack, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NalParams {
    /// Damping exponent, at least 1.
    pub gamma: f64,
    /// Weight of the confidence-weighted term.
    pub lambda: f64,
}

impl Default for NalParams {
    fn default() -> Self {
        Self {
            gamma: 7.0,
            lambda: 0.1,
        }
    }
}

impl NalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 1.0) {
            return Err(Error::Invalid(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_head(phi: &FeatureMap, head: &ClassifierHead) -> Result<()> {
    if phi.channels() != head.dim() {
        return Err(Error::Shape(format!(
            "feature channels {} vs head dim {}",
            phi.channels(),
            head.dim()
        )));
    }
    Ok(())
}

/// `D_c(p) = 1 + cos(φ(p), W_c)` for every class; 1 where a norm vanishes.
pub fn correlation_d(phi: &FeatureMap, head: &ClassifierHead) -> Result<Stack> {
    check_head(phi, head)?;
    let (c, n) = (phi.channels(), phi.len_pixels());
    let classes = head.num_classes() + 1;
    let pixels = phi.pixel_major();
    let mut d = Stack::zeros(classes, phi.height(), phi.width());
    for k in 0..classes {
        let w = head.weight(k);
        for (p, fp) in pixels.chunks_exact(c).enumerate() {
            d.data[k * n + p] = 1.0 + cosine(fp, w);
        }
    }
    Ok(d)
}

/// Confidence of the CRF label at each pixel. IGNORE pixels get 1 (they carry no loss).
pub fn confidence(d: &Stack, y_crf: &LabelMap, gamma: f64) -> Result<ConfidenceMap> {
    if y_crf.height() != d.height || y_crf.width() != d.width {
        return Err(Error::Shape("correlation and labels differ in resolution".into()));
    }
    if gamma.is_nan() || gamma < 1.0 {
        return Err(Error::Invalid(format!("gamma must be >= 1, got {gamma}")));
    }
    let data = y_crf
        .data()
        .iter()
        .enumerate()
        .map(|(p, &label)| {
            if label == IGNORE {
                return Ok(1.0);
            }
            let label = usize::from(label);
            if label >= d.planes {
                return Err(Error::Invalid(format!("label {label} has no correlation plane")));
            }
            let max = (0..d.planes).map(|k| d.at(k, p)).fold(f64::NEG_INFINITY, f64::max);
            let own = d.at(label, p);
            if max <= 0.0 || own >= max {
                Ok(1.0)
            } else {
                Ok((own / max).powf(gamma))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    ConfidenceMap::new(d.height, d.width, data)
}

/// Loss components for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossReport {
    pub ce: f64,
    pub wce: f64,
    pub total: f64,
    pub lambda: f64,
    /// `|S|`
    pub agree_pixels: usize,
    /// `|~S|`
    pub disagree_pixels: usize,
    /// `Σ σ` over `~S`.
    pub confidence_mass: f64,
}

fn check_labels(phi: &FeatureMap, fused: &FusedLabels, head: &ClassifierHead) -> Result<()> {
    for y in [&fused.crf, &fused.fused] {
        if y.height() != phi.height() || y.width() != phi.width() {
            return Err(Error::Shape(format!(
                "labels {}x{} vs features {}x{}",
                y.height(),
                y.width(),
                phi.height(),
                phi.width()
            )));
        }
        y.validate(head.num_classes())?;
    }
    Ok(())
}

/// Total loss `L_ce + λ·L_wce` and its gradient w.r.t. the head weights.
pub fn nal_loss_and_grad(
    phi: &FeatureMap,
    head: &ClassifierHead,
    fused: &FusedLabels,
    params: &NalParams,
) -> Result<(SegLossReport, Vec<f64>)> {
    params.validate()?;
    check_head(phi, head)?;
    check_labels(phi, fused, head)?;
    let c = phi.channels();
    let pixels = phi.pixel_major();
    let agree: Vec<usize> = (0..phi.len_pixels())
        .filter(|&p| fused.fused.data()[p] != IGNORE)
        .collect();
    let disagree: Vec<usize> = (0..phi.len_pixels())
        .filter(|&p| fused.fused.data()[p] == IGNORE && fused.crf.data()[p] != IGNORE)
        .collect();
    if agree.is_empty() && disagree.is_empty() {
        return Err(Error::Invalid("no labeled pixels in S or ~S".into()));
    }

    let mut grad = vec![0.0; head.weights().len()];
    let mut ce = 0.0;
    if !agree.is_empty() {
        let factor = 1.0 / agree.len() as f64;
        for &p in &agree {
            let x = &pixels[p * c..(p + 1) * c];
            ce += head.accumulate_ce(x, usize::from(fused.fused.data()[p]), factor, &mut grad);
        }
    }

    let mut wce = 0.0;
    let mut mass = 0.0;
    if !disagree.is_empty() {
        let d = correlation_d(phi, head)?;
        let sigma = confidence(&d, &fused.crf, params.gamma)?;
        mass = disagree.iter().map(|&p| sigma.data[p]).sum();
        if mass > 0.0 {
            let mut weighted = vec![0.0; grad.len()];
            for &p in &disagree {
                let x = &pixels[p * c..(p + 1) * c];
                let label = usize::from(fused.crf.data()[p]);
                wce += head.accumulate_ce(x, label, sigma.data[p] / mass, &mut weighted);
            }
            for (g, w) in grad.iter_mut().zip(&weighted) {
                *g += params.lambda * w;
            }
        }
    }

    let report = SegLossReport {
        ce,
        wce,
        total: ce + params.lambda * wce,
        lambda: params.lambda,
        agree_pixels: agree.len(),
        disagree_pixels: disagree.len(),
        confidence_mass: mass,
    };
    Ok((report, grad))
}

/// Replace the CRF label of each `~S` pixel, with probability `rate`, by a uniformly
/// drawn different class. Returns the number of flipped pixels.
pub fn inject_disagreement_noise(
    fused: &mut FusedLabels,
    rate: f64,
    num_classes: usize,
    rng: &mut impl Rng,
) -> usize {
    let mut flipped = 0;
    let n = fused.fused.data().len();
    for p in 0..n {
        let current = fused.crf.data()[p];
        if fused.fused.data()[p] != IGNORE || current == IGNORE {
            continue;
        }
        if rng.random::<f64>() < rate {
            let mut other = rng.random_range(0..num_classes as u8);
            if other >= current {
                other += 1;
            }
            fused.crf.data_mut()[p] = other;
            flipped += 1;
        }
    }
    flipped
}

/// Features and fused labels of one training image, at the same resolution.
#[derive(Debug, Clone)]
pub struct SegExample {
    pub name: String,
    pub phi: FeatureMap,
    pub labels: FusedLabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub wce: f64,
}

#[derive(Debug, Clone)]
pub struct SegTrainOutcome {
    pub head: ClassifierHead,
    pub epochs: Vec<EpochLog>,
}

/// Momentum SGD on the noise-aware loss; each step averages `batch_size` images.
pub fn sgd_train_seg_head(
    head: ClassifierHead,
    data: &[SegExample],
    params: &NalParams,
    cfg: &SgdConfig,
) -> Result<SegTrainOutcome> {
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no segmentation training images".into()));
    }
    let mut head = head;
    let mut opt = Momentum::new(head.weights().len(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut log = EpochLog {
            epoch,
            total: 0.0,
            ce: 0.0,
            wce: 0.0,
        };
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0; head.weights().len()];
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &data[i];
                let (report, g) = nal_loss_and_grad(&ex.phi, &head, &ex.labels, params)?;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += scale * b;
                }
                log.total += report.total;
                log.ce += report.ce;
                log.wce += report.wce;
            }
            opt.step(&mut head, &grad, lr);
        }
        let n = data.len() as f64;
        log.total /= n;
        log.ce /= n;
        log.wce /= n;
        log::debug!("seg epoch {epoch}: loss {:.6}", log.total);
        epochs.push(log);
    }
    Ok(SegTrainOutcome { head, epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clshead::HeadMode;
    use crate::pseudolabel::fuse;
    use proptest::prelude::*;

    fn head2(rows: &[[f64; 2]]) -> ClassifierHead {
        ClassifierHead::from_weights(
            rows.len() - 1,
            2,
            HeadMode::Cosine,
            15.0,
            rows.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    #[test]
    fn correlation_hand_values() {
        let h = head2(&[[1.0, 0.0], [0.0, 1.0]]);
        let phi = FeatureMap::from_pixels(1, 3, &[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 0.0]]).unwrap();
        let d = correlation_d(&phi, &h).unwrap();
        assert_eq!((d.at(0, 0), d.at(1, 0)), (2.0, 1.0));
        assert_eq!(d.at(1, 1), 2.0);
        assert_eq!(d.at(0, 2), 0.0);
        let zero = FeatureMap::from_pixels(1, 1, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(correlation_d(&zero, &h).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn confidence_values() {
        let d = Stack {
            planes: 3,
            height: 1,
            width: 3,
            data: vec![2.0, 0.5, 1.0, 1.0, 1.0, 1.0, 0.5, 0.25, 0.0],
        };
        let y = LabelMap::new(1, 3, vec![0, 0, 2]).unwrap();
        let s = confidence(&d, &y, 7.0).unwrap();
        assert_eq!(s.data[0], 1.0);
        assert_eq!(s.data[1], 0.5f64.powi(7));
        assert_eq!(s.data[1], 0.0078125);
        assert_eq!(s.data[2], 0.0);
        assert!(confidence(&d, &y, 0.5).is_err());
    }

    #[test]
    fn full_agreement_is_plain_ce() {
        let h = head2(&[[1.0, 0.2], [0.1, 1.0], [-1.0, 0.3]]);
        let phi = FeatureMap::from_pixels(1, 3, &[vec![1.0, 0.5], vec![0.2, 1.0], vec![-0.4, 0.1]]).unwrap();
        let y = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let fused = fuse(&y, &y).unwrap();
        let (report, grad) = nal_loss_and_grad(&phi, &h, &fused, &NalParams::default()).unwrap();
        let batch: Vec<_> = (0..3)
            .map(|p| crate::clshead::Sample {
                feature: phi.pixel(p),
                target: y.data()[p],
            })
            .collect();
        let (plain, plain_grad) = h.ce_loss_and_grad(&batch).unwrap();
        assert!((report.total - plain).abs() < 1e-12);
        assert_eq!(report.wce, 0.0);
        for (a, b) in grad.iter().zip(&plain_grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_confidence_gives_mean_ce_on_disagreement() {
        // head weights collinear with the CRF labels' own class → σ = 1 everywhere
        let h = head2(&[[1.0, 0.0], [0.0, 1.0]]);
        let phi = FeatureMap::from_pixels(1, 2, &[vec![1.0, 0.1], vec![0.2, 1.0]]).unwrap();
        let crf = LabelMap::new(1, 2, vec![0, 1]).unwrap();
        let ret = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        let fused = fuse(&crf, &ret).unwrap();
        let d = correlation_d(&phi, &h).unwrap();
        assert!(confidence(&d, &crf, 7.0).unwrap().data.iter().all(|&s| s == 1.0));
        let params = NalParams {
            gamma: 7.0,
            lambda: 0.5,
        };
        let (r, _) = nal_loss_and_grad(&phi, &h, &fused, &params).unwrap();
        let batch: Vec<_> = (0..2)
            .map(|p| crate::clshead::Sample {
                feature: phi.pixel(p),
                target: crf.data()[p],
            })
            .collect();
        let (plain, _) = h.ce_loss_and_grad(&batch).unwrap();
        assert!((r.wce - plain).abs() < 1e-12);
        assert_eq!(r.ce, 0.0);
        assert!((r.total - 0.5 * plain).abs() < 1e-12);
    }

    #[test]
    fn nothing_labeled_is_an_error() {
        let h = head2(&[[1.0, 0.0], [0.0, 1.0]]);
        let phi = FeatureMap::from_pixels(1, 1, &[vec![1.0, 0.0]]).unwrap();
        let y = LabelMap::filled(1, 1, IGNORE);
        let fused = fuse(&y, &y).unwrap();
        assert!(nal_loss_and_grad(&phi, &h, &fused, &NalParams::default()).is_err());
    }

    #[test]
    fn noise_injection_touches_only_disagreement() {
        let crf = LabelMap::new(1, 6, vec![0, 1, 2, 0, 1, 2]).unwrap();
        let ret = LabelMap::new(1, 6, vec![0, 1, 2, 1, 2, 0]).unwrap();
        let mut fused = fuse(&crf, &ret).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = inject_disagreement_noise(&mut fused, 1.0, 2, &mut rng);
        assert_eq!(n, 3);
        assert_eq!(&fused.crf.data()[..3], &[0, 1, 2]);
        for p in 3..6 {
            assert_ne!(fused.crf.data()[p], crf.data()[p]);
            assert!(fused.crf.data()[p] <= 2);
        }
    }

    proptest! {
        #[test]
        fn confidence_bounded_and_monotone_in_gamma(
            vals in prop::collection::vec(-1.0f32..1.0, 2 * 6),
            w in prop::collection::vec(-1.0f64..1.0, 3 * 2),
            labels in prop::collection::vec(0u8..3, 6),
        ) {
            let phi = FeatureMap::new(2, 2, 3, vals).unwrap();
            let h = ClassifierHead::from_weights(2, 2, HeadMode::Cosine, 15.0, w).unwrap();
            let y = LabelMap::new(2, 3, labels).unwrap();
            let d = correlation_d(&phi, &h).unwrap();
            let mut prev: Option<Vec<f64>> = None;
            for gamma in [1.0, 3.0, 7.0, 15.0] {
                let s = confidence(&d, &y, gamma).unwrap();
                for (p, &v) in s.data.iter().enumerate() {
                    prop_assert!((0.0..=1.0).contains(&v));
                    let max = (0..3).map(|k| d.at(k, p)).fold(f64::NEG_INFINITY, f64::max);
                    let own = d.at(usize::from(y.data()[p]), p);
                    prop_assert_eq!(v == 1.0, own >= max || (own / max).powf(gamma) == 1.0);
                }
                if let Some(prev) = &prev {
                    for (a, b) in s.data.iter().zip(prev) {
                        prop_assert!(a <= b);
                    }
                }
                prev = Some(s.data);
            }
        }
    }
}

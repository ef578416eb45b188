//! Prototype retrieval labels, fusion with the CRF labels, and the filling-rate report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::io::write_atomic;
use crate::linalg::cosine;
use crate::resample::bilinear;
use crate::types::{FeatureMap, LabelMap, Plane, IGNORE};

/// Mean feature per class, for classes present in the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub dim: usize,
    pub prototypes: BTreeMap<u8, Vec<f64>>,
}

impl PrototypeSet {
    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }
}

/// `y` must already be at feature resolution; IGNORE pixels are skipped.
pub fn extract_prototypes(f: &FeatureMap, y: &LabelMap) -> Result<PrototypeSet> {
    if y.height() != f.height() || y.width() != f.width() {
        return Err(Error::Shape(format!(
            "labels {}x{} vs features {}x{}",
            y.height(),
            y.width(),
            f.height(),
            f.width()
        )));
    }
    let c = f.channels();
    let pixels = f.pixel_major();
    let mut sums: BTreeMap<u8, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, &label) in y.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; c], 0));
        for (s, v) in entry.0.iter_mut().zip(&pixels[p * c..(p + 1) * c]) {
            *s += v;
        }
        entry.1 += 1;
    }
    let prototypes = sums
        .into_iter()
        .map(|(label, (sum, n))| (label, sum.into_iter().map(|s| s / n as f64).collect()))
        .collect();
    Ok(PrototypeSet { dim: c, prototypes })
}

/// Cosine correlation of every pixel with each prototype, at feature resolution.
pub fn correlation_maps(f: &FeatureMap, protos: &PrototypeSet) -> Result<Vec<(u8, Plane)>> {
    if protos.dim != f.channels() {
        return Err(Error::Shape(format!(
            "prototype dim {} vs feature channels {}",
            protos.dim,
            f.channels()
        )));
    }
    let c = f.channels();
    let pixels = f.pixel_major();
    Ok(protos
        .prototypes
        .iter()
        .map(|(&label, q)| {
            let data = pixels.chunks_exact(c).map(|fp| cosine(fp, q)).collect();
            (label, Plane::new(f.height(), f.width(), data).expect("sized"))
        })
        .collect())
}

/// Argmax over upsampled correlation maps; ties go to the lowest class id.
pub fn retrieval_labels(
    f: &FeatureMap,
    protos: &PrototypeSet,
    out_h: usize,
    out_w: usize,
) -> Result<LabelMap> {
    if protos.is_empty() {
        return Err(Error::Invalid("no prototypes to retrieve with".into()));
    }
    let maps: Vec<(u8, Plane)> = correlation_maps(f, protos)?
        .into_iter()
        .map(|(label, m)| (label, bilinear(&m, out_h, out_w)))
        .collect();
    let data = (0..out_h * out_w)
        .map(|p| {
            let mut best = &maps[0];
            for m in &maps[1..] {
                if m.1.data[p] > best.1.data[p] {
                    best = m;
                }
            }
            best.0
        })
        .collect();
    LabelMap::new(out_h, out_w, data)
}

/// The two pseudo labels and their agreement.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLabels {
    pub crf: LabelMap,
    pub ret: LabelMap,
    /// `crf` where both agree, IGNORE elsewhere.
    pub fused: LabelMap,
}

impl FusedLabels {
    /// Pixels in the agreement region.
    pub fn agreement(&self) -> Vec<bool> {
        self.fused.data().iter().map(|&v| v != IGNORE).collect()
    }

    pub fn agreement_count(&self) -> usize {
        self.fused.data().iter().filter(|&&v| v != IGNORE).count()
    }

    pub fn disagreement_count(&self) -> usize {
        self.fused.data().len() - self.agreement_count()
    }
}

pub fn fuse(crf: &LabelMap, ret: &LabelMap) -> Result<FusedLabels> {
    if !crf.same_shape(ret) {
        return Err(Error::Shape(format!(
            "Y_crf {}x{} vs Y_ret {}x{}",
            crf.height(),
            crf.width(),
            ret.height(),
            ret.width()
        )));
    }
    let data = crf
        .data()
        .iter()
        .zip(ret.data())
        .map(|(&a, &b)| if a == b { a } else { IGNORE })
        .collect();
    Ok(FusedLabels {
        crf: crf.clone(),
        ret: ret.clone(),
        fused: LabelMap::new(crf.height(), crf.width(), data)?,
    })
}

/// Fraction of each box's pixels labeled with the box class. IGNORE counts as a miss.
pub fn filling_rate(y: &LabelMap, boxes: &BoxSet) -> Result<Vec<f64>> {
    if boxes.width != y.width() || boxes.height != y.height() {
        return Err(Error::Shape(format!(
            "boxes are in a {}x{} frame, labels are {}x{}",
            boxes.height,
            boxes.width,
            y.height(),
            y.width()
        )));
    }
    Ok(boxes
        .boxes
        .iter()
        .map(|b| {
            let hits = b
                .pixels(y.width())
                .filter(|&p| y.data()[p] == b.class_id)
                .count();
            hits as f64 / b.area() as f64
        })
        .collect())
}

/// One line of the filling-rate report.
#[derive(Debug, Clone, PartialEq)]
pub struct FillingRow {
    pub image: String,
    pub class_id: u8,
    pub box_id: usize,
    pub rate: f64,
}

pub fn filling_rate_rows(image: &str, y: &LabelMap, boxes: &BoxSet) -> Result<Vec<FillingRow>> {
    Ok(filling_rate(y, boxes)?
        .into_iter()
        .zip(&boxes.boxes)
        .enumerate()
        .map(|(box_id, (rate, b))| FillingRow {
            image: image.to_string(),
            class_id: b.class_id,
            box_id,
            rate,
        })
        .collect())
}

pub fn write_filling_rate_csv(path: impl AsRef<Path>, rows: &[FillingRow]) -> Result<()> {
    let mut out = String::from("image,class,box_id,rate\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.6}", r.image, r.class_id, r.box_id, r.rate).expect("string write");
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    #[test]
    fn constant_features_give_constant_prototype() {
        let f = FeatureMap::from_pixels(2, 2, &vec![vec![0.5, -1.0]; 4]).unwrap();
        let y = LabelMap::filled(2, 2, 3);
        let p = extract_prototypes(&f, &y).unwrap();
        assert_eq!(p.prototypes.len(), 1);
        assert_eq!(p.prototypes[&3], vec![0.5, -1.0]);
    }

    #[test]
    fn prototype_hand_mean_and_missing_classes() {
        let f = FeatureMap::from_pixels(1, 3, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]]).unwrap();
        let y = LabelMap::new(1, 3, vec![2, 2, IGNORE]).unwrap();
        let p = extract_prototypes(&f, &y).unwrap();
        assert_eq!(p.prototypes[&2], vec![0.5, 0.5]);
        assert!(!p.prototypes.contains_key(&0));
        let all_ignored = LabelMap::filled(1, 3, IGNORE);
        assert!(extract_prototypes(&f, &all_ignored).unwrap().is_empty());
    }

    #[test]
    fn retrieval_hand_example() {
        // cos((2,1),(1,0)) = 2/√5 > cos((2,1),(0,1)) = 1/√5
        let f = FeatureMap::from_pixels(1, 1, &[vec![2.0, 1.0]]).unwrap();
        let protos = PrototypeSet {
            dim: 2,
            prototypes: [(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])].into_iter().collect(),
        };
        assert_eq!(retrieval_labels(&f, &protos, 1, 1).unwrap().data(), &[0]);
        let maps = correlation_maps(&f, &protos).unwrap();
        assert!((maps[0].1.data[0] - 2.0 / 5f64.sqrt()).abs() < 1e-12);
        assert!((maps[1].1.data[0] - 1.0 / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn retrieval_exact_match_and_ties() {
        let f = FeatureMap::from_pixels(1, 2, &[vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let protos = PrototypeSet {
            dim: 2,
            prototypes: [(1, vec![1.0, 0.0]), (4, vec![0.0, 1.0])].into_iter().collect(),
        };
        // zero feature ties at 0 → lowest class id
        assert_eq!(retrieval_labels(&f, &protos, 1, 2).unwrap().data(), &[4, 1]);
        let empty = PrototypeSet {
            dim: 2,
            prototypes: BTreeMap::new(),
        };
        assert!(retrieval_labels(&f, &empty, 1, 2).is_err());
    }

    #[test]
    fn fuse_cases() {
        let a = LabelMap::new(1, 4, vec![0, 1, 2, 1]).unwrap();
        let same = fuse(&a, &a).unwrap();
        assert_eq!(same.fused, a);
        assert_eq!(same.agreement_count(), 4);
        let b = LabelMap::new(1, 4, vec![1, 0, 1, 2]).unwrap();
        let none = fuse(&a, &b).unwrap();
        assert!(none.fused.data().iter().all(|&v| v == IGNORE));
        assert!(fuse(&a, &LabelMap::filled(2, 2, 0)).is_err());
    }

    #[test]
    fn checkerboard_agreement_count() {
        let (h, w) = (7, 9);
        let a = LabelMap::new(h, w, (0..h * w).map(|p| (p % 3) as u8).collect()).unwrap();
        let b = LabelMap::new(
            h,
            w,
            (0..h * w)
                .map(|p| if (p / w + p % w) % 2 == 0 { (p % 3) as u8 } else { 9 })
                .collect(),
        )
        .unwrap();
        let fused = fuse(&a, &b).unwrap();
        let brute = (0..h * w).filter(|&p| a.data()[p] == b.data()[p]).count();
        assert_eq!(fused.agreement_count(), brute);
        assert_eq!(fused.disagreement_count(), h * w - brute);
    }

    #[test]
    fn filling_rate_cases() {
        let boxes = BoxSet::new(4, 2, vec![BBox::new(1, 0, 0, 2, 2), BBox::new(2, 2, 0, 4, 2)]);
        let y = LabelMap::new(2, 4, vec![1, 1, 0, 2, 1, 1, IGNORE, 0]).unwrap();
        assert_eq!(filling_rate(&y, &boxes).unwrap(), vec![1.0, 0.25]);
        let bg = LabelMap::filled(2, 4, 0);
        assert_eq!(filling_rate(&bg, &boxes).unwrap(), vec![0.0, 0.0]);
        let half = LabelMap::new(2, 4, vec![1, 0, 0, 0, 1, 0, 0, 0]).unwrap();
        assert_eq!(filling_rate(&half, &boxes).unwrap()[0], 0.5);
    }

    proptest! {
        #[test]
        fn fused_is_crf_or_ignore(a in prop::collection::vec(0u8..4, 30), b in prop::collection::vec(0u8..4, 30)) {
            let a = LabelMap::new(5, 6, a).unwrap();
            let b = LabelMap::new(5, 6, b).unwrap();
            let f = fuse(&a, &b).unwrap();
            for p in 0..30 {
                let v = f.fused.data()[p];
                prop_assert!(v == a.data()[p] || v == IGNORE);
                prop_assert_eq!(v != IGNORE, a.data()[p] == b.data()[p]);
            }
        }

        #[test]
        fn retrieval_scale_invariant(
            vals in prop::collection::vec(-3.0f32..3.0, 3 * 12),
            alpha in 0.1f32..10.0,
            beta in 0.1f64..10.0,
        ) {
            let f = FeatureMap::new(3, 3, 4, vals).unwrap();
            let y = LabelMap::new(3, 4, (0..12).map(|p| (p % 3) as u8).collect()).unwrap();
            let protos = extract_prototypes(&f, &y).unwrap();
            let base = retrieval_labels(&f, &protos, 3, 4).unwrap();
            let mut scaled = protos.clone();
            if let Some(q) = scaled.prototypes.get_mut(&1) {
                q.iter_mut().for_each(|v| *v *= beta);
            }
            let f2 = f.scaled(alpha).unwrap();
            let again = retrieval_labels(&f2, &scaled, 3, 4).unwrap();
            // agreement except where two correlations tie to rounding
            let maps = correlation_maps(&f, &protos).unwrap();
            for p in 0..12 {
                let mut vals: Vec<f64> = maps.iter().map(|(_, m)| m.data[p]).collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals[0] - vals[1] > 1e-6 {
                    prop_assert_eq!(base.data()[p], again.data()[p]);
                }
            }
        }

        #[test]
        fn filling_rate_matches_counting(ys in prop::collection::vec(prop_oneof![0u8..3, Just(IGNORE)], 48)) {
            let y = LabelMap::new(6, 8, ys).unwrap();
            let boxes = BoxSet::new(8, 6, vec![BBox::new(1, 1, 1, 5, 4), BBox::new(2, 3, 0, 8, 6)]);
            let rates = filling_rate(&y, &boxes).unwrap();
            for (b, r) in boxes.boxes.iter().zip(rates) {
                let mut hit = 0;
                let mut total = 0;
                for yy in 0..6 {
                    for xx in 0..8 {
                        if b.contains(yy, xx) {
                            total += 1;
                            if y.get(yy, xx) == b.class_id {
                                hit += 1;
                            }
                        }
                    }
                }
                prop_assert_eq!(r, hit as f64 / total as f64);
            }
        }
    }
}

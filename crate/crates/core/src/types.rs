//! Dense maps shared by every stage of the pipeline.

use crate::error::{Error, Result};

/// Label value marking pixels that carry no supervision.
pub const IGNORE: u8 = 255;

/// Largest number of object classes a single-byte label map can hold.
pub const MAX_CLASSES: usize = 254;

/// Dense `C×H×W` feature tensor, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite feature value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Build from pixel-major vectors (`H·W` rows of `C` values).
    pub fn from_pixels(height: usize, width: usize, pixels: &[Vec<f64>]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} pixel vectors, got {}",
                height * width,
                pixels.len()
            )));
        }
        let channels = pixels.first().map_or(0, Vec::len);
        let mut data = vec![0f32; channels * height * width];
        for (p, v) in pixels.iter().enumerate() {
            if v.len() != channels {
                return Err(Error::Shape("ragged pixel vectors".into()));
            }
            for (c, &x) in v.iter().enumerate() {
                data[c * height * width + p] = x as f32;
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector at flat pixel index `p = y·W + x`, widened to f64.
    pub fn pixel(&self, p: usize) -> Vec<f64> {
        let plane = self.height * self.width;
        (0..self.channels)
            .map(|c| f64::from(self.data[c * plane + p]))
            .collect()
    }

    /// All pixel vectors, pixel-major: `out[p*C + c]`.
    pub fn pixel_major(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for c in 0..self.channels {
            for p in 0..plane {
                out[p * self.channels + c] = f64::from(self.data[c * plane + p]);
            }
        }
        out
    }

    pub fn scaled(&self, alpha: f32) -> Result<Self> {
        Self::new(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|v| v * alpha).collect(),
        )
    }
}

/// `H×W` map of class indices; [`IGNORE`] marks unreliable pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Reject any value in `(num_classes, IGNORE)`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let max = num_classes.min(MAX_CLASSES) as u8;
        match self
            .data
            .iter()
            .position(|&v| v > max && v != IGNORE)
        {
            Some(i) => Err(Error::LabelOutOfRange {
                offset: i as u64,
                value: self.data[i],
                max,
            }),
            None => Ok(()),
        }
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "rgb image {height}x{width} needs {} bytes, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, p: usize) -> [u8; 3] {
        [self.data[3 * p], self.data[3 * p + 1], self.data[3 * p + 2]]
    }
}

/// Real-valued `H×W` map (attention, CAM, confidence, correlation).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Background attention: per-pixel background likelihood in `[0, 1]`.
pub type AttentionMap = Plane;

/// Per-pixel label confidence in `(0, 1]`.
pub type ConfidenceMap = Plane;

/// Stack of `K` planes sharing one resolution, stored plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Stack {
    pub fn zeros(planes: usize, height: usize, width: usize) -> Self {
        Self {
            planes,
            height,
            width,
            data: vec![0.0; planes * height * width],
        }
    }

    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Invalid("empty plane list".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.height != h || p.width != w {
                return Err(Error::Shape("planes differ in resolution".into()));
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            planes: planes.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn plane_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn at(&self, k: usize, p: usize) -> f64 {
        self.data[k * self.height * self.width + p]
    }

    /// Per-pixel argmax over planes; ties go to the lowest index.
    pub fn argmax(&self) -> LabelMap {
        let n = self.height * self.width;
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.planes {
                    if self.at(k, p) > self.at(best, p) {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data: labels,
        }
    }
}

/// `(L+1)×H×W` per-class unary scores in `[0, 1]`; plane 0 is background.
pub type UnaryStack = Stack;

/// `(L+1)×H×W` mean-field marginals.
pub type MarginalStack = Stack;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_map_rejects_nan() {
        let err = FeatureMap::new(1, 1, 2, vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn feature_map_layout() {
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(f.pixel(0), vec![1.0, 3.0]);
        assert_eq!(f.pixel(1), vec![2.0, 4.0]);
        assert_eq!(f.pixel_major(), vec![1.0, 3.0, 2.0, 4.0]);
        let g = FeatureMap::from_pixels(1, 2, &[vec![1.0, 3.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn label_validation() {
        let y = LabelMap::new(1, 3, vec![0, 20, IGNORE]).unwrap();
        assert!(y.validate(20).is_ok());
        let y = LabelMap::new(1, 3, vec![0, 200, IGNORE]).unwrap();
        let err = y.validate(20).unwrap_err();
        assert!(err.to_string().contains("label out of range"), "{err}");
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let s = Stack {
            planes: 3,
            height: 1,
            width: 2,
            data: vec![0.2, 0.5, 0.7, 0.5, 0.7, 0.0],
        };
        assert_eq!(s.argmax().data(), &[1, 0]);
    }
}

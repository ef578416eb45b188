//! On-disk formats: `.btf` tensors, PGM label maps, PPM images and JSON box files.
//!
//! Tensor layout (little-endian):
//! - magic `BTF1` (4 bytes)
//! - rank: u32
//! - dims: rank × u32
//! - data: row-major f32
//!
//! Every writer goes through [`write_atomic`], so a crashed run never leaves a
//! half-written artifact behind.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::types::{FeatureMap, LabelMap, Plane, RgbImage, Stack};

pub const BTF_MAGIC: &[u8; 4] = b"BTF1";

/// A raw f32 tensor of any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.dims.len() + 4 * t.data.len());
    out.extend_from_slice(BTF_MAGIC);
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: (offset + 4) as u64,
            actual: bytes.len() as u64,
        })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != BTF_MAGIC {
        return Err(Error::format("<tensor>", 0, "bad magic, expected \"BTF1\""));
    }
    let rank = read_u32(bytes, 4)? as usize;
    let header = 8 + 4 * rank;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(bytes, 8 + 4 * i)? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("<tensor>", 8, "dimension product overflows"))?;
    let expected = header as u64 + 4 * count as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| e.at(path))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path, &encode_tensor(t))
}

impl From<&FeatureMap> for Tensor {
    fn from(f: &FeatureMap) -> Self {
        Tensor {
            dims: vec![f.channels(), f.height(), f.width()],
            data: f.data().to_vec(),
        }
    }
}

impl From<&Plane> for Tensor {
    fn from(p: &Plane) -> Self {
        Tensor {
            dims: vec![p.height, p.width],
            data: p.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl From<&Stack> for Tensor {
    fn from(s: &Stack) -> Self {
        Tensor {
            dims: vec![s.planes, s.height, s.width],
            data: s.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match t.dims[..] {
            [c, h, w] => FeatureMap::new(c, h, w, t.data),
            _ => Err(Error::Shape(format!(
                "feature map needs a rank-3 tensor, got dims {:?}",
                t.dims
            ))),
        }
    }
}

impl TryFrom<Tensor> for Stack {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match t.dims[..] {
            [k, h, w] => Ok(Stack {
                planes: k,
                height: h,
                width: w,
                data: t.data.into_iter().map(f64::from).collect(),
            }),
            _ => Err(Error::Shape(format!(
                "expected a rank-3 tensor, got dims {:?}",
                t.dims
            ))),
        }
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    FeatureMap::try_from(read_tensor(path)?).map_err(|e| match e {
        Error::Shape(m) | Error::Invalid(m) => Error::format(path, 0, m),
        other => other,
    })
}

pub fn write_features(path: impl AsRef<Path>, f: &FeatureMap) -> Result<()> {
    write_tensor(path, &Tensor::from(f))
}

/// Parsed netpbm header: magic, width, height, and the payload offset.
struct PnmHeader {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<PnmHeader> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            "<pnm>",
            0,
            format!("bad magic, expected \"{}\"", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("<pnm>", pos as u64, "expected a header integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("<pnm>", start as u64, "header integer too large"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("<pnm>", pos as u64, "missing whitespace after maxval"));
    }
    if fields[2] != 255 {
        return Err(Error::format(
            "<pnm>",
            pos as u64,
            format!("unsupported maxval {}, expected 255", fields[2]),
        ));
    }
    Ok(PnmHeader {
        width: fields[0],
        height: fields[1],
        payload: pos + 1,
    })
}

fn check_payload(bytes: &[u8], header: &PnmHeader, channels: usize) -> Result<()> {
    let expected = (header.payload + header.width * header.height * channels) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

pub fn encode_labels(y: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", y.width(), y.height()).into_bytes();
    out.extend_from_slice(y.data());
    out
}

/// Decode a PGM label map; with `num_classes` set, values above it (other than
/// IGNORE) are rejected with their file offset.
pub fn decode_labels(bytes: &[u8], num_classes: Option<usize>) -> Result<LabelMap> {
    let header = parse_pnm_header(bytes, b"P5")?;
    check_payload(bytes, &header, 1)?;
    let y = LabelMap::new(
        header.height,
        header.width,
        bytes[header.payload..].to_vec(),
    )?;
    if let Some(l) = num_classes {
        y.validate(l).map_err(|e| match e {
            Error::LabelOutOfRange { offset, value, max } => Error::LabelOutOfRange {
                offset: offset + header.payload as u64,
                value,
                max,
            },
            other => other,
        })?;
    }
    Ok(y)
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(&bytes, num_classes).map_err(|e| e.at(path))
}

pub fn write_labels(path: impl AsRef<Path>, y: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_labels(y))
}

pub fn encode_image(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_pnm_header(bytes, b"P6")?;
    check_payload(bytes, &header, 3)?;
    RgbImage::new(
        header.height,
        header.width,
        bytes[header.payload..].to_vec(),
    )
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| e.at(path))
}

pub fn write_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_image(img))
}

pub fn read_boxes(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<BoxSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let set: BoxSet = serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    set.validated(num_classes)
        .map_err(|e| Error::format(path, 0, e.to_string()))
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &BoxSet) -> Result<()> {
    write_json(path, boxes)
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Internal(format!("json encoding: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Write to a temporary sibling, then rename over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

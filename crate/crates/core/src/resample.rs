//! Resolution changes between the feature grid and the image grid.

use crate::types::{LabelMap, Plane};

/// Source coordinate and blend weight for one output index (half-pixel centers).
fn bilinear_taps(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear(plane: &Plane, out_h: usize, out_w: usize) -> Plane {
    if plane.height == out_h && plane.width == out_w {
        return plane.clone();
    }
    let ys: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, plane.height, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| bilinear_taps(x, plane.width, out_w)).collect();
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = plane.get(y0, x0) * (1.0 - wx) + plane.get(y0, x1) * wx;
            let bottom = plane.get(y1, x0) * (1.0 - wx) + plane.get(y1, x1) * wx;
            data.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    Plane {
        height: out_h,
        width: out_w,
        data,
    }
}

fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Nearest-neighbor resize of a label map (sampling at output pixel centers).
pub fn nearest_labels(y: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    if y.height() == out_h && y.width() == out_w {
        return y.clone();
    }
    let mut data = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = nearest_index(oy, y.height(), out_h);
        for ox in 0..out_w {
            data.push(y.get(sy, nearest_index(ox, y.width(), out_w)));
        }
    }
    LabelMap::new(out_h, out_w, data).expect("sized by construction")
}

//! Tensor-level image helpers (outside the autodiff tape): bilinear and
//! nearest resizing over the trailing two axes, shared by augmentation and
//! multi-scale inference. Both use the same half-pixel-center convention as
//! the tape op.

use crate::tape::kernels::resize_coords;
use crate::tensor::{Float, Tensor};

/// Bilinear resize of the last two axes; leading axes are treated as
/// channels. Same-size calls return a clone (bitwise identity).
pub fn resize_bilinear_hw<E: Float>(t: &Tensor<E>, oh: usize, ow: usize) -> Tensor<E> {
    let dims = t.dims();
    assert!(dims.len() >= 2, "resize needs rank >= 2");
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    let ch: usize = dims[..dims.len() - 2].iter().product();
    let ys: Vec<(usize, usize, f64)> = (0..oh).map(|i| resize_coords(i, h, oh)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|j| resize_coords(j, w, ow)).collect();
    let mut out_dims = dims.to_vec();
    let n = out_dims.len();
    out_dims[n - 2] = oh;
    out_dims[n - 1] = ow;
    let mut data = vec![E::ZERO; ch * oh * ow];
    for c in 0..ch {
        let src = &t.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut data[c * oh * ow..(c + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let v = src[y0 * w + x0].to_f64() * (1.0 - fy) * (1.0 - fx)
                    + src[y0 * w + x1].to_f64() * (1.0 - fy) * fx
                    + src[y1 * w + x0].to_f64() * fy * (1.0 - fx)
                    + src[y1 * w + x1].to_f64() * fy * fx;
                dst[i * ow + j] = E::from_f64(v);
            }
        }
    }
    Tensor::new(out_dims, data).expect("resize dims consistent")
}

/// Nearest-neighbor index for one axis under the half-pixel convention.
pub fn nearest_index(t: usize, in_len: usize, out_len: usize) -> usize {
    let (lo, hi, f) = resize_coords(t, in_len, out_len);
    if f < 0.5 {
        lo
    } else {
        hi
    }
}

/// Nearest-neighbor resize for label maps.
pub fn resize_nearest_labels(ids: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    if (h, w) == (oh, ow) {
        return ids.to_vec();
    }
    let ys: Vec<usize> = (0..oh).map(|i| nearest_index(i, h, oh)).collect();
    let xs: Vec<usize> = (0..ow).map(|j| nearest_index(j, w, ow)).collect();
    let mut out = vec![0u8; oh * ow];
    for (i, &y) in ys.iter().enumerate() {
        for (j, &x) in xs.iter().enumerate() {
            out[i * ow + j] = ids[y * w + x];
        }
    }
    out
}

/// Horizontal mirror of a label map.
pub fn hflip_labels(ids: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = ids.to_vec();
    for y in 0..h {
        out[y * w..(y + 1) * w].reverse();
    }
    out
}

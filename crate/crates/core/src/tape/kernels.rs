//! Raw numeric kernels shared by tape forward and backward passes.

use crate::tensor::Float;

/// C = op(A) * op(B) with op(A): [m,k], op(B): [k,n].
/// `ta`/`tb` flag that the stored layout is the transpose of the operand.
pub fn matmul_tt<E: Float>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    out: &mut [E],
) {
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            // A [m,k], B [k,n]; rows accumulate in f64 and round once
            let mut acc = vec![0.0f64; n];
            for i in 0..m {
                for v in acc.iter_mut() {
                    *v = 0.0;
                }
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    let av = aip.to_f64();
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in acc.iter_mut().zip(brow.iter()) {
                        *o += av * bv.to_f64();
                    }
                }
                for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
                    *o = E::from_f64(v);
                }
            }
        }
        (false, true) => {
            // A [m,k], B stored [n,k]: row-dot-row
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0f64;
                    for (&av, &bv) in arow.iter().zip(brow.iter()) {
                        s += av.to_f64() * bv.to_f64();
                    }
                    out[i * n + j] = E::from_f64(s);
                }
            }
        }
        (true, false) => {
            // A stored [k,m], B [k,n]
            let mut acc = vec![0.0f64; m * n];
            for p in 0..k {
                let arow = &a[p * m..(p + 1) * m];
                let brow = &b[p * n..(p + 1) * n];
                for (i, &api) in arow.iter().enumerate() {
                    let av = api.to_f64();
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut acc[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                        *o += av * bv.to_f64();
                    }
                }
            }
            for (o, &v) in out.iter_mut().zip(acc.iter()) {
                *o = E::from_f64(v);
            }
        }
        (true, true) => {
            // A stored [k,m], B stored [n,k]
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0f64;
                    for p in 0..k {
                        s += a[p * m + i].to_f64() * b[j * k + p].to_f64();
                    }
                    out[i * n + j] = E::from_f64(s);
                }
            }
        }
    }
}

pub fn conv2d_out_hw(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    (
        (h + 2 * padding - k) / stride + 1,
        (w + 2 * padding - k) / stride + 1,
    )
}

/// Unpack one sample-group's input patch matrix:
/// x_g is [cg, h, w]; col becomes [cg*k*k, oh*ow].
pub fn im2col<E: Float>(
    x_g: &[E],
    cg: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    col: &mut [E],
) {
    debug_assert_eq!(col.len(), cg * k * k * oh * ow);
    let ohw = oh * ow;
    for c in 0..cg {
        let xs = &x_g[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k * k + ky * k + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let base = row + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        continue; // col pre-zeroed
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        // SAFETY-free indexing: bounds hold by construction
                        unsafe {
                            *col.get_unchecked_mut(base + ox) =
                                *xs.get_unchecked(iy * w + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back into the input gradient.
pub fn col2im_add<E: Float>(
    col: &[E],
    cg: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    x_grad: &mut [E],
) {
    let ohw = oh * ow;
    for c in 0..cg {
        let xg = &mut x_grad[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k * k + ky * k + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let base = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy * w + ix as usize;
                        xg[idx] = E::from_f64(xg[idx].to_f64() + col[base + ox].to_f64());
                    }
                }
            }
        }
    }
}

/// Adaptive average pooling window along one axis:
/// cell `i` of `out_len` covers [floor(i*in/out), ceil((i+1)*in/out)).
pub fn pool_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = i * in_len / out_len;
    let hi = ((i + 1) * in_len + out_len - 1) / out_len;
    (lo, hi.min(in_len))
}

/// Half-pixel-center source coordinate for bilinear resize, clamped to the
/// valid range. Returns (low index, high index, fraction toward high).
pub fn resize_coords(t: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let mut s = (t as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
    if s < 0.0 {
        s = 0.0;
    }
    let max = (in_len - 1) as f64;
    if s > max {
        s = max;
    }
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

/// Tanh-approximation GELU constants.
pub const GELU_C0: f64 = 0.7978845608; // sqrt(2/pi)
pub const GELU_C1: f64 = 0.044715;

pub fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

pub fn gelu_dval(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

pub fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Wengert-tape reverse-mode autodiff over dense tensors.
//!
//! Every op records its inputs and enough saved state to replay the chain
//! rule in reverse. Nodes are appended in forward order, so reverse index
//! order is a valid topological order and backward visits each node once.

pub mod kernels;

mod grad;

pub use grad::GradStore;

use crate::error::{Error, Result};
use crate::tensor::{numel_of, strides_of, Float, Tensor};

use kernels::*;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) enum Op<E: Float> {
    Leaf,
    Add(Var, Var),
    Scale(Var, E),
    Hadamard(Var, Var),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    AdaptiveAvgPool {
        x: Var,
        out_hw: (usize, usize),
    },
    BilinearResize {
        x: Var,
        out_hw: (usize, usize),
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<E>,
        invstd: Vec<E>,
        train: bool,
    },
    Gelu(Var),
    Sigmoid(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    MeanAll(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        ignore: Option<usize>,
        probs: Vec<E>,
        n_valid: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<E>,
        probs: Vec<E>,
    },
    DropPath {
        x: Var,
        mask: Vec<E>,
    },
}

pub(crate) struct Node<E: Float> {
    pub dims: Vec<usize>,
    pub data: Vec<E>,
    pub needs_grad: bool,
    pub param: Option<usize>,
    pub op: Op<E>,
}

/// Recording tape. Consumed by [`Tape::backward`].
pub struct Tape<E: Float> {
    pub(crate) nodes: Vec<Node<E>>,
}

impl<E: Float> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Float> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].dims.clone(), self.nodes[v.0].data.clone())
            .expect("node dims consistent")
    }

    pub fn all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.data.iter().all(|v| v.is_finite_v()))
    }

    fn push(
        &mut self,
        dims: Vec<usize>,
        data: Vec<E>,
        needs_grad: bool,
        param: Option<usize>,
        op: Op<E>,
    ) -> Var {
        debug_assert_eq!(numel_of(&dims), data.len());
        self.nodes.push(Node {
            dims,
            data,
            needs_grad,
            param,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input: no gradient tracked.
    pub fn constant(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), false, None, Op::Leaf)
    }

    /// Differentiable leaf (gradient retrievable by this Var).
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), true, None, Op::Leaf)
    }

    /// Differentiable leaf tied to a parameter-store slot.
    pub fn param_leaf(&mut self, t: &Tensor<E>, param_id: usize) -> Var {
        self.push(
            t.dims().to_vec(),
            t.data().to_vec(),
            true,
            Some(param_id),
            Op::Leaf,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "add: dims {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let data: Vec<E> = self.data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| E::from_f64(x.to_f64() + y.to_f64()))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.dims(a).to_vec(), data, needs, None, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let data: Vec<E> = self.data(x)
            .iter()
            .map(|&v| E::from_f64(v.to_f64() * c.to_f64()))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(self.dims(x).to_vec(), data, needs, None, Op::Scale(x, c)))
    }

    /// Elementwise product of same-shape tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::Shape(format!(
                "hadamard: dims {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        let data: Vec<E> = self.data(a)
            .iter()
            .zip(self.data(b).iter())
            .map(|(&x, &y)| E::from_f64(x.to_f64() * y.to_f64()))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.dims(a).to_vec(), data, needs, None, Op::Hadamard(a, b)))
    }

    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_tt(a, b, false, false)
    }

    pub fn matmul_tt(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        let batched = da.len() == 3;
        if da.len() != db.len() || (da.len() != 2 && da.len() != 3) {
            return Err(Error::Shape(format!(
                "matmul: ranks must both be 2 or 3, got {:?} x {:?}",
                da, db
            )));
        }
        let off = if batched { 1 } else { 0 };
        if batched && da[0] != db[0] {
            return Err(Error::Shape(format!(
                "matmul: batch {} vs {}",
                da[0], db[0]
            )));
        }
        let (m, ka) = if ta {
            (da[off + 1], da[off])
        } else {
            (da[off], da[off + 1])
        };
        let (kb, n) = if tb {
            (db[off + 1], db[off])
        } else {
            (db[off], db[off + 1])
        };
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dims {} vs {} (a {:?}, b {:?}, ta={}, tb={})",
                ka, kb, da, db, ta, tb
            )));
        }
        let nb = if batched { da[0] } else { 1 };
        let mut data = vec![E::ZERO; nb * m * n];
        let (asz, bsz) = (ka * m, ka * n);
        for i in 0..nb {
            matmul_tt(
                &self.data(a)[i * asz..(i + 1) * asz],
                &self.data(b)[i * bsz..(i + 1) * bsz],
                m,
                ka,
                n,
                ta,
                tb,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        let dims = if batched { vec![nb, m, n] } else { vec![m, n] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(dims, data, needs, None, Op::Matmul { a, b, ta, tb }))
    }

    /// Batched matmul over rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.matmul_tt(a, b, ta, tb)
    }

    /// 2-D convolution, NCHW x [C_out, C_in/groups, k, k].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        if xd.len() != 4 || wd.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d: x {:?}, w {:?} must be rank 4",
                xd, wd
            )));
        }
        let (bsz, cin, h, wd_in) = (xd[0], xd[1], xd[2], xd[3]);
        let (cout, cin_g, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if kh != kw {
            return Err(Error::Shape(format!("conv2d: kernel must be square, got {kh}x{kw}")));
        }
        let k = kh;
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArg("conv2d: stride and groups must be >= 1".into()));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::Shape(format!(
                "conv2d: invalid group split cin={cin} cout={cout} groups={groups} w_cin={cin_g}"
            )));
        }
        if h + 2 * padding < k || wd_in + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} larger than padded input {h}x{wd_in} (pad {padding})"
            )));
        }
        if let Some(bv) = bias {
            if self.dims(bv) != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d: bias dims {:?}, expected [{cout}]",
                    self.dims(bv)
                )));
            }
        }
        let (oh, ow) = conv2d_out_hw(h, wd_in, k, stride, padding);
        let ohw = oh * ow;
        let cog = cout / groups;
        let mut data = vec![E::ZERO; bsz * cout * ohw];
        let mut col = vec![E::ZERO; cin_g * k * k * ohw];
        for b in 0..bsz {
            for g in 0..groups {
                for v in col.iter_mut() {
                    *v = E::ZERO;
                }
                let x_off = b * cin * h * wd_in + g * cin_g * h * wd_in;
                im2col(
                    &self.data(x)[x_off..x_off + cin_g * h * wd_in],
                    cin_g,
                    h,
                    wd_in,
                    k,
                    stride,
                    padding,
                    oh,
                    ow,
                    &mut col,
                );
                let w_off = g * cog * cin_g * k * k;
                let o_off = b * cout * ohw + g * cog * ohw;
                matmul_tt(
                    &self.data(w)[w_off..w_off + cog * cin_g * k * k],
                    &col,
                    cog,
                    cin_g * k * k,
                    ohw,
                    false,
                    false,
                    &mut data[o_off..o_off + cog * ohw],
                );
            }
            if let Some(bv) = bias {
                let bdata = self.data(bv);
                for c in 0..cout {
                    let bc = bdata[c].to_f64();
                    let o = b * cout * ohw + c * ohw;
                    for v in data[o..o + ohw].iter_mut() {
                        *v = E::from_f64(v.to_f64() + bc);
                    }
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|bv| self.needs(bv)).unwrap_or(false);
        Ok(self.push(
            vec![bsz, cout, oh, ow],
            data,
            needs,
            None,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
                groups,
            },
        ))
    }

    /// Adaptive average pooling to `out_hw`; cell (i,j) averages the window
    /// rows [floor(i*h/k), ceil((i+1)*h/k)) and analogous columns.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 {
            return Err(Error::Shape(format!("adaptive_avg_pool2d: x {:?} must be rank 4", xd)));
        }
        let (bsz, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (kh, kw) = out_hw;
        if h == 0 || w == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidArg("adaptive_avg_pool2d: sizes must be >= 1".into()));
        }
        let mut data = vec![E::ZERO; bsz * c * kh * kw];
        let xs = self.data(x);
        for bc in 0..bsz * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst_off = bc * kh * kw;
            for i in 0..kh {
                let (y0, y1) = pool_window(i, h, kh);
                for j in 0..kw {
                    let (x0, x1) = pool_window(j, w, kw);
                    let mut s = 0.0f64;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[y * w + xx].to_f64();
                        }
                    }
                    data[dst_off + i * kw + j] =
                        E::from_f64(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![bsz, c, kh, kw],
            data,
            needs,
            None,
            Op::AdaptiveAvgPool { x, out_hw },
        ))
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.len() != 4 {
            return Err(Error::Shape(format!("bilinear_resize: x {:?} must be rank 4", xd)));
        }
        let (bsz, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = out_hw;
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidArg("bilinear_resize: target must be >= 1".into()));
        }
        let mut data = vec![E::ZERO; bsz * c * oh * ow];
        let xs = self.data(x);
        // Precompute per-axis coordinates once.
        let ys: Vec<(usize, usize, f64)> = (0..oh).map(|t| resize_coords(t, h, oh)).collect();
        let xcs: Vec<(usize, usize, f64)> = (0..ow).map(|t| resize_coords(t, w, ow)).collect();
        for bc in 0..bsz * c {
            let src = &xs[bc * h * w..(bc + 1) * h * w];
            let dst = &mut data[bc * oh * ow..(bc + 1) * oh * ow];
            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xcs.iter().enumerate() {
                    let v00 = src[y0 * w + x0].to_f64();
                    let v01 = src[y0 * w + x1].to_f64();
                    let v10 = src[y1 * w + x0].to_f64();
                    let v11 = src[y1 * w + x1].to_f64();
                    let v = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                    dst[i * ow + j] = E::from_f64(v);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            vec![bsz, c, oh, ow],
            data,
            needs,
            None,
            Op::BilinearResize { x, out_hw },
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if axis >= xd.len() {
            return Err(Error::InvalidArg(format!(
                "softmax: axis {axis} out of range for dims {:?}",
                xd
            )));
        }
        let outer: usize = xd[..axis].iter().product();
        let len = xd[axis];
        let inner: usize = xd[axis + 1..].iter().product();
        let xs = self.data(x);
        let mut data = vec![E::ZERO; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(xs[base + l * inner].to_f64());
                }
                let mut sum = 0.0f64;
                for l in 0..len {
                    let e = (xs[base + l * inner].to_f64() - mx).exp();
                    data[base + l * inner] = E::from_f64(e);
                    sum += e;
                }
                for l in 0..len {
                    data[base + l * inner] =
                        E::from_f64(data[base + l * inner].to_f64() / sum);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(xd, data, needs, None, Op::Softmax { x, axis }))
    }

    /// Training-mode batch norm. Normalizes with batch statistics and returns
    /// the biased batch mean/variance so the caller can update running stats.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<E>, Vec<E>)> {
        let xd = self.dims(x).to_vec();
        let c = self.check_bn_dims(&xd, gamma, beta)?;
        let (bsz, h, w) = (xd[0], xd[2], xd[3]);
        let n = bsz * h * w;
        if n < 2 {
            return Err(Error::InvalidArg(format!(
                "batch_norm: training needs >= 2 elements per channel, got {n}"
            )));
        }
        let xs = self.data(x);
        let mut mean = vec![E::ZERO; c];
        let mut var = vec![E::ZERO; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for b in 0..bsz {
                let o = (b * c + ch) * h * w;
                for v in &xs[o..o + h * w] {
                    s += v.to_f64();
                }
            }
            let m = s / n as f64;
            let mut sv = 0.0f64;
            for b in 0..bsz {
                let o = (b * c + ch) * h * w;
                for v in &xs[o..o + h * w] {
                    let d = v.to_f64() - m;
                    sv += d * d;
                }
            }
            mean[ch] = E::from_f64(m);
            var[ch] = E::from_f64(sv / n as f64);
        }
        let invstd: Vec<E> = var
            .iter()
            .map(|v| E::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
            .collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &invstd, true)?;
        Ok((out, mean, var))
    }

    /// Eval-mode batch norm using stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[E],
        running_var: &[E],
        eps: f64,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let c = self.check_bn_dims(&xd, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: running stats len {} / {}, expected {c}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let mean = running_mean.to_vec();
        let invstd: Vec<E> = running_var
            .iter()
            .map(|v| E::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
            .collect();
        self.bn_apply(x, gamma, beta, &mean, &invstd, false)
    }

    fn check_bn_dims(&self, xd: &[usize], gamma: Var, beta: Var) -> Result<usize> {
        if xd.len() != 4 {
            return Err(Error::Shape(format!("batch_norm: x {:?} must be rank 4", xd)));
        }
        let c = xd[1];
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma {:?} / beta {:?}, expected [{c}]",
                self.dims(gamma),
                self.dims(beta)
            )));
        }
        Ok(c)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[E],
        invstd: &[E],
        train: bool,
    ) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        let (bsz, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let xs = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut data = vec![E::ZERO; xs.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let o = (b * c + ch) * h * w;
                let (m, is) = (mean[ch].to_f64(), invstd[ch].to_f64());
                let (gc, bc) = (g[ch].to_f64(), bt[ch].to_f64());
                for idx in o..o + h * w {
                    data[idx] = E::from_f64((xs[idx].to_f64() - m) * is * gc + bc);
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            xd,
            data,
            needs,
            None,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd: invstd.to_vec(),
                train,
            },
        ))
    }

    /// GELU, tanh approximation: 0.5 x (1 + tanh(c0 (x + c1 x^3))) with
    /// c0 = 0.7978845608, c1 = 0.044715.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<E> = self.data(x)
            .iter()
            .map(|&v| E::from_f64(gelu_val(v.to_f64())))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(self.dims(x).to_vec(), data, needs, None, Op::Gelu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data: Vec<E> = self.data(x)
            .iter()
            .map(|&v| E::from_f64(sigmoid_val(v.to_f64())))
            .collect();
        let needs = self.needs(x);
        Ok(self.push(self.dims(x).to_vec(), data, needs, None, Op::Sigmoid(x)))
    }

    /// Concatenate along `axis`; all other dims must agree. Output takes the
    /// inputs in argument order.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::InvalidArg("concat: no inputs".into()));
        }
        let d0 = self.dims(inputs[0]).to_vec();
        if axis >= d0.len() {
            return Err(Error::InvalidArg(format!(
                "concat: axis {axis} out of range for dims {:?}",
                d0
            )));
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let d = self.dims(v);
            if d.len() != d0.len()
                || d.iter()
                    .zip(d0.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat: dims {:?} incompatible with {:?} along axis {axis}",
                    d, d0
                )));
            }
            axis_total += d[axis];
        }
        let mut out_dims = d0.clone();
        out_dims[axis] = axis_total;
        let outer: usize = d0[..axis].iter().product();
        let inner: usize = d0[axis + 1..].iter().product();
        let mut data = vec![E::ZERO; numel_of(&out_dims)];
        let row = axis_total * inner;
        let mut off = 0usize;
        for &v in inputs {
            let len = self.dims(v)[axis];
            let src = self.data(v);
            for o in 0..outer {
                let s = o * len * inner;
                let d = o * row + off * inner;
                data[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            off += len;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            out_dims,
            data,
            needs,
            None,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Channel concatenation for NCHW maps.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 1)
    }

    pub fn reshape(&mut self, x: Var, dims: Vec<usize>) -> Result<Var> {
        if numel_of(&dims) != self.data(x).len() {
            return Err(Error::Shape(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.dims(x),
                dims
            )));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(dims, data, needs, None, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if perm.len() != xd.len() {
            return Err(Error::InvalidArg(format!(
                "permute: perm {:?} rank mismatch with {:?}",
                perm, xd
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::InvalidArg(format!("permute: invalid perm {:?}", perm)));
            }
            seen[p] = true;
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| xd[p]).collect();
        let data = permute_data(self.data(x), &xd, perm);
        let needs = self.needs(x);
        Ok(self.push(
            out_dims,
            data,
            needs,
            None,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(Error::Shape("mean_all: empty tensor".into()));
        }
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(x);
        Ok(self.push(
            vec![],
            vec![E::from_f64(s / n as f64)],
            needs,
            None,
            Op::MeanAll(x),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        let needs = self.needs(x);
        Ok(self.push(vec![], vec![E::from_f64(s)], needs, None, Op::SumAll(x)))
    }

    /// Smoothed cross-entropy, mean over non-ignored positions:
    /// (1-eps) * (-log p_y) + (eps/C) * sum_c (-log p_c).
    /// Logits are [B,C] with targets of length B, or [B,C,h,w] with targets
    /// laid out [B,h,w] row-major.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        ignore: Option<usize>,
    ) -> Result<Var> {
        let ld = self.dims(logits).to_vec();
        let (bsz, c, spatial) = match ld.len() {
            2 => (ld[0], ld[1], 1usize),
            4 => (ld[0], ld[1], ld[2] * ld[3]),
            _ => {
                return Err(Error::Shape(format!(
                    "cross_entropy: logits {:?} must be [B,C] or [B,C,h,w]",
                    ld
                )))
            }
        };
        if targets.len() != bsz * spatial {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {} positions",
                targets.len(),
                bsz * spatial
            )));
        }
        for &t in targets {
            if t >= c && Some(t) != ignore {
                return Err(Error::InvalidArg(format!(
                    "cross_entropy: target {t} out of range for {c} classes"
                )));
            }
        }
        let xs = self.data(logits);
        let mut probs = vec![E::ZERO; xs.len()];
        let mut total = 0.0f64;
        let mut n_valid = 0usize;
        for b in 0..bsz {
            for s in 0..spatial {
                let t = targets[b * spatial + s];
                let base = b * c * spatial + s;
                let mut mx = f64::NEG_INFINITY;
                for cc in 0..c {
                    mx = mx.max(xs[base + cc * spatial].to_f64());
                }
                let mut sum = 0.0f64;
                for cc in 0..c {
                    sum += (xs[base + cc * spatial].to_f64() - mx).exp();
                }
                let logsum = sum.ln() + mx;
                for cc in 0..c {
                    probs[base + cc * spatial] =
                        E::from_f64((xs[base + cc * spatial].to_f64() - logsum).exp());
                }
                if Some(t) == ignore {
                    continue;
                }
                n_valid += 1;
                let logp_y = xs[base + t * spatial].to_f64() - logsum;
                let mut sum_logp = 0.0f64;
                for cc in 0..c {
                    sum_logp += xs[base + cc * spatial].to_f64() - logsum;
                }
                total += -(1.0 - smoothing) * logp_y - smoothing / c as f64 * sum_logp;
            }
        }
        if n_valid == 0 {
            return Err(Error::InvalidArg(
                "cross_entropy: all positions ignored".into(),
            ));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![],
            vec![E::from_f64(total / n_valid as f64)],
            needs,
            None,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                ignore,
                probs,
                n_valid,
            },
        ))
    }

    /// Mean binary cross-entropy on logits (numerically stable form).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<E>) -> Result<Var> {
        if self.dims(logits) != targets.dims() {
            return Err(Error::Shape(format!(
                "bce_with_logits: logits {:?} vs targets {:?}",
                self.dims(logits),
                targets.dims()
            )));
        }
        let xs = self.data(logits);
        let n = xs.len();
        let mut probs = vec![E::ZERO; n];
        let mut total = 0.0f64;
        for (i, (&z, &y)) in xs.iter().zip(targets.data().iter()).enumerate() {
            let (z, y) = (z.to_f64(), y.to_f64());
            probs[i] = E::from_f64(sigmoid_val(z));
            total += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![],
            vec![E::from_f64(total / n as f64)],
            needs,
            None,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
        ))
    }

    /// Per-sample stochastic-depth mask: y[b, ...] = x[b, ...] * mask[b].
    /// The mask already folds in the survival rescaling.
    pub fn drop_path_mask(&mut self, x: Var, mask: Vec<E>) -> Result<Var> {
        let xd = self.dims(x).to_vec();
        if xd.is_empty() || mask.len() != xd[0] {
            return Err(Error::Shape(format!(
                "drop_path: mask len {} vs batch {:?}",
                mask.len(),
                xd.first()
            )));
        }
        let per = self.data(x).len() / xd[0];
        let mut data = vec![E::ZERO; self.data(x).len()];
        for b in 0..xd[0] {
            let m = mask[b].to_f64();
            for i in 0..per {
                data[b * per + i] = E::from_f64(self.data(x)[b * per + i].to_f64() * m);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(xd, data, needs, None, Op::DropPath { x, mask }))
    }
}

pub(crate) fn permute_data<E: Float>(src: &[E], dims: &[usize], perm: &[usize]) -> Vec<E> {
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let in_strides = strides_of(dims);
    let out_strides = strides_of(&out_dims);
    let n = src.len();
    let mut out = vec![src[0]; n];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src_idx = 0usize;
        for ax in 0..out_dims.len() {
            let coord = rem / out_strides[ax];
            rem %= out_strides[ax];
            src_idx += coord * in_strides[perm[ax]];
        }
        *slot = src[src_idx];
    }
    out
}

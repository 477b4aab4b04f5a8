//! Reverse pass: walks the tape once in reverse index order (a valid
//! topological order by construction) and accumulates vector-Jacobian
//! products. Gradient accumulation order is fixed, so results are
//! deterministic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::kernels::*;
use super::{permute_data, Op, Tape, Var};

/// Gradients produced by [`Tape::backward`]. Only leaf nodes retain their
/// gradient; interior activation gradients are freed as the pass proceeds.
pub struct GradStore<E: Float> {
    leaf: Vec<Option<Tensor<E>>>,
    by_param: HashMap<usize, Tensor<E>>,
}

impl<E: Float> GradStore<E> {
    /// Gradient of a leaf var, if it received one.
    pub fn of(&self, v: Var) -> Option<&Tensor<E>> {
        self.leaf.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter-store slot; zeros mean the parameter was
    /// unused by the loss.
    pub fn of_param(&self, param_id: usize) -> Option<&Tensor<E>> {
        self.by_param.get(&param_id)
    }

    /// Gradient for a parameter, materializing zeros for unused parameters.
    pub fn param_or_zeros(&self, param_id: usize, dims: &[usize]) -> Tensor<E> {
        match self.by_param.get(&param_id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(dims),
        }
    }
}

fn slot<'a, E: Float>(
    grads: &'a mut [Option<Vec<E>>],
    idx: usize,
    numel: usize,
) -> &'a mut [E] {
    grads[idx]
        .get_or_insert_with(|| vec![E::ZERO; numel])
        .as_mut_slice()
}

#[inline]
fn addv<E: Float>(dst: &mut [E], src: &[E]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = E::from_f64(d.to_f64() + s.to_f64());
    }
}

impl<E: Float> Tape<E> {
    /// Run the reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<GradStore<E>> {
        {
            let node = &self.nodes[loss.0];
            if node.data.len() != 1 {
                return Err(Error::Shape(format!(
                    "backward: loss must be scalar, got dims {:?}",
                    node.dims
                )));
            }
            if !node.data[0].is_finite_v() {
                return Err(Error::NonFinite("loss".into()));
            }
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::ONE]);

        for idx in (0..=loss.0).rev() {
            if !nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(nodes[idx].op, Op::Leaf) {
                continue; // retained as output
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            let needs = |v: Var| nodes[v.0].needs_grad;
            let numel = |v: Var| nodes[v.0].data.len();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(*a) {
                        addv(slot(&mut grads, a.0, numel(*a)), &g);
                    }
                    if needs(*b) {
                        addv(slot(&mut grads, b.0, numel(*b)), &g);
                    }
                }
                Op::Scale(x, c) => {
                    if needs(*x) {
                        let cs = c.to_f64();
                        let dst = slot(&mut grads, x.0, numel(*x));
                        for (d, gv) in dst.iter_mut().zip(g.iter()) {
                            *d = E::from_f64(d.to_f64() + gv.to_f64() * cs);
                        }
                    }
                }
                Op::Hadamard(a, b) => {
                    if needs(*a) {
                        let bd = &nodes[b.0].data;
                        let dst = slot(&mut grads, a.0, numel(*a));
                        for i in 0..dst.len() {
                            dst[i] =
                                E::from_f64(dst[i].to_f64() + g[i].to_f64() * bd[i].to_f64());
                        }
                    }
                    if needs(*b) {
                        let ad = &nodes[a.0].data;
                        let dst = slot(&mut grads, b.0, numel(*b));
                        for i in 0..dst.len() {
                            dst[i] =
                                E::from_f64(dst[i].to_f64() + g[i].to_f64() * ad[i].to_f64());
                        }
                    }
                }
                Op::Matmul { a, b, ta, tb } => {
                    let (da, db) = (&nodes[a.0].dims, &nodes[b.0].dims);
                    let batched = da.len() == 3;
                    let off = usize::from(batched);
                    let (m, k) = if *ta {
                        (da[off + 1], da[off])
                    } else {
                        (da[off], da[off + 1])
                    };
                    let n = if *tb { db[off] } else { db[off + 1] };
                    let nb = if batched { da[0] } else { 1 };
                    let (asz, bsz, gsz) = (m * k, k * n, m * n);
                    let adata = &nodes[a.0].data;
                    let bdata = &nodes[b.0].data;
                    if needs(*a) {
                        let mut scratch = vec![E::ZERO; asz];
                        for i in 0..nb {
                            let gs = &g[i * gsz..(i + 1) * gsz];
                            let bs = &bdata[i * bsz..(i + 1) * bsz];
                            match (*ta, *tb) {
                                (false, false) => {
                                    matmul_tt(gs, bs, m, n, k, false, true, &mut scratch)
                                }
                                (false, true) => {
                                    matmul_tt(gs, bs, m, n, k, false, false, &mut scratch)
                                }
                                (true, false) => {
                                    matmul_tt(bs, gs, k, n, m, false, true, &mut scratch)
                                }
                                (true, true) => {
                                    matmul_tt(bs, gs, k, n, m, true, true, &mut scratch)
                                }
                            }
                            addv(
                                &mut slot(&mut grads, a.0, nb * asz)[i * asz..(i + 1) * asz],
                                &scratch,
                            );
                        }
                    }
                    if needs(*b) {
                        let mut scratch = vec![E::ZERO; bsz];
                        for i in 0..nb {
                            let gs = &g[i * gsz..(i + 1) * gsz];
                            let as_ = &adata[i * asz..(i + 1) * asz];
                            match (*ta, *tb) {
                                (false, false) => {
                                    matmul_tt(as_, gs, k, m, n, true, false, &mut scratch)
                                }
                                (false, true) => {
                                    matmul_tt(gs, as_, n, m, k, true, false, &mut scratch)
                                }
                                (true, false) => {
                                    matmul_tt(as_, gs, k, m, n, false, false, &mut scratch)
                                }
                                (true, true) => {
                                    matmul_tt(gs, as_, n, m, k, true, true, &mut scratch)
                                }
                            }
                            addv(
                                &mut slot(&mut grads, b.0, nb * bsz)[i * bsz..(i + 1) * bsz],
                                &scratch,
                            );
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    stride,
                    padding,
                    groups,
                } => {
                    let xd = &nodes[x.0].dims;
                    let wd = &nodes[w.0].dims;
                    let (bn, cin, h, win) = (xd[0], xd[1], xd[2], xd[3]);
                    let (cout, cin_g, k) = (wd[0], wd[1], wd[2]);
                    let (oh, ow) = conv2d_out_hw(h, win, k, *stride, *padding);
                    let ohw = oh * ow;
                    let cog = cout / groups;
                    let xdata = &nodes[x.0].data;
                    let wdata = &nodes[w.0].data;
                    if let Some(bv) = bias {
                        if needs(*bv) {
                            let dst = slot(&mut grads, bv.0, cout);
                            for b in 0..bn {
                                for c in 0..cout {
                                    let o = (b * cout + c) * ohw;
                                    let mut s = 0.0f64;
                                    for gv in &g[o..o + ohw] {
                                        s += gv.to_f64();
                                    }
                                    dst[c] = E::from_f64(dst[c].to_f64() + s);
                                }
                            }
                        }
                    }
                    let need_x = needs(*x);
                    let need_w = needs(*w);
                    if need_x || need_w {
                        let mut col = vec![E::ZERO; cin_g * k * k * ohw];
                        let mut wscratch = vec![E::ZERO; cog * cin_g * k * k];
                        let mut colgrad = vec![E::ZERO; cin_g * k * k * ohw];
                        for b in 0..bn {
                            for gi in 0..*groups {
                                let g_off = b * cout * ohw + gi * cog * ohw;
                                let gs = &g[g_off..g_off + cog * ohw];
                                if need_w {
                                    for v in col.iter_mut() {
                                        *v = E::ZERO;
                                    }
                                    let x_off = b * cin * h * win + gi * cin_g * h * win;
                                    im2col(
                                        &xdata[x_off..x_off + cin_g * h * win],
                                        cin_g,
                                        h,
                                        win,
                                        k,
                                        *stride,
                                        *padding,
                                        oh,
                                        ow,
                                        &mut col,
                                    );
                                    matmul_tt(
                                        gs,
                                        &col,
                                        cog,
                                        ohw,
                                        cin_g * k * k,
                                        false,
                                        true,
                                        &mut wscratch,
                                    );
                                    let w_off = gi * cog * cin_g * k * k;
                                    addv(
                                        &mut slot(&mut grads, w.0, cout * cin_g * k * k)
                                            [w_off..w_off + cog * cin_g * k * k],
                                        &wscratch,
                                    );
                                }
                                if need_x {
                                    let w_off = gi * cog * cin_g * k * k;
                                    matmul_tt(
                                        &wdata[w_off..w_off + cog * cin_g * k * k],
                                        gs,
                                        cin_g * k * k,
                                        cog,
                                        ohw,
                                        true,
                                        false,
                                        &mut colgrad,
                                    );
                                    let x_off = b * cin * h * win + gi * cin_g * h * win;
                                    col2im_add(
                                        &colgrad,
                                        cin_g,
                                        h,
                                        win,
                                        k,
                                        *stride,
                                        *padding,
                                        oh,
                                        ow,
                                        &mut slot(&mut grads, x.0, bn * cin * h * win)
                                            [x_off..x_off + cin_g * h * win],
                                    );
                                }
                            }
                        }
                    }
                }
                Op::AdaptiveAvgPool { x, out_hw } => {
                    if needs(*x) {
                        let xd = &nodes[x.0].dims;
                        let (bc, h, w) = (xd[0] * xd[1], xd[2], xd[3]);
                        let (kh, kw) = *out_hw;
                        let dst = slot(&mut grads, x.0, bc * h * w);
                        for n in 0..bc {
                            for i in 0..kh {
                                let (y0, y1) = pool_window(i, h, kh);
                                for j in 0..kw {
                                    let (x0, x1) = pool_window(j, w, kw);
                                    let gv = g[n * kh * kw + i * kw + j].to_f64()
                                        / ((y1 - y0) * (x1 - x0)) as f64;
                                    for y in y0..y1 {
                                        for xx in x0..x1 {
                                            let o = n * h * w + y * w + xx;
                                            dst[o] = E::from_f64(dst[o].to_f64() + gv);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BilinearResize { x, out_hw } => {
                    if needs(*x) {
                        let xd = &nodes[x.0].dims;
                        let (bc, h, w) = (xd[0] * xd[1], xd[2], xd[3]);
                        let (oh, ow) = *out_hw;
                        let ys: Vec<(usize, usize, f64)> =
                            (0..oh).map(|t| resize_coords(t, h, oh)).collect();
                        let xcs: Vec<(usize, usize, f64)> =
                            (0..ow).map(|t| resize_coords(t, w, ow)).collect();
                        let dst = slot(&mut grads, x.0, bc * h * w);
                        for n in 0..bc {
                            let gofs = n * oh * ow;
                            let xofs = n * h * w;
                            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                                for (j, &(x0, x1, fx)) in xcs.iter().enumerate() {
                                    let gv = g[gofs + i * ow + j].to_f64();
                                    let mut put = |yy: usize, xx: usize, wgt: f64| {
                                        let o = xofs + yy * w + xx;
                                        dst[o] = E::from_f64(dst[o].to_f64() + gv * wgt);
                                    };
                                    put(y0, x0, (1.0 - fy) * (1.0 - fx));
                                    put(y0, x1, (1.0 - fy) * fx);
                                    put(y1, x0, fy * (1.0 - fx));
                                    put(y1, x1, fy * fx);
                                }
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if needs(*x) {
                        let dims = &node.dims;
                        let outer: usize = dims[..*axis].iter().product();
                        let len = dims[*axis];
                        let inner: usize = dims[*axis + 1..].iter().product();
                        let s = &node.data;
                        let dst = slot(&mut grads, x.0, s.len());
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = 0.0f64;
                                for l in 0..len {
                                    let idx2 = base + l * inner;
                                    dot += g[idx2].to_f64() * s[idx2].to_f64();
                                }
                                for l in 0..len {
                                    let idx2 = base + l * inner;
                                    dst[idx2] = E::from_f64(
                                        dst[idx2].to_f64()
                                            + s[idx2].to_f64() * (g[idx2].to_f64() - dot),
                                    );
                                }
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    invstd,
                    train,
                } => {
                    let xd = &nodes[x.0].dims;
                    let (bn, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
                    let n = (bn * h * w) as f64;
                    let xdata = &nodes[x.0].data;
                    let gdata = &nodes[gamma.0].data;
                    // Per-channel reductions of g and g*xhat.
                    let mut sum_g = vec![0.0f64; c];
                    let mut sum_gx = vec![0.0f64; c];
                    for b in 0..bn {
                        for ch in 0..c {
                            let o = (b * c + ch) * h * w;
                            let (m, is) = (mean[ch].to_f64(), invstd[ch].to_f64());
                            let mut sg = 0.0;
                            let mut sgx = 0.0;
                            for i in o..o + h * w {
                                let gv = g[i].to_f64();
                                sg += gv;
                                sgx += gv * (xdata[i].to_f64() - m) * is;
                            }
                            sum_g[ch] += sg;
                            sum_gx[ch] += sgx;
                        }
                    }
                    if needs(*beta) {
                        let dst = slot(&mut grads, beta.0, c);
                        for ch in 0..c {
                            dst[ch] = E::from_f64(dst[ch].to_f64() + sum_g[ch]);
                        }
                    }
                    if needs(*gamma) {
                        let dst = slot(&mut grads, gamma.0, c);
                        for ch in 0..c {
                            dst[ch] = E::from_f64(dst[ch].to_f64() + sum_gx[ch]);
                        }
                    }
                    if needs(*x) {
                        let dst = slot(&mut grads, x.0, xdata.len());
                        for b in 0..bn {
                            for ch in 0..c {
                                let o = (b * c + ch) * h * w;
                                let (m, is) = (mean[ch].to_f64(), invstd[ch].to_f64());
                                let gc = gdata[ch].to_f64();
                                if *train {
                                    let (sg, sgx) = (sum_g[ch] / n, sum_gx[ch] / n);
                                    for i in o..o + h * w {
                                        let xhat = (xdata[i].to_f64() - m) * is;
                                        let d = gc * is * (g[i].to_f64() - sg - xhat * sgx);
                                        dst[i] = E::from_f64(dst[i].to_f64() + d);
                                    }
                                } else {
                                    for i in o..o + h * w {
                                        dst[i] = E::from_f64(
                                            dst[i].to_f64() + g[i].to_f64() * gc * is,
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    if needs(*x) {
                        let xdata = &nodes[x.0].data;
                        let dst = slot(&mut grads, x.0, xdata.len());
                        for i in 0..dst.len() {
                            dst[i] = E::from_f64(
                                dst[i].to_f64() + g[i].to_f64() * gelu_dval(xdata[i].to_f64()),
                            );
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if needs(*x) {
                        let s = &node.data;
                        let dst = slot(&mut grads, x.0, s.len());
                        for i in 0..dst.len() {
                            let sv = s[i].to_f64();
                            dst[i] = E::from_f64(
                                dst[i].to_f64() + g[i].to_f64() * sv * (1.0 - sv),
                            );
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let out_dims = &node.dims;
                    let outer: usize = out_dims[..*axis].iter().product();
                    let inner: usize = out_dims[*axis + 1..].iter().product();
                    let row = out_dims[*axis] * inner;
                    let mut off = 0usize;
                    for &v in inputs {
                        let len = nodes[v.0].dims[*axis];
                        if needs(v) {
                            let dst = slot(&mut grads, v.0, numel(v));
                            for o in 0..outer {
                                let s = o * row + off * inner;
                                addv(
                                    &mut dst[o * len * inner..(o + 1) * len * inner],
                                    &g[s..s + len * inner],
                                );
                            }
                        }
                        off += len;
                    }
                }
                Op::Reshape(x) => {
                    if needs(*x) {
                        addv(slot(&mut grads, x.0, numel(*x)), &g);
                    }
                }
                Op::Permute { x, perm } => {
                    if needs(*x) {
                        let mut inv = vec![0usize; perm.len()];
                        for (i, &p) in perm.iter().enumerate() {
                            inv[p] = i;
                        }
                        let back = permute_data(&g, &node.dims, &inv);
                        addv(slot(&mut grads, x.0, numel(*x)), &back);
                    }
                }
                Op::MeanAll(x) => {
                    if needs(*x) {
                        let n = numel(*x) as f64;
                        let gv = g[0].to_f64() / n;
                        let dst = slot(&mut grads, x.0, numel(*x));
                        for d in dst.iter_mut() {
                            *d = E::from_f64(d.to_f64() + gv);
                        }
                    }
                }
                Op::SumAll(x) => {
                    if needs(*x) {
                        let gv = g[0].to_f64();
                        let dst = slot(&mut grads, x.0, numel(*x));
                        for d in dst.iter_mut() {
                            *d = E::from_f64(d.to_f64() + gv);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                    ignore,
                    probs,
                    n_valid,
                } => {
                    if needs(*logits) {
                        let ld = &nodes[logits.0].dims;
                        let (bsz, c, spatial) = if ld.len() == 2 {
                            (ld[0], ld[1], 1usize)
                        } else {
                            (ld[0], ld[1], ld[2] * ld[3])
                        };
                        let scale = g[0].to_f64() / *n_valid as f64;
                        let dst = slot(&mut grads, logits.0, probs.len());
                        for b in 0..bsz {
                            for s in 0..spatial {
                                let t = targets[b * spatial + s];
                                if Some(t) == *ignore {
                                    continue;
                                }
                                let base = b * c * spatial + s;
                                for cc in 0..c {
                                    let idx2 = base + cc * spatial;
                                    let tgt = if cc == t { 1.0 - smoothing } else { 0.0 }
                                        + smoothing / c as f64;
                                    dst[idx2] = E::from_f64(
                                        dst[idx2].to_f64()
                                            + scale * (probs[idx2].to_f64() - tgt),
                                    );
                                }
                            }
                        }
                    }
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    probs,
                } => {
                    if needs(*logits) {
                        let scale = g[0].to_f64() / probs.len() as f64;
                        let dst = slot(&mut grads, logits.0, probs.len());
                        for i in 0..dst.len() {
                            dst[i] = E::from_f64(
                                dst[i].to_f64()
                                    + scale * (probs[i].to_f64() - targets[i].to_f64()),
                            );
                        }
                    }
                }
                Op::DropPath { x, mask } => {
                    if needs(*x) {
                        let per = numel(*x) / mask.len();
                        let dst = slot(&mut grads, x.0, numel(*x));
                        for (b, m) in mask.iter().enumerate() {
                            let mv = m.to_f64();
                            for i in 0..per {
                                let o = b * per + i;
                                dst[o] = E::from_f64(dst[o].to_f64() + g[o].to_f64() * mv);
                            }
                        }
                    }
                }
            }
        }

        // Collect leaf gradients; fold param leaves into a per-param map.
        let mut leaf: Vec<Option<Tensor<E>>> = (0..nodes.len()).map(|_| None).collect();
        let mut by_param: HashMap<usize, Tensor<E>> = HashMap::new();
        for (idx, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gv) = grads[idx].take() else { continue };
            let t = Tensor::new(node.dims.clone(), gv).expect("grad dims consistent");
            if let Some(pid) = node.param {
                match by_param.get_mut(&pid) {
                    Some(acc) => {
                        let mut merged = acc.data().to_vec();
                        addv(&mut merged, t.data());
                        *acc = Tensor::new(acc.dims().to_vec(), merged).unwrap();
                    }
                    None => {
                        by_param.insert(pid, t.clone());
                    }
                }
            }
            leaf[idx] = Some(t);
        }
        Ok(GradStore { leaf, by_param })
    }
}

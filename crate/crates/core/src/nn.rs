//! Layer-level building blocks shared by the encoder, the heads and the
//! decoder: a forward context tying a tape to the parameter store, plus the
//! small weight structs (1x1/kxk convolutions, batch norm).

use crate::error::Result;
use crate::params::{init_trunc_normal, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Float, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything a module forward needs: the recording tape, the parameter
/// store (mutable for batch-norm running statistics), the train/eval mode
/// and an rng for stochastic depth.
pub struct Forward<'a, E: Float> {
    pub tape: &'a mut Tape<E>,
    pub store: &'a mut ParamStore<E>,
    pub mode: Mode,
    pub rng: &'a mut Rng,
}

impl<'a, E: Float> Forward<'a, E> {
    pub fn new(
        tape: &'a mut Tape<E>,
        store: &'a mut ParamStore<E>,
        mode: Mode,
        rng: &'a mut Rng,
    ) -> Self {
        Forward {
            tape,
            store,
            mode,
            rng,
        }
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Register a parameter as a differentiable leaf (or a constant when the
    /// parameter is frozen).
    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.tensor(id).clone();
        if self.store.is_trainable(id) {
            self.tape.param_leaf(&t, id.index())
        } else {
            self.tape.constant(&t)
        }
    }

    pub fn input(&mut self, t: &Tensor<E>) -> Var {
        self.tape.constant(t)
    }

    /// Convolution + bias from a weight struct.
    pub fn conv(&mut self, x: Var, w: &ConvW, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let wv = self.param(w.weight);
        let bv = self.param(w.bias);
        self.tape.conv2d(x, wv, Some(bv), stride, padding, groups)
    }

    /// Pointwise (1x1) convolution: the per-pixel linear map used everywhere.
    pub fn linear(&mut self, x: Var, w: &ConvW) -> Result<Var> {
        self.conv(x, w, 1, 0, 1)
    }

    /// Batch norm with running-stat bookkeeping in train mode.
    pub fn batch_norm(&mut self, x: Var, bn: &BnW) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        if self.train() {
            let (out, mean, var) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let xd = self.tape.dims(x);
            let n = (xd[0] * xd[2] * xd[3]) as f64;
            let unbias = n / (n - 1.0);
            let rm = self.store.tensor_mut(bn.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(mean.iter()) {
                *r = E::from_f64((1.0 - BN_MOMENTUM) * r.to_f64() + BN_MOMENTUM * m.to_f64());
            }
            let rv = self.store.tensor_mut(bn.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(var.iter()) {
                *r = E::from_f64(
                    (1.0 - BN_MOMENTUM) * r.to_f64() + BN_MOMENTUM * v.to_f64() * unbias,
                );
            }
            Ok(out)
        } else {
            let mean = self.store.tensor(bn.running_mean).data().to_vec();
            let var = self.store.tensor(bn.running_var).data().to_vec();
            self.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }

    /// Residual branch with per-sample stochastic depth. `rate` is the drop
    /// probability; survivors are rescaled by 1/keep. rate >= 1 drops the
    /// branch for every sample.
    pub fn drop_path(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train() || rate <= 0.0 {
            return Ok(x);
        }
        let b = self.tape.dims(x)[0];
        let mask: Vec<E> = if rate >= 1.0 {
            vec![E::ZERO; b]
        } else {
            let keep = 1.0 - rate;
            (0..b)
                .map(|_| {
                    if self.rng.bernoulli(keep) {
                        E::from_f64(1.0 / keep)
                    } else {
                        E::ZERO
                    }
                })
                .collect()
        };
        self.tape.drop_path_mask(x, mask)
    }
}

/// Convolution weight + bias handles.
#[derive(Clone, Debug)]
pub struct ConvW {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_channels: usize,
}

/// Batch-norm parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BnW {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Conv + BN pair (stems, downsamplers, decoder fusion).
#[derive(Clone, Debug)]
pub struct ConvBnW {
    pub conv: ConvW,
    pub bn: BnW,
}

pub fn conv_w<E: Float>(
    store: &mut ParamStore<E>,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
    std: f64,
) -> Result<ConvW> {
    let weight = store.add_param(
        format!("{name}.weight"),
        init_trunc_normal(&[cout, cin / groups, k, k], std, rng)?,
    );
    let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(&[cout]));
    Ok(ConvW {
        weight,
        bias,
        out_channels: cout,
    })
}

/// 1x1 convolution weights (a per-pixel linear layer).
pub fn linear_w<E: Float>(
    store: &mut ParamStore<E>,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    std: f64,
) -> Result<ConvW> {
    conv_w(store, rng, name, cin, cout, 1, 1, std)
}

pub fn bn_w<E: Float>(store: &mut ParamStore<E>, name: &str, c: usize) -> BnW {
    BnW {
        gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&[c], E::ONE)),
        beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&[c])),
        running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
        running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], E::ONE)),
    }
}

pub fn conv_bn_w<E: Float>(
    store: &mut ParamStore<E>,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    std: f64,
) -> Result<ConvBnW> {
    Ok(ConvBnW {
        conv: conv_w(store, rng, &format!("{name}.conv"), cin, cout, k, 1, std)?,
        bn: bn_w(store, &format!("{name}.bn"), cout),
    })
}

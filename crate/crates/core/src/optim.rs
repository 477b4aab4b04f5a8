//! AdamW with decoupled weight decay, plus the learning-rate schedules.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::GradStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamWCfg {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWCfg {
    fn default() -> Self {
        AdamWCfg {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct AdamW<E: Float> {
    cfg: AdamWCfg,
    m: Vec<Option<Tensor<E>>>,
    v: Vec<Option<Tensor<E>>>,
    step: u64,
}

impl<E: Float> AdamW<E> {
    pub fn new(cfg: AdamWCfg) -> Self {
        AdamW {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }

    fn ensure_len(&mut self, n: usize) {
        if self.m.len() < n {
            self.m.resize_with(n, || None);
            self.v.resize_with(n, || None);
        }
    }

    /// One optimizer step. Weight decay is decoupled: p <- p - lr*wd*p is
    /// applied separately from the bias-corrected moment update.
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &GradStore<E>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.ensure_len(store.len());
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) {
                continue;
            }
            let dims = store.tensor(id).dims().to_vec();
            let g = grads.param_or_zeros(id.index(), &dims);
            if !g.is_all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}'",
                    store.name(id)
                )));
            }
            let i = id.index();
            if self.m[i].is_none() {
                self.m[i] = Some(Tensor::zeros(&dims));
                self.v[i] = Some(Tensor::zeros(&dims));
            }
            let m = self.m[i].as_mut().unwrap().data_mut();
            let v = self.v[i].as_mut().unwrap().data_mut();
            let p = store.tensor_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].to_f64();
                let mut pj = p[j].to_f64();
                pj -= lr * weight_decay * pj;
                let mj = b1 * m[j].to_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64() + (1.0 - b2) * gj * gj;
                m[j] = E::from_f64(mj);
                v[j] = E::from_f64(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                pj -= lr * mhat / (vhat.sqrt() + eps);
                p[j] = E::from_f64(pj);
            }
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, keyed by the owning parameter.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<E>, &Tensor<E>)> {
        match (self.m.get(id.index()), self.v.get(id.index())) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<E>, v: Tensor<E>) {
        self.ensure_len(id.index() + 1);
        self.m[id.index()] = Some(m);
        self.v[id.index()] = Some(v);
    }
}

/// Learning-rate schedules: linear-warmup cosine decay (pretraining) and
/// poly decay (finetuning).
#[derive(Clone, Copy, Debug)]
pub enum Schedule {
    CosineWarmup {
        base_lr: f64,
        warmup_steps: u64,
        total_steps: u64,
    },
    Poly {
        base_lr: f64,
        total_steps: u64,
        power: f64,
    },
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match *self {
            Schedule::CosineWarmup {
                base_lr,
                warmup_steps,
                total_steps,
            } => {
                if step > total_steps {
                    return Err(Error::InvalidArg(format!(
                        "lr_at: step {step} > total {total_steps}"
                    )));
                }
                if step < warmup_steps {
                    return Ok(base_lr * step as f64 / warmup_steps as f64);
                }
                let span = (total_steps - warmup_steps).max(1);
                let t = (step - warmup_steps) as f64 / span as f64;
                Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
            Schedule::Poly {
                base_lr,
                total_steps,
                power,
            } => {
                if step > total_steps {
                    return Err(Error::InvalidArg(format!(
                        "lr_at: step {step} > total {total_steps}"
                    )));
                }
                Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
            }
        }
    }
}

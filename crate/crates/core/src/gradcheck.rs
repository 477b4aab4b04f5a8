//! Central-difference gradient checking. Runs in f64; the tolerance story
//! (1e-6 per primitive, 1e-5 whole-model) depends on that precision.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scalar-valued function of several tensors, rebuilt on a fresh tape for
/// every evaluation.
pub type ScalarFn<'f> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'f;

/// Relative error between an autodiff gradient and a central difference:
/// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
pub fn rel_err(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / (1e-8f64).max(g_ad.abs() + g_fd.abs())
}

fn eval(f: &ScalarFn, xs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.dims(loss).iter().product::<usize>() != 1 {
        return Err(Error::Shape("grad_check: f must be scalar-valued".into()));
    }
    Ok(tape.data(loss)[0])
}

/// Checks d f / d xs against central differences with step `h`.
///
/// Probes every coordinate of tensors up to `probe_cap` elements, and a
/// random subset of `probe_cap` coordinates (at least 64 across the call)
/// of larger ones. Returns the max relative error over probed coordinates.
pub fn grad_check(
    f: &ScalarFn,
    xs: &[Tensor<f64>],
    h: f64,
    probe_cap: usize,
    rng: &mut Rng,
) -> Result<f64> {
    // Determinism guard: two evaluations at the base point must agree.
    let base = eval(f, xs)?;
    let again = eval(f, xs)?;
    if base != again {
        return Err(Error::InvalidArg(format!(
            "grad_check: f is non-deterministic ({base} vs {again})"
        )));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(xs.iter())
        .map(|(v, x)| {
            grads
                .of(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.dims()))
        })
        .collect();

    let cap = probe_cap.max(1);
    let mut worst = 0.0f64;
    let mut xs_mut: Vec<Tensor<f64>> = xs.to_vec();
    for ti in 0..xs.len() {
        let n = xs[ti].numel();
        let coords: Vec<usize> = if n <= cap {
            (0..n).collect()
        } else {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < cap {
                set.insert(rng.below(n));
            }
            set.into_iter().collect()
        };
        for c in coords {
            let orig = xs_mut[ti].data()[c];
            xs_mut[ti].data_mut()[c] = orig + h;
            let fp = eval(f, &xs_mut)?;
            xs_mut[ti].data_mut()[c] = orig - h;
            let fm = eval(f, &xs_mut)?;
            xs_mut[ti].data_mut()[c] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let e = rel_err(analytic[ti].data()[c], fd);
            if e > worst {
                worst = e;
            }
        }
    }
    Ok(worst)
}

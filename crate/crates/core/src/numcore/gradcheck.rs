use alloc::vec::Vec;

use super::params::{Graph, ParamId, ParamStore, Trainable};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{contract, Result};

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(contract("gradient check requires a scalar-valued function"));
    }
    Ok(t.data()[0])
}

fn rel_err(fd: f64, ad: f64) -> f64 {
    (fd - ad).abs() / 1.0f64.max(fd.abs()).max(ad.abs())
}

/// Central-difference check of the tape gradient of `f` at `x`.
///
/// Returns the max over coordinates of
/// `|g_fd - g_ad| / max(1, |g_fd|, |g_ad|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, xs| f(t, xs[0]), core::slice::from_ref(x), eps)
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(contract("eps must be positive"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let ad = grads.wrt(&tape, v);
        for j in 0..xs[ti].len() {
            let orig = xs[ti].data()[j];
            probe[ti].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * eps), ad.data()[j]));
        }
    }
    Ok(worst)
}

/// Gradient check of a model loss with respect to the given parameters.
///
/// `max_coords` bounds the number of coordinates probed per tensor
/// (evenly strided) so large tensors stay affordable.
pub fn grad_check_params<F>(
    store: &ParamStore,
    params: &[ParamId],
    eps: f64,
    max_coords: Option<usize>,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(contract("eps must be positive"));
    }
    let trainable = Trainable::none(store).with(params.iter().copied());
    let mut g = Graph::training(store, &trainable);
    let out = f(&mut g)?;
    scalar(&g.tape, out)?;
    let grads = g.tape.backward(out)?;
    let ad: Vec<(ParamId, Tensor)> = g.param_grads(&grads);
    let lookup = |id: ParamId| ad.iter().find(|(i, _)| *i == id).map(|(_, t)| t);
    let eval = |s: &ParamStore| -> Result<f64> {
        // Training-mode graph so batch statistics match the analytic pass.
        let tr = Trainable::none(s);
        let mut gt = Graph::training(s, &tr);
        let out = f(&mut gt)?;
        scalar(&gt.tape, out)
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in params {
        let n = store.get(id).len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        let zero = Tensor::zeros(store.get(id).shape().to_vec());
        let adg = lookup(id).unwrap_or(&zero);
        for j in (0..n).step_by(stride) {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[j] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * eps), adg.data()[j]));
        }
    }
    Ok(worst)
}

//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The numeric side never touches [`Tape::backward`]; it only evaluates the
//! forward closure at perturbed points.

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)` with norms taken over the whole vector.
/// The floor keeps gradients that vanish identically (an attention key bias,
/// say) from turning finite-difference round-off into a large ratio.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

fn eval<G>(inputs: &[Tensor<f64>], f: &G) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Relative error of the analytic gradient for each input of `f`.
pub fn check_inputs<G>(inputs: &[Tensor<f64>], h: f64, f: G) -> Result<Vec<f64>>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].numel());
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut probe = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0;
            *slot = (up - down) / (2.0 * h);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Per-parameter outcome of [`check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
}

/// Compares parameter gradients of `loss` against central differences on
/// up to `max_coords` evenly spaced coordinates per parameter. Gradient
/// accumulators in `store` are reset.
pub fn check_params<G>(
    store: &mut ParamStore<f64>,
    h: f64,
    max_coords: usize,
    loss: G,
) -> Result<Vec<ParamCheck>>
where
    G: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    let grads = tape.backward(out)?;
    grads.accumulate_into(store);
    drop(tape);

    let value_of = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let o = loss(&mut t, s)?;
        Ok(t.value(o).item())
    };

    let mut report = Vec::new();
    for pi in 0..store.len() {
        let id = ParamId(pi);
        if !store.get(id).trainable {
            continue;
        }
        let n = store.value(id).numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let analytic: Vec<f64> = coords.iter().map(|&j| store.grad(id)[j]).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let x0 = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = x0 + h;
            let up = value_of(store)?;
            store.get_mut(id).value.data_mut()[j] = x0 - h;
            let down = value_of(store)?;
            store.get_mut(id).value.data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        report.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords: coords.len(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    store.zero_grad();
    Ok(report)
}

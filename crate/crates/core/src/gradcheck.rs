//! Central finite-difference gradient checking.
//!
//! Used by the test suites to compare every analytic backward rule against
//! numerical derivatives of the forward pass alone.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Number of scalar coordinates that were perturbed.
    pub checked: usize,
}

/// Denominator floor for the relative error; keeps near-zero gradients from
/// turning round-off into a large relative error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Check the gradient of the scalar produced by `f` with respect to every
/// element of every tensor in `inputs`, using step `h`.
///
/// `f` receives a fresh tape and one leaf per input (in order) and must return
/// a scalar. It must be deterministic.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_subset(inputs, h, usize::MAX, f)
}

/// As [`check`], probing at most `per_input` evenly spaced coordinates of each input.
pub fn check_subset<F>(inputs: &[Tensor<f64>], h: f64, per_input: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.len();
        let step = n.div_ceil(per_input.min(n).max(1));
        for i in (0..n).step_by(step.max(1)) {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic[ti].data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}

/// Check the parameter gradient of the mean batch loss of `model` on `batch`,
/// probing at most `per_param` coordinates of every parameter tensor.
pub fn check_model(
    model: &mut crate::model::SiameseModel<f64>,
    batch: &[&crate::dataset::TrainPair<f64>],
    h: f64,
    per_param: usize,
) -> Result<GradCheck> {
    use crate::train::{batch_grads, batch_loss_value};
    let (_, grads) = batch_grads(model, batch)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in model.store().ids().collect::<Vec<_>>() {
        let n = model.store().get(id).len();
        let step = n.div_ceil(per_param.min(n).max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = model.store().get(id).data()[i];
            model.store_mut().get_mut(id).data_mut()[i] = orig + h;
            let plus = batch_loss_value(model, batch)?;
            model.store_mut().get_mut(id).data_mut()[i] = orig - h;
            let minus = batch_loss_value(model, batch)?;
            model.store_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}

/// Check the parameter gradient of the scalar built by `f` on a graph over `store`.
pub fn check_store<F>(store: &mut crate::params::ParamStore<f64>, h: f64, per_param: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut crate::params::Graph<'_, f64>) -> Result<Var>,
{
    use crate::params::Graph;
    let grads = {
        let mut g = Graph::new(store, true);
        let out = f(&mut g)?;
        g.backward_params(out, Tensor::ones(&[1]))?
    };
    let eval = |store: &crate::params::ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store, false);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let step = n.div_ceil(per_param.min(n).max(1)).max(1);
        for i in (0..n).step_by(step) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel_err(analytic, (plus - minus) / (2.0 * h)));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}

//! Finite-difference verification of reverse-mode gradients.
//!
//! Relative error per element is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`;
//! the floor keeps exact zeros from turning float noise into huge ratios.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the worst element lives, e.g. `conv3_1.weight[17]`.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = err;
            self.worst = what();
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::config("grad_check: graph output must be a scalar"));
    }
    Ok(t.item())
}

/// Compares the gradient of a scalar-valued graph with respect to `input`
/// against central differences, returning the maximum relative error.
pub fn grad_check<F>(mut build: F, input: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let y = build(&mut g, x)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);

    let eval = |build: &mut F, t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let y = build(&mut g, x)?;
        scalar_of(&g, y)
    };

    let mut report = GradCheckReport::default();
    for i in 0..input.numel() {
        let mut plus = input.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = input.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(&mut build, plus)? - eval(&mut build, minus)?) / (2.0 * epsilon);
        report.record(|| format!("input[{i}]"), analytic[i], numeric);
    }
    Ok(report.max_rel_error)
}

/// Gradient check over the trainable parameters of `store`. At most
/// `per_param` evenly spaced elements of each tensor are perturbed.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    mut build: F,
    epsilon: f64,
    per_param: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let y = build(&mut g, store)?;
    scalar_of(&g, y)?;
    g.backward(y)?.accumulate_into(store);

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let numel = store.tensor(id).numel();
        let analytic = store
            .tensor(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        let step = numel.div_ceil(per_param.max(1)).max(1);
        for i in (0..numel).step_by(step) {
            let original = store.tensor(id).data()[i];
            let mut at = |value: f64, store: &mut ParamStore<f64>| -> Result<f64> {
                store.get_mut(id).tensor.data_mut()[i] = value;
                let mut g = Graph::new();
                let y = build(&mut g, store)?;
                scalar_of(&g, y)
            };
            let plus = at(original + epsilon, store)?;
            let minus = at(original - epsilon, store)?;
            store.get_mut(id).tensor.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let name = &store.get(id).name;
            report.record(|| format!("{name}[{i}]"), analytic[i], numeric);
        }
    }
    store.zero_grads();
    Ok(report)
}

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step used when callers have no reason to pick another.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every entry of every tensor in `params`.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// one-element loss node.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let loss = f(&mut g, &vars)?;
        let mut grads = g.backward(loss)?;
        vars.iter().map(|&v| grads.take(v).expect("leaf gradient")).collect()
    };

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "grad_check probe" });
        }
        Ok(value)
    };

    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for p in 0..params.len() {
        for i in 0..params[p].numel() {
            let original = params[p].data()[i];
            probe[p].data_mut()[i] = original + step;
            let plus = eval(&probe)?;
            probe[p].data_mut()[i] = original - step;
            let minus = eval(&probe)?;
            probe[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[p].data()[i];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((p, i));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: max_rel, worst, entries_checked: checked, passed: max_rel < tolerance })
}

//! Gradient verification against central finite differences.

use std::collections::BTreeMap;
use std::fmt;

use super::graph::{Graph, NodeId};
use super::tensor::{ParamStore, Tensor};
use super::NumResult;

/// Relative-error floor: differences below this absolute scale are compared
/// against the floor instead, so near-zero gradients with finite-difference
/// noise of ~1e-11 do not produce spurious failures.
const REL_ERR_FLOOR: f64 = 1e-6;

/// One analytic/numeric disagreement.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pass: bool,
    pub tol: f64,
    pub step: f64,
    /// Number of parameter values compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// The worst-offending parameter value, present whenever `checked > 0`.
    pub worst: Option<GradMismatch>,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(
            f,
            "grad check {verdict}: max_rel_err={:.3e} over {} values (tol {:.1e}, step {:.1e})",
            self.max_rel_err, self.checked, self.tol, self.step
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst at {}[{}]: analytic={:.9e} numeric={:.9e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` w.r.t. every parameter value.
///
/// `f` must be a deterministic function of the store contents.
pub fn fd_gradients<F>(
    mut f: F,
    store: &mut ParamStore,
    step: f64,
) -> NumResult<BTreeMap<String, Tensor>>
where
    F: FnMut(&ParamStore) -> NumResult<f64>,
{
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = store.get(&name)?.len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(&name)?.values()[i];
            store.get_mut(&name)?.values_mut()[i] = orig + step;
            let plus = f(store)?;
            store.get_mut(&name)?.values_mut()[i] = orig - step;
            let minus = f(store)?;
            store.get_mut(&name)?.values_mut()[i] = orig;
            grad[i] = (plus - minus) / (2.0 * step);
        }
        let shape = store.get(&name)?.shape().to_vec();
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// Compares analytic gradients against a numeric estimate.
pub fn compare_gradients(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
    tol: f64,
    step: f64,
) -> GradCheckReport {
    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (name, a) in analytic {
        let Some(n) = numeric.get(name) else { continue };
        for (i, (&av, &nv)) in a.values().iter().zip(n.values()).enumerate() {
            let rel = (av - nv).abs() / av.abs().max(nv.abs()).max(REL_ERR_FLOOR);
            checked += 1;
            if rel >= max_rel_err {
                max_rel_err = rel;
                worst = Some(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: av,
                    numeric: nv,
                    rel_err: rel,
                });
            }
        }
    }
    GradCheckReport {
        pass: max_rel_err <= tol,
        tol,
        step,
        checked,
        max_rel_err,
        worst,
    }
}

/// Builds the loss with `build`, backpropagates it, and compares the
/// resulting parameter gradients against central finite differences.
///
/// `build` must be deterministic: it is re-run once per perturbed parameter
/// value to produce the numeric estimate.
pub fn grad_check<B>(
    build: B,
    store: &mut ParamStore,
    step: f64,
    tol: f64,
) -> NumResult<GradCheckReport>
where
    B: Fn(&mut Graph, &ParamStore) -> NumResult<NodeId>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic = store.grads_snapshot();
    store.zero_grads();

    let numeric = fd_gradients(
        |s| {
            let mut g = Graph::new();
            let id = build(&mut g, s)?;
            g.value(id).item()
        },
        store,
        step,
    )?;
    Ok(compare_gradients(&analytic, &numeric, tol, step))
}

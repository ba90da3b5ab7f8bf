//! Central-difference validation of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::param::{BoundParams, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub denom_floor: f64,
    /// Restrict the check to these parameters.
    pub only: Option<Vec<ParamId>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_entries_per_param: None,
            denom_floor: 1e-6,
            only: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub worst: Option<WorstEntry>,
}

fn scalar_value<'g>(v: Var<'g>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(TensorError::GradCheck(format!("objective has shape {:?}, expected a scalar", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(TensorError::GradCheck("objective is not finite".into()));
    }
    Ok(x)
}

/// Compares gradients of the scalar `f` against central differences and
/// returns the largest elementwise relative error.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &BoundParams<'g>) -> Result<Var<'g>>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let p = s.bind_frozen(&g);
        scalar_value(f(&g, &p).map_err(|e| TensorError::GradCheck(format!("objective failed: {e}")))?)
    };

    let g = Graph::new();
    let bound = store.bind(&g);
    let out = f(&g, &bound)?;
    scalar_value(out)?;
    let analytic = bound.grads(&g.backward(out)?);

    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => store.ids().collect(),
    };
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        worst: None,
    };
    for id in ids {
        let numel = store.tensor(id).numel();
        let picks: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        for idx in picks {
            let orig = store.tensor(id).data()[idx];
            work.tensor_mut(id).data_mut()[idx] = orig + opts.eps;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[idx] = orig - opts.eps;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[id.index()].data()[idx];
            let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
            let rel = (a - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some(WorstEntry {
                        param: store.get(id).name.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
    }
    Ok(report)
}

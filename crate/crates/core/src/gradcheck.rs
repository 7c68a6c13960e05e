//! Central-difference verification of analytic gradients.
//!
//! Runs in double precision only. A deterministic subset of coordinates is
//! drawn across all parameter arrays (every array is represented) and each is
//! perturbed by +-eps; the relative error against the supplied analytic
//! gradient uses a max(1e-8, |a|+|b|) denominator.

use crate::error::{CoreError, Result};
use crate::params::ParamSet;
use crate::rng::{self, StreamKind};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
    /// (parameter name, max relative error seen within it)
    pub per_param: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = (analytic.abs() + numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Check `analytic` (one gradient array per parameter, in set order) against
/// central differences of `eval` at the current parameter values.
///
/// `eval` must be a pure function of the parameters; this is probed by a
/// repeated evaluation before any perturbation. At least `min_coords`
/// coordinates are sampled, spread over the arrays proportionally to their
/// size with a floor of one per array (capped by array size).
pub fn grad_check<F>(
    params: &mut ParamSet<f64>,
    analytic: &[Vec<f64>],
    mut eval: F,
    eps: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<f64>) -> Result<f64>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(CoreError::Argument(format!(
            "grad_check eps must lie in [1e-6, 1e-2], got {eps}"
        )));
    }
    if analytic.len() != params.len() {
        return Err(CoreError::Contract(format!(
            "expected {} gradient arrays, got {}",
            params.len(),
            analytic.len()
        )));
    }
    let base = eval(params)?;
    let probe = eval(params)?;
    if base.to_bits() != probe.to_bits() {
        return Err(CoreError::Contract(format!(
            "model_eval is not deterministic: {base:?} vs {probe:?}"
        )));
    }

    let total: usize = params.iter().map(|p| p.data.len()).sum();
    let mut rng = rng::stream(seed, StreamKind::Test, 0);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
        per_param: Vec::with_capacity(params.len()),
    };

    for pi in 0..params.len() {
        let len = params.get(pi).data.len();
        if len == 0 {
            continue;
        }
        let share = (min_coords * len).div_ceil(total);
        let quota = share.max(1).min(len);
        // sample distinct coordinates
        let mut picked: Vec<usize> = if quota == len {
            (0..len).collect()
        } else {
            let mut chosen = alloc::collections::BTreeSet::new();
            while chosen.len() < quota {
                chosen.insert(rng::below(&mut rng, len));
            }
            chosen.into_iter().collect()
        };
        picked.sort_unstable();

        let mut param_worst = 0.0f64;
        for idx in picked {
            let original = params.get(pi).data[idx];
            params.get_mut(pi).data[idx] = original + eps;
            let plus = eval(params)?;
            params.get_mut(pi).data[idx] = original - eps;
            let minus = eval(params)?;
            params.get_mut(pi).data[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][idx];
            let rel = relative_error(a, numeric);
            if rel > param_worst {
                param_worst = rel;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.get(pi).name.clone();
                report.worst_index = idx;
            }
            report.coords_checked += 1;
        }
        report
            .per_param
            .push((params.get(pi).name.clone(), param_worst));
    }
    Ok(report)
}

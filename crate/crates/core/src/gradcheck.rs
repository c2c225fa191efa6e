//! Central-difference gradient oracle.
//!
//! The caller runs forward+backward first so that `params` holds analytic
//! gradients, then hands a pure loss closure here. Frozen parameters are
//! skipped.

use crate::params::ParamSet;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    // The floor absorbs central-difference cancellation noise (~1e-11 for
    // unit-scale losses) on coordinates whose true gradient is zero.
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Check every coordinate of every learnable parameter against a central
/// difference with step `h`.
pub fn grad_check<F>(params: &mut ParamSet, loss: F, h: f64) -> GradCheckReport
where
    F: Fn(&ParamSet) -> f64,
{
    grad_check_strided(params, loss, h, 1)
}

/// Like [`grad_check`] but only every `stride`-th coordinate, for larger
/// parameter groups.
pub fn grad_check_strided<F>(params: &mut ParamSet, loss: F, h: f64, stride: usize) -> GradCheckReport
where
    F: Fn(&ParamSet) -> f64,
{
    let stride = stride.max(1);
    let mut entries = Vec::new();
    let mut overall: f64 = 0.0;
    for i in 0..params.len() {
        let id = crate::params::ParamId(i);
        if !params.get(id).requires_grad {
            continue;
        }
        let name = params.get(id).name.clone();
        let n = params.get(id).value.len();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for j in (0..n).step_by(stride) {
            let orig = params.get(id).value.values[j];
            params.get_mut(id).value.values[j] = orig + h;
            let up = loss(params);
            params.get_mut(id).value.values[j] = orig - h;
            let down = loss(params);
            params.get_mut(id).value.values[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = params.get(id).grad[j];
            worst = worst.max(rel_err(analytic, numeric));
            checked += 1;
        }
        overall = overall.max(worst);
        entries.push(GradCheckEntry {
            name,
            max_rel_err: worst,
            coords_checked: checked,
        });
    }
    GradCheckReport {
        entries,
        max_rel_err: overall,
    }
}

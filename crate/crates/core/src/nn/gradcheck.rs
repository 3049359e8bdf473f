//! Central finite-difference check of analytic parameter gradients.

use rand::Rng;

use super::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(param name, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor so that gradients that are zero on both
/// sides compare equal.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Compare `grads` (analytic, for `params`) against central differences of
/// `loss` at `probes` random coordinates.
pub fn check<R: Rng + ?Sized>(
    params: &ParamSet<f64>,
    grads: &[Tensor<f64>],
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
    probes: usize,
    step: f64,
    rng: &mut R,
) -> GradReport {
    let total = params.count();
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.len()).collect();
    let mut work = params.clone();
    let mut report = GradReport {
        probes,
        max_rel_err: 0.0,
        worst: None,
    };
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut id = 0;
        while flat >= sizes[id] {
            flat -= sizes[id];
            id += 1;
        }
        let orig = work.get(id).data()[flat];
        work.get_mut(id).data_mut()[flat] = orig + step;
        let up = loss(&work);
        work.get_mut(id).data_mut()[flat] = orig - step;
        let down = loss(&work);
        work.get_mut(id).data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[id].data()[flat];
        let e = rel_err(analytic, numeric);
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((params.name(id).to_string(), flat, analytic, numeric));
        }
    }
    report
}

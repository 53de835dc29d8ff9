//! Central finite-difference checks of analytic parameter gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (param name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with an absolute floor so that two near-zero values agree.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Samples up to `count` distinct (param, index) coordinates, restricted to
/// `allowed` parameters when given.
pub fn sample_coords<R: Rng + ?Sized>(
    store: &ParamStore,
    count: usize,
    allowed: Option<&[ParamId]>,
    rng: &mut R,
) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = match allowed {
        Some(a) => a.to_vec(),
        None => (0..store.len()).collect(),
    };
    let mut all: Vec<(ParamId, usize)> =
        ids.iter().flat_map(|&p| (0..store.get(p).len()).map(move |i| (p, i))).collect();
    all.shuffle(rng);
    all.truncate(count);
    all
}

/// Compares `grads` (from one backward pass) against central differences of
/// `loss` at step `h` on the given coordinates.
pub fn check_params(
    store: &ParamStore,
    grads: &[Tensor],
    coords: &[(ParamId, usize)],
    h: f64,
    floor: f64,
    loss: impl Fn(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut probe = store.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for &(p, i) in coords {
        let orig = probe.get(p).data[i];
        probe.get_mut(p).data[i] = orig + h;
        let up = loss(&probe);
        probe.get_mut(p).data[i] = orig - h;
        let down = loss(&probe);
        probe.get_mut(p).data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[p].data[i];
        let err = relative_error(analytic, numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(p).to_string(), i, analytic, numeric));
        }
    }
    report
}

/// Same check with respect to an input tensor instead of parameters.
pub fn check_input(
    x: &Tensor,
    grad: &Tensor,
    h: f64,
    floor: f64,
    loss: impl Fn(&Tensor) -> f64,
) -> GradCheckReport {
    let mut probe = x.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = loss(&probe);
        probe.data[i] = orig - h;
        let down = loss(&probe);
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(grad.data[i], numeric, floor);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(("input".into(), i, grad.data[i], numeric));
        }
    }
    report
}

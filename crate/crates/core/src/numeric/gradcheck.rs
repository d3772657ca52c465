//! Central finite-difference gradient verification.

use rand::seq::index::sample;

use super::rng::SeededRng;

const STEP: f64 = 1e-6;
/// Denominator floor: below this magnitude the error is effectively absolute.
const REL_FLOOR: f64 = 1e-3;
const FULL_CHECK_LIMIT: usize = 10_000;
const SAMPLED_COORDS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

/// Relative error `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `loss_fn`'s analytic gradient with central differences.
///
/// `loss_fn` maps a flat parameter vector to `(loss, gradient)`. All
/// coordinates are checked up to 10,000 parameters, a fixed random subset of
/// 256 coordinates beyond that.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameters");
    let coords: Vec<usize> = if params.len() > FULL_CHECK_LIMIT {
        let mut rng = SeededRng::new(params.len() as u64);
        let mut idx = sample(&mut rng, params.len(), SAMPLED_COORDS).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..params.len()).collect()
    };
    let mut probe = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + STEP;
        let (up, _) = loss_fn(&probe);
        probe[i] = orig - STEP;
        let (down, _) = loss_fn(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = relative_error(analytic[i], numeric);
        if !(err <= max_rel_err) {
            max_rel_err = err;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        checked: coords.len(),
        pass: max_rel_err < tolerance,
    }
}

//! Central finite-difference checking of analytic gradients.
//!
//! Every differentiable path in the crate is required to agree with these
//! checks to a relative error below 1e-3, so composite backward passes can
//! be trusted without a graph engine.

use super::{DenseArray, ParameterStore};
use rand::seq::SliceRandom;
use rand::Rng;

/// Perturbation used by the central difference.
pub const GRAD_CHECK_STEP: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-6 && numeric.abs() < 1e-6 {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

fn pick_entries(len: usize, max_entries: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match max_entries {
        Some(m) if m < len => {
            let mut all: Vec<usize> = (0..len).collect();
            all.shuffle(rng);
            all.truncate(m);
            all.sort_unstable();
            all
        }
        _ => (0..len).collect(),
    }
}

/// Compare the analytic gradient of parameter `name` against central
/// differences of `loss` and return the worst relative error. `max_entries`
/// limits the number of perturbed entries for large arrays (chosen with the
/// provided rng).
pub fn max_param_rel_err(
    store: &mut ParameterStore,
    name: &str,
    analytic: &DenseArray,
    mut loss: impl FnMut(&ParameterStore) -> f64,
    step: f64,
    max_entries: Option<usize>,
    rng: &mut impl Rng,
) -> f64 {
    let len = store.value(name).len();
    assert_eq!(analytic.len(), len, "gradient shape mismatch for `{name}`");
    let mut worst = 0.0f64;
    for idx in pick_entries(len, max_entries, rng) {
        let original = store.value(name).as_slice()[idx];
        store.value_mut(name).as_mut_slice()[idx] = original + step;
        let plus = loss(store);
        store.value_mut(name).as_mut_slice()[idx] = original - step;
        let minus = loss(store);
        store.value_mut(name).as_mut_slice()[idx] = original;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(analytic.as_slice()[idx], numeric));
    }
    worst
}

/// Same as [`max_param_rel_err`] but perturbing an input array.
pub fn max_input_rel_err(
    input: &mut DenseArray,
    analytic: &DenseArray,
    mut loss: impl FnMut(&DenseArray) -> f64,
    step: f64,
    max_entries: Option<usize>,
    rng: &mut impl Rng,
) -> f64 {
    assert_eq!(analytic.len(), input.len(), "input gradient shape mismatch");
    let mut worst = 0.0f64;
    for idx in pick_entries(input.len(), max_entries, rng) {
        let original = input.as_slice()[idx];
        input.as_mut_slice()[idx] = original + step;
        let plus = loss(input);
        input.as_mut_slice()[idx] = original - step;
        let minus = loss(input);
        input.as_mut_slice()[idx] = original;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(rel_err(analytic.as_slice()[idx], numeric));
    }
    worst
}

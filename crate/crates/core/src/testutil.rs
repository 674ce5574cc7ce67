//! Test-only helpers: a central-difference gradient oracle that relies on
//! nothing but forward evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::ParameterSet;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of `f` with respect to every scalar in `params`,
/// in entry order.
pub fn fd_grad(params: &mut ParameterSet, h: f64, f: impl Fn(&ParameterSet) -> f64) -> Vec<f64> {
    let ids: Vec<_> = params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        for i in 0..params.value(id).len() {
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + h;
            let up = f(params);
            params.value_mut(id).data_mut()[i] = orig - h;
            let down = f(params);
            params.value_mut(id).data_mut()[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference when both
/// vectors are tiny.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference check of `analytic` against `f` at `point`.
/// Returns the maximum relative error over all coordinates.
pub fn finite_diff_check<F>(f: F, point: &[f64], analytic: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::shape("finite_diff_check", &[point.len()], &[analytic.len()]));
    }
    let mut p = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p)?;
        p[i] = orig - step;
        let down = f(&p)?;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Which parameter coordinates a [`check_params`] run perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coords {
    All,
    /// At most this many coordinates per parameter tensor, drawn with `seed`.
    Sample { per_param: usize, seed: u64 },
}

/// Central-difference check of `analytic` (from backprop) against a loss
/// evaluated on perturbed copies of `params`.
pub fn check_params<F>(
    f: F,
    params: &ParamStore,
    analytic: &Gradients,
    step: f64,
    coords: Coords,
) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    let mut rng = match coords {
        Coords::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coords::All => None,
    };
    for id in params.ids() {
        let len = params.get(id).len();
        let picked: Vec<usize> = match (coords, rng.as_mut()) {
            (Coords::Sample { per_param, .. }, Some(rng)) if per_param < len => {
                let mut v = sample(rng, len, per_param).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for i in picked {
            let orig = params.get(id).values()[i];
            work.get_mut(id).values_mut()[i] = orig + step;
            let up = f(&work)?;
            work.get_mut(id).values_mut()[i] = orig - step;
            let down = f(&work)?;
            work.get_mut(id).values_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite("check_params"));
            }
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic.get(id)[i], numeric));
        }
    }
    Ok(worst)
}

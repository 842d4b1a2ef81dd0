//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckSettings {
    pub eps: f64,
    /// Coordinates to test; every coordinate is tested when fewer exist.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Worst>,
}

/// `|a − g| / max(|a|, |g|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(θ+ε) − f(θ−ε)) / 2ε` on a seeded sample
/// of coordinates. `params` is restored before returning.
pub fn grad_check<F>(params: &mut ParamStore, analytic: &Gradients, mut f: F, settings: &GradCheckSettings) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let coords: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).len()).map(move |i| (id, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let chosen: Vec<usize> = if coords.len() <= settings.samples {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), settings.samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for ci in chosen {
        let (id, i) = coords[ci];
        let orig = params.get(id).data()[i];
        params.get_mut(id).data_mut()[i] = orig + settings.eps;
        let plus = f(params);
        params.get_mut(id).data_mut()[i] = orig - settings.eps;
        let minus = f(params);
        params.get_mut(id).data_mut()[i] = orig;
        let (plus, minus) = (plus?, minus?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is not finite around {}[{i}]",
                params.name(id)
            )));
        }
        let numeric = (plus - minus) / (2.0 * settings.eps);
        let a = analytic.get(id).data()[i];
        let err = relative_error(a, numeric);
        report.coords_checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(Worst {
                param: params.name(id).to_string(),
                index: i,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}

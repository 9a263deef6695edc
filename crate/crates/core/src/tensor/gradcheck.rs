//! Central finite-difference verification of analytic gradients.
//!
//! The checker only ever calls the forward closure, so it is independent of
//! the backward pass it validates. The closure must be deterministic: two
//! calls with identical parameter values have to produce identical losses
//! (reseed any dropout RNG inside it).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::Parameter;
use crate::tensor::Tensor;

/// Relative errors are measured against max(|analytic|, |numeric|, this
/// floor) so coordinates with near-zero true gradient do not dominate.
pub const REL_DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinates actually compared (may be a seeded subsample).
    pub checked: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// True iff every parameter's max relative error is within tolerance.
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tolerance)
    }

    pub fn offenders(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err > self.tolerance).collect()
    }
}

/// Options for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Cap on coordinates checked per parameter; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    /// Seed for the coordinate subsample.
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: None,
            sample_seed: 0,
        }
    }
}

/// Compare analytic gradients against central finite differences
/// (f(p+eps) - f(p-eps)) / (2 eps), coordinate by coordinate.
///
/// `loss_fn` rebuilds the forward graph and returns the scalar loss tensor.
/// It is called once for the analytic pass (followed by `backward`) and twice
/// per checked coordinate for the numeric side.
pub fn finite_diff_check(
    params: &[Parameter],
    opts: &GradCheckOptions,
    mut loss_fn: impl FnMut() -> Result<Tensor>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!(
            "finite-difference eps must be in [1e-7, 1e-3], got {}",
            opts.eps
        )));
    }

    for p in params {
        p.tensor().clear_grad();
    }
    let loss = loss_fn()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.tensor().grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.sample_seed);
    let mut entries = Vec::with_capacity(params.len());
    for (p, grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if n > cap => {
                let mut picked = sample(&mut rng, n, cap).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };

        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &i in &coords {
            let original = p.tensor().with_values(|v| v[i]);
            p.tensor().with_values_mut(|v| v[i] = original + opts.eps);
            let plus = loss_fn()?.values()[0];
            p.tensor().with_values_mut(|v| v[i] = original - opts.eps);
            let minus = loss_fn()?.values()[0];
            p.tensor().with_values_mut(|v| v[i] = original);

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let abs = (grad[i] - numeric).abs();
            let denom = grad[i].abs().max(numeric.abs()).max(REL_DENOM_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / denom);
        }

        entries.push(GradCheckEntry {
            name: p.name().to_string(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            checked: coords.len(),
            total: n,
        });
    }

    Ok(GradCheckReport { entries, tolerance: opts.tolerance })
}

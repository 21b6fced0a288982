//! Central-difference verification of analytic gradients.

use crate::autodiff::params::ParameterStore;
use crate::error::{Error, Result};
use crate::rng;

/// Options for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinate budget. Stores with more scalars than this get a seeded
    /// random subset of exactly this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameter coordinate with the largest error, for diagnostics.
    pub worst: String,
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` is called as `f(params, true)` once to obtain the loss and the flat
/// analytic gradient (layout of [`ParameterStore::flatten`]), then twice per
/// checked coordinate with `need_grads = false`. The relative error is
/// `|a - n| / max(1e-8, |a| + |n|)`, maximized over coordinates. `f` must be
/// deterministic; non-finite values abort.
pub fn grad_check<F>(
    params: &mut ParameterStore,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore, bool) -> (f64, Option<Vec<f64>>),
{
    let (loss, grads) = f(params, true);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at the base point: {loss}")));
    }
    let analytic = grads.expect("grad_check closure must return gradients when asked");
    assert_eq!(
        analytic.len(),
        params.flat_len(),
        "analytic gradient length mismatch"
    );

    let total = params.flat_len();
    let coords: Vec<usize> = if total <= opts.max_coords {
        (0..total).collect()
    } else {
        let mut r = rng::stream(rng::derive_seed(opts.seed, "gradcheck-coords", &[]));
        let mut picked = rng::sample_indices(&mut r, total, opts.max_coords);
        picked.sort_unstable();
        picked
    };

    let mut max_rel_err = 0.0f64;
    let mut worst = String::new();
    for &c in &coords {
        let orig = params.get_flat(c);
        params.set_flat(c, orig + opts.step);
        let (up, _) = f(params, false);
        params.set_flat(c, orig - opts.step);
        let (down, _) = f(params, false);
        params.set_flat(c, orig);
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss near coordinate {}: {up} / {down}",
                params.coord_name(c)
            )));
        }
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic[c];
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = params.coord_name(c);
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked: coords.len(),
        worst,
    })
}

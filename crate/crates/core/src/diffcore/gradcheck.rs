//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;

use super::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Clone, Debug)]
pub struct FdConfig {
    /// Step for the central difference.
    pub h: f64,
    /// Above this many coordinates a random subset of this size is checked.
    pub max_coords: usize,
    /// Relative drift between the central differences at `h` and `h/2`
    /// above which a coordinate is treated as straddling a kink and skipped.
    pub kink_tol: f64,
    /// Seeds the coordinate subset.
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            h: 1e-6,
            max_coords: 200,
            kink_tol: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error, as `(path, flat index)`.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Coordinates where both gradients sit below the difference noise
    /// floor, so the comparison carries no information.
    pub skipped_flat: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn value_of<F>(f: &mut F, params: &ParamSet) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric("finite-difference objective is not finite".into()));
    }
    Ok(v)
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` records a scalar loss on the tape it is given. It must be a
/// deterministic function of the parameter values: any randomness has to be
/// re-seeded identically on every call.
pub fn finite_diff_check<F>(mut f: F, params: &ParamSet, cfg: &FdConfig) -> Result<FdReport>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let f0 = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric("finite-difference objective is not finite".into()));
        }
        tape.backward(loss, &mut analytic)?;
        v
    };

    let coords: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p.clone(), i)))
        .collect();
    let chosen: Vec<usize> = if coords.len() > cfg.max_coords {
        let mut r = rng::stream(cfg.seed, Purpose::Diagnostic, 0);
        let mut idx = sample(&mut r, coords.len(), cfg.max_coords).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..coords.len()).collect()
    };

    let roundoff = 64.0 * f64::EPSILON * (f0.abs() + 1.0) / cfg.h;
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        skipped_flat: 0,
    };
    for ci in chosen {
        let (path, i) = &coords[ci];
        let x0 = work.get(path)?.data()[*i];
        let mut at = |x: f64, work: &mut ParamSet| -> Result<f64> {
            work.get_mut(path)?.data_mut()[*i] = x;
            value_of(&mut f, work)
        };
        let fp = at(x0 + cfg.h, &mut work)?;
        let fm = at(x0 - cfg.h, &mut work)?;
        let fp2 = at(x0 + cfg.h / 2.0, &mut work)?;
        let fm2 = at(x0 - cfg.h / 2.0, &mut work)?;
        work.get_mut(path)?.data_mut()[*i] = x0;

        // A kink inside the stencil shows up either as disagreeing one-sided
        // slopes or as a central difference that changes with the step.
        let d_plus = (fp - f0) / cfg.h;
        let d_minus = (f0 - fm) / cfg.h;
        let numeric = (fp - fm) / (2.0 * cfg.h);
        let numeric_half = (fp2 - fm2) / cfg.h;
        let one_sided_gap = (d_plus - d_minus).abs() > 1e-3 * (d_plus.abs() + d_minus.abs()) + roundoff;
        let step_drift =
            (numeric - numeric_half).abs() > cfg.kink_tol * (numeric.abs() + numeric_half.abs()) + 2.0 * roundoff;
        if one_sided_gap || step_drift {
            report.skipped_kinks += 1;
            continue;
        }
        let tape_grad = analytic.get(path)?.grad().map_or(0.0, |g| g[*i]);
        if tape_grad.abs() < roundoff && numeric.abs() < roundoff {
            report.skipped_flat += 1;
            continue;
        }
        let e = rel_err(tape_grad, numeric);
        report.checked += 1;
        if report.worst.is_none() || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((path.clone(), *i));
        }
    }
    Ok(report)
}

//! Finite-difference gradient checking.

use rayon::prelude::*;

/// Central-difference gradient of `eval` at `p0`, one coordinate at a time,
/// parallelized over coordinates. `eval` must be deterministic.
pub fn central_diff(eval: &(dyn Fn(&[f32]) -> f64 + Sync), p0: &[f32], h: f64) -> Vec<f64> {
    (0..p0.len())
        .into_par_iter()
        .map(|i| {
            let mut p = p0.to_vec();
            p[i] = (p0[i] as f64 + h) as f32;
            let hi = eval(&p);
            p[i] = (p0[i] as f64 - h) as f32;
            let lo = eval(&p);
            // Use the realized f32 step, which may differ from 2h after rounding.
            let dp = (p0[i] as f64 + h) as f32 as f64 - ((p0[i] as f64 - h) as f32 as f64);
            (hi - lo) / dp
        })
        .collect()
}

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Coordinates skipped by the smoothness predicate (e.g. relu kinks).
    pub excluded: usize,
}

/// Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)` where
/// `floor` protects near-zero entries: `floor_frac` times the largest
/// gradient magnitude seen. Coordinates where `smooth_at` returns false are
/// excluded and counted.
pub fn compare(
    analytic: &[f64],
    numeric: &[f64],
    floor_frac: f64,
    smooth_at: Option<&dyn Fn(usize) -> bool>,
) -> FdReport {
    assert_eq!(analytic.len(), numeric.len());
    let gmax = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (floor_frac * gmax).max(1e-12);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_index: 0,
        excluded: 0,
    };
    for i in 0..analytic.len() {
        if let Some(pred) = smooth_at {
            if !pred(i) {
                report.excluded += 1;
                continue;
            }
        }
        let (a, n) = (analytic[i], numeric[i]);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    report
}

//! Central-difference gradient checking.
//!
//! `rel = |analytic - numeric| / (|analytic| + 1e-5)` per sampled coordinate;
//! a handful of coordinates per tensor keeps full-model checks affordable.

use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

/// Step ladder for [`finite_difference_check`]: factor-2 rungs from 1e-6 to
/// 1.28e-4. Below the bottom rung roundoff noise dominates every objective we
/// check; far above the top one stiff terms (reciprocals of small covariance
/// diagonals) saturate the difference quotient.
const STEP_LADDER: [f64; 8] = [1e-6, 2e-6, 4e-6, 8e-6, 1.6e-5, 3.2e-5, 6.4e-5, 1.28e-4];

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Compare `analytic` gradients of `f` against central differences at the
/// point `params`. `f` must fully recompute the loss from its arguments.
/// Samples `per_tensor` coordinates from each parameter tensor.
///
/// The step is chosen per coordinate: the difference quotient is evaluated on
/// [`STEP_LADDER`] and the rung agreeing best with its neighbors wins. Too
/// small a step amplifies evaluation roundoff (error ~ 1/h), too large a step
/// picks up curvature (error ~ h^2); the crossover shows up as the plateau in
/// the quotient sequence, and no single fixed step serves both the stiff and
/// the near-zero-gradient coordinates of one model. The analytic value is
/// never consulted during selection.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[Vec<f64>]) -> Result<f64>,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    per_tensor: usize,
    seed: u64,
) -> Result<FdReport> {
    run_check(f, params, analytic, per_tensor, seed, None)
}

/// [`finite_difference_check`] with one fixed step for every coordinate.
/// Cheaper (two evaluations per coordinate) and exact enough for smooth,
/// well-conditioned objectives where any reasonable `h` works.
pub fn finite_difference_check_at(
    f: &mut dyn FnMut(&[Vec<f64>]) -> Result<f64>,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<FdReport> {
    run_check(f, params, analytic, per_tensor, seed, Some(h))
}

fn run_check(
    f: &mut dyn FnMut(&[Vec<f64>]) -> Result<f64>,
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    per_tensor: usize,
    seed: u64,
    fixed_h: Option<f64>,
) -> Result<FdReport> {
    assert_eq!(params.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for ti in 0..params.len() {
        assert_eq!(params[ti].len(), analytic[ti].len(), "tensor {ti} length mismatch");
        let len = params[ti].len();
        if len == 0 {
            continue;
        }
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        for i in coords {
            let base = params[ti][i];
            let mut quotient = |h: f64, work: &mut Vec<Vec<f64>>| -> Result<f64> {
                work[ti][i] = base + h;
                let hi = f(work)?;
                work[ti][i] = base - h;
                let lo = f(work)?;
                work[ti][i] = base;
                Ok((hi - lo) / (2.0 * h))
            };
            let numeric = match fixed_h {
                Some(h) => quotient(h, &mut work)?,
                None => {
                    let mut cds = [0.0f64; STEP_LADDER.len()];
                    for (k, &h) in STEP_LADDER.iter().enumerate() {
                        cds[k] = quotient(h, &mut work)?;
                    }
                    select_stable(&cds)
                }
            };
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / (a.abs() + FD_EPS);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdReport { max_rel, checked })
}

/// Pick the rung minimizing the fitted error model `a/h + c*h^2`: evaluation
/// roundoff scales like 1/h and curvature like h^2, so the noise amplitude
/// comes from the bottom rungs' neighbor gaps and the curvature coefficient
/// from the top rungs'. Medians keep a single unlucky draw from steering the
/// fit, unlike picking the rung with the smallest raw gap.
fn select_stable(cds: &[f64]) -> f64 {
    let n = cds.len();
    debug_assert_eq!(n, STEP_LADDER.len());
    let gap = |k: usize| (cds[k + 1] - cds[k]).abs();
    let noise = median([
        gap(0) * STEP_LADDER[0],
        gap(1) * STEP_LADDER[1],
        gap(2) * STEP_LADDER[2],
    ]);
    let curve = median([
        gap(n - 4) / (3.0 * STEP_LADDER[n - 4].powi(2)),
        gap(n - 3) / (3.0 * STEP_LADDER[n - 3].powi(2)),
        gap(n - 2) / (3.0 * STEP_LADDER[n - 2].powi(2)),
    ]);
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (k, &h) in STEP_LADDER.iter().enumerate() {
        let err = noise / h + curve * h * h;
        if err < best_err {
            best_err = err;
            best = k;
        }
    }
    cds[best]
}

fn median(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

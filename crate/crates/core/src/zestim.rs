//! Split-sample Z-estimators.
//!
//! * variant 1 averages the roots of each split's moment equation;
//! * variant 2 solves the moment equation averaged over all splits;
//! * variant 3 averages, over repetitions, the roots of the moment equation
//!   averaged within each repetition.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::learners::{Model, SplitModels};
use crate::linalg::{solve, Mat, Vect};
use crate::moments::{evaluate_splits, jac_at, observations, pooled, MomentFunction, Obs, SplitObs};
use crate::splits::SplitPlan;
use crate::stats::KahanVec;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "u8", into = "u8")]
pub enum Variant {
    One,
    #[default]
    Two,
    Three,
}

impl TryFrom<u8> for Variant {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Variant::One),
            2 => Ok(Variant::Two),
            3 => Ok(Variant::Three),
            _ => Err(format!("variant must be 1, 2 or 3, got {v}")),
        }
    }
}

impl From<Variant> for u8 {
    fn from(v: Variant) -> u8 {
        match v {
            Variant::One => 1,
            Variant::Two => 2,
            Variant::Three => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    ClosedForm,
    Newton,
    NelderMead,
}

/// Diagnostics of one root-finding problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub method: SolveMethod,
    pub iterations: usize,
    pub residual: f64,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZEstimate {
    pub variant: Variant,
    pub theta_hat: Vec<f64>,
    /// Per-split roots in split order (variant 1 only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_split_thetas: Vec<Vec<f64>>,
    /// Per-repetition roots (variant 3 only).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_repetition_thetas: Vec<Vec<f64>>,
    /// One entry per solved system.
    pub diagnostics: Vec<SolveInfo>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn tol_at(scale: f64, theta: &[f64]) -> f64 {
    scale * (1.0 + norm(theta))
}

fn clamp_box(theta: &mut [f64], dom: &[(f64, f64)]) {
    for (t, &(lo, hi)) in theta.iter_mut().zip(dom) {
        *t = t.clamp(lo, hi);
    }
}

/// Mean per-observation Jacobian, pooled like [`pooled`].
pub fn pooled_jacobian(mf: &dyn MomentFunction, theta: &[f64], groups: &[&[Obs]]) -> Result<Mat> {
    if let Some(j) = mf.jacobian_override(theta, groups) {
        return j;
    }
    let d = mf.dim();
    let mut acc = KahanVec::new(d * d);
    let mut buf = Mat::zeros(d, d);
    for g in groups {
        let mut inner = KahanVec::new(d * d);
        for o in g.iter() {
            jac_at(mf, theta, o, &mut buf);
            inner.add(buf.as_slice());
        }
        let w = 1.0 / g.len() as f64;
        acc.add(&inner.total().iter().map(|v| v * w).collect::<Vec<_>>());
    }
    let g = groups.len() as f64;
    let j = Mat::from_column_slice(d, d, &acc.total()) / g;
    if j.iter().all(|v| v.is_finite()) {
        Ok(j)
    } else {
        Err(Error::NonFiniteJacobian)
    }
}

/// Root of `(1/G) sum_g mean_{i in g} psi(theta) = 0` with tolerance
/// `tol_scale * (1 + |theta|)`.
pub fn solve_system(mf: &dyn MomentFunction, groups: &[&[Obs]], tol_scale: f64) -> Result<(Vec<f64>, SolveInfo)> {
    if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
        return Err(Error::EmptySubset);
    }
    let d = mf.dim();
    let mut buf = vec![0.0; d];
    if mf.average_part(&groups[0][0], &mut buf) {
        let mut acc = KahanVec::new(d);
        for g in groups {
            let mut inner = KahanVec::new(d);
            for o in g.iter() {
                mf.average_part(o, &mut buf);
                inner.add(&buf);
            }
            let w = 1.0 / g.len() as f64;
            acc.add(&inner.total().iter().map(|v| v * w).collect::<Vec<_>>());
        }
        let theta: Vec<f64> = acc.total().iter().map(|v| v / groups.len() as f64).collect();
        let residual = norm(&pooled(mf, &theta, groups)?);
        let tol = tol_at(tol_scale, &theta);
        return Ok((theta, SolveInfo { method: SolveMethod::ClosedForm, iterations: 0, residual, tol }));
    }
    if let Some(theta) = mf.closed_form(groups) {
        let residual = norm(&pooled(mf, &theta, groups)?);
        let tol = tol_at(tol_scale, &theta);
        if mf.smooth() && !(residual <= tol) {
            return Err(Error::NoConvergence { residual, tol, iterations: 0 });
        }
        return Ok((theta, SolveInfo { method: SolveMethod::ClosedForm, iterations: 0, residual, tol }));
    }
    newton(mf, groups, tol_scale)
}

fn newton(mf: &dyn MomentFunction, groups: &[&[Obs]], tol_scale: f64) -> Result<(Vec<f64>, SolveInfo)> {
    let dom = mf.theta_domain();
    let mut theta = mf.theta_init(groups);
    clamp_box(&mut theta, &dom);
    let mut f = pooled(mf, &theta, groups)?;
    let mut fnorm = norm(&f);
    let mut singular = false;
    let mut it = 0;
    while it < MAX_NEWTON {
        if fnorm <= tol_at(tol_scale, &theta) {
            return Ok((
                theta.clone(),
                SolveInfo { method: SolveMethod::Newton, iterations: it, residual: fnorm, tol: tol_at(tol_scale, &theta) },
            ));
        }
        it += 1;
        let j = pooled_jacobian(mf, &theta, groups)?;
        let Some(step) = solve(&j, &(-Vect::from_column_slice(&f))) else {
            singular = true;
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            clamp_box(&mut cand, &dom);
            let fc = pooled(mf, &cand, groups)?;
            let nc = norm(&fc);
            if nc.is_finite() && nc < fnorm {
                theta = cand;
                f = fc;
                fnorm = nc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let tol = tol_at(tol_scale, &theta);
    if fnorm <= tol {
        return Ok((theta, SolveInfo { method: SolveMethod::Newton, iterations: it, residual: fnorm, tol }));
    }
    // Newton stalled: minimize the squared residual instead
    let obj = |th: &[f64]| -> f64 {
        let mut c = th.to_vec();
        clamp_box(&mut c, &dom);
        pooled(mf, &c, groups).map_or(f64::INFINITY, |v| v.iter().map(|x| x * x).sum())
    };
    let (mut best, iters) = nelder_mead(&obj, &theta, tol_scale);
    clamp_box(&mut best, &dom);
    let res = norm(&pooled(mf, &best, groups)?);
    let tol = tol_at(tol_scale, &best);
    if res <= tol {
        return Ok((best, SolveInfo { method: SolveMethod::NelderMead, iterations: it + iters, residual: res, tol }));
    }
    if singular {
        return Err(Error::SingularJacobian(format!("Newton step failed for `{}` and fallback did not converge", mf.name())));
    }
    Err(Error::NoConvergence { residual: res.min(fnorm), tol, iterations: it + iters })
}

/// Minimal Nelder-Mead with standard coefficients.
fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], tol_scale: f64) -> (Vec<f64>, usize) {
    let d = x0.len();
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..d {
        let mut x = x0.to_vec();
        x[i] += 0.1 * (1.0 + x0[i].abs());
        simplex.push(x);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|x| f(x)).collect();
    let max_iter = 2000 * d.max(1);
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let scale = 1.0 + norm(&simplex[0]);
        if vals[d] - vals[0] <= (tol_scale * scale).powi(2) * 1e-4 && vals[0] <= (tol_scale * scale).powi(2) {
            break;
        }
        let centroid: Vec<f64> = (0..d).map(|c| simplex[..d].iter().map(|x| x[c]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|c| centroid[c] + t * (simplex[d][c] - centroid[c])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                simplex[d] = xe;
                vals[d] = fe;
            } else {
                simplex[d] = xr;
                vals[d] = fr;
            }
        } else if fr < vals[d - 1] {
            simplex[d] = xr;
            vals[d] = fr;
        } else {
            let xc = if fr < vals[d] { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < vals[d].min(fr) {
                simplex[d] = xc;
                vals[d] = fc;
            } else {
                for i in 1..=d {
                    simplex[i] = (0..d).map(|c| simplex[0][c] + 0.5 * (simplex[i][c] - simplex[0][c])).collect();
                    vals[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    (simplex[best].clone(), it)
}

/// Roots of each split's own moment equation, in split order.
pub fn per_split_estimates(mf: &dyn MomentFunction, obs: &[SplitObs], tol_scale: f64) -> Result<Vec<Vec<f64>>> {
    Ok(per_split_solve(mf, obs, tol_scale)?.into_iter().map(|(t, _)| t).collect())
}

fn per_split_solve(mf: &dyn MomentFunction, obs: &[SplitObs], tol_scale: f64) -> Result<Vec<(Vec<f64>, SolveInfo)>> {
    obs.par_iter().map(|s| solve_system(mf, &[s.as_slice()], tol_scale)).collect()
}

fn average(v: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = KahanVec::new(v[0].len());
    for x in v {
        acc.add(x);
    }
    acc.total().into_iter().map(|s| s / v.len() as f64).collect()
}

/// Solve a variant from precomputed split observations (split order).
pub fn solve_obs(
    variant: Variant,
    mf: &dyn MomentFunction,
    plan: &SplitPlan,
    obs: &[SplitObs],
    tol_scale: f64,
) -> Result<ZEstimate> {
    if obs.len() != plan.n_splits() {
        return Err(Error::InvalidArgument("observations do not match the plan".into()));
    }
    match variant {
        Variant::One => {
            let sols = per_split_solve(mf, obs, tol_scale)?;
            let (thetas, diagnostics): (Vec<_>, Vec<_>) = sols.into_iter().unzip();
            Ok(ZEstimate {
                variant,
                theta_hat: average(&thetas),
                per_split_thetas: thetas,
                per_repetition_thetas: vec![],
                diagnostics,
            })
        }
        Variant::Two => {
            let groups: Vec<&[Obs]> = obs.iter().map(|s| s.as_slice()).collect();
            let (theta, info) = solve_system(mf, &groups, tol_scale)?;
            Ok(ZEstimate {
                variant,
                theta_hat: theta,
                per_split_thetas: vec![],
                per_repetition_thetas: vec![],
                diagnostics: vec![info],
            })
        }
        Variant::Three => {
            let sols = obs
                .par_chunks(plan.k)
                .map(|rep| {
                    let groups: Vec<&[Obs]> = rep.iter().map(|s| s.as_slice()).collect();
                    solve_system(mf, &groups, tol_scale)
                })
                .collect::<Result<Vec<_>>>()?;
            let (thetas, diagnostics): (Vec<_>, Vec<_>) = sols.into_iter().unzip();
            Ok(ZEstimate {
                variant,
                theta_hat: average(&thetas),
                per_split_thetas: vec![],
                per_repetition_thetas: thetas,
                diagnostics,
            })
        }
    }
}

/// Evaluate the split models and solve.
pub fn solve_variant(
    variant: Variant,
    mf: &dyn MomentFunction,
    models: &SplitModels,
    plan: &SplitPlan,
    d: &Dataset,
    tol_scale: f64,
) -> Result<ZEstimate> {
    let obs = evaluate_splits(models, plan, d)?;
    solve_obs(variant, mf, plan, &obs, tol_scale)
}

/// Whole-sample root for a baseline model evaluated on every row.
pub fn solve_fullsample(mf: &dyn MomentFunction, model_b: &dyn Model, d: &Dataset, tol_scale: f64) -> Result<Vec<f64>> {
    let rows: Vec<usize> = (0..d.n()).collect();
    let obs = observations(model_b, d, &rows)?;
    Ok(solve_system(mf, &[&obs], tol_scale)?.0)
}

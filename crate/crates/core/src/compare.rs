//! Comparing split-sample models against a baseline, or against each other.
//!
//! Smaller values of the reduced parameter count as better (MSE-like), so
//! the one-sided test has `H0: delta_s >= 0 for all s`.

use crate::error::{Error, Result};
use crate::inference::DeltaSpec;
use crate::linalg::{cholesky_jitter, psd_project, solve, Mat, Vect};
use crate::moments::{MomentFunction, Obs, SplitObs};
use crate::rng::{derive_seed, TAG_MC};
use crate::stats::{ksum, norm_quantile};
use crate::zestim::{pooled_jacobian, solve_system};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MC_DRAWS: usize = 100_000;
const CHUNK: usize = 4096;

/// Linearization of `h(theta_hat)` on one set of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Influence {
    pub theta: Vec<f64>,
    pub h: f64,
    pub rows: Vec<usize>,
    /// `-grad_h J^-1 psi(theta_hat; w_i)` for each row.
    pub values: Vec<f64>,
}

/// Solve on `obs` and return the influence values of `h` at the root.
pub fn influence(mf: &dyn MomentFunction, h: &DeltaSpec, obs: &[Obs], tol_scale: f64) -> Result<Influence> {
    let (theta, _) = solve_system(mf, &[obs], tol_scale)?;
    influence_at(mf, h, &[obs], &theta).map(|mut v| v.remove(0))
}

/// Influence values at a given root of the system pooled over `groups`.
pub fn influence_at(mf: &dyn MomentFunction, h: &DeltaSpec, groups: &[&[Obs]], theta: &[f64]) -> Result<Vec<Influence>> {
    let d = mf.dim();
    let g = h.grad(theta);
    let a = if mf.average_part(&groups[0][0], &mut vec![0.0; d]) {
        // J = -I for average-type moments
        Vect::from_iterator(d, g.iter().map(|v| -v))
    } else {
        let j = pooled_jacobian(mf, theta, groups)?;
        solve(&j.transpose(), &Vect::from_column_slice(&g))
            .ok_or_else(|| Error::SingularJacobian(format!("influence of `{}`", mf.name())))?
    };
    let mut buf = vec![0.0; d];
    Ok(groups
        .iter()
        .map(|obs| {
            let values = obs
                .iter()
                .map(|o| {
                    mf.psi(theta, o, &mut buf);
                    -a.iter().zip(&buf).map(|(x, y)| x * y).sum::<f64>()
                })
                .collect();
            Influence { theta: theta.to_vec(), h: h.h(theta), rows: obs.iter().map(|o| o.row).collect(), values }
        })
        .collect())
}

/// Per-split estimates of the reduced parameter minus the baseline's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaVector {
    pub entries: Vec<f64>,
    pub theta_b: f64,
}

/// Block estimate of the covariance of `sqrt(n) delta_hat`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaHat {
    pub matrix: Mat,
    pub diag: Vec<f64>,
    /// Number of intersection cells holding a single row (they contribute 0).
    pub degenerate_cells: usize,
}

/// `Sigma_jl = n^-1 sum over the four cells {s_j or its complement} x
/// {s_l or its complement} of the within-cell centred cross products of
/// the per-row contributions`. `contrib[j][i]` is split j's contribution of
/// row i to `sqrt(n) delta_j`; `member[j][i]` marks `i in s_j`.
pub fn block_sigma(contrib: &[Vec<f64>], member: &[Vec<bool>]) -> SigmaHat {
    let s = contrib.len();
    let n = contrib.first().map_or(0, |c| c.len());
    let cells: Vec<(Vec<f64>, usize)> = (0..s)
        .into_par_iter()
        .map(|j| {
            let mut row = vec![0.0; s];
            let mut degenerate = 0;
            for l in j..s {
                let mut cnt = [0usize; 4];
                let mut sj = [0.0; 4];
                let mut sl = [0.0; 4];
                let mut sjl = [0.0; 4];
                for i in 0..n {
                    let c = usize::from(member[j][i]) * 2 + usize::from(member[l][i]);
                    let (a, b) = (contrib[j][i], contrib[l][i]);
                    cnt[c] += 1;
                    sj[c] += a;
                    sl[c] += b;
                    sjl[c] += a * b;
                }
                let mut tot = 0.0;
                for c in 0..4 {
                    if cnt[c] >= 2 {
                        tot += sjl[c] - sj[c] * sl[c] / cnt[c] as f64;
                    } else if cnt[c] == 1 {
                        degenerate += 1;
                    }
                }
                row[l] = tot / n as f64;
            }
            (row, degenerate)
        })
        .collect();
    let mut m = Mat::zeros(s, s);
    let mut degenerate_cells = 0;
    for (j, (row, dg)) in cells.into_iter().enumerate() {
        degenerate_cells += dg;
        for l in j..s {
            m[(j, l)] = row[l];
            m[(l, j)] = row[l];
        }
    }
    let diag = (0..s).map(|j| m[(j, j)]).collect();
    SigmaHat { matrix: m, diag, degenerate_cells }
}

fn membership(infl: &[Influence], n: usize) -> Vec<Vec<bool>> {
    infl.iter()
        .map(|f| {
            let mut v = vec![false; n];
            for &i in &f.rows {
                v[i] = true;
            }
            v
        })
        .collect()
}

/// `(n/|s|) IF_s` scattered onto `[0, n)`.
fn scaled_scatter(f: &Influence, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    let w = n as f64 / f.rows.len() as f64;
    for (&i, &x) in f.rows.iter().zip(&f.values) {
        v[i] = w * x;
    }
    v
}

/// Inputs shared by the baseline and two-learner comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitInfluences {
    pub per_split: Vec<Influence>,
}

pub fn split_influences(mf: &dyn MomentFunction, h: &DeltaSpec, obs: &[SplitObs], tol_scale: f64) -> Result<SplitInfluences> {
    let per_split = obs.par_iter().map(|s| influence(mf, h, s, tol_scale)).collect::<Result<Vec<_>>>()?;
    Ok(SplitInfluences { per_split })
}

/// `delta_s = h(theta_s) - h(theta_b)` for every split.
pub fn delta_vector(split: &SplitInfluences, base: &Influence) -> DeltaVector {
    DeltaVector { entries: split.per_split.iter().map(|f| f.h - base.h).collect(), theta_b: base.h }
}

/// Sigma-hat for the model-vs-baseline differences. `base` must cover all n rows.
pub fn sigma_hat(split: &SplitInfluences, base: &Influence, n: usize) -> Result<SigmaHat> {
    if base.rows.len() != n {
        return Err(Error::InvalidArgument("baseline influence must cover every row".into()));
    }
    let mut b = vec![0.0; n];
    for (&i, &x) in base.rows.iter().zip(&base.values) {
        b[i] = x;
    }
    let contrib: Vec<Vec<f64>> =
        split.per_split.iter().map(|f| scaled_scatter(f, n).iter().zip(&b).map(|(a, bb)| a - bb).collect()).collect();
    Ok(block_sigma(&contrib, &membership(&split.per_split, n)))
}

/// Result of the one-sided test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub t_stat: f64,
    pub c_crit: f64,
    pub reject: bool,
    pub psd_projected: bool,
}

/// `T = sum_s min(sqrt(n) (delta_s + slack) / sigma_s, 0)^2`.
pub fn t_statistic(delta: &[f64], sd: &[f64], n: usize, slack: f64) -> f64 {
    let rn = (n as f64).sqrt();
    delta.iter().zip(sd).map(|(d, s)| (rn * (d + slack) / s).min(0.0).powi(2)).sum()
}

fn check_diag(diag: &[f64]) -> Result<Vec<f64>> {
    let max = diag.iter().fold(0.0f64, |m, v| m.max(*v));
    for (s, &v) in diag.iter().enumerate() {
        if !(v > 1e-14 * max) || !(v > 0.0) {
            return Err(Error::ZeroDiagonal(s));
        }
    }
    Ok(diag.iter().map(|v| v.sqrt()).collect())
}

/// Sorted Monte-Carlo draws of `T(Z)` with `Z ~ N(0, Sigma)` (PSD-projected,
/// small diagonal jitter), studentized by `sd`. Draws come in fixed chunks,
/// each with its own stream, so the result does not depend on thread count.
pub fn null_draws(sigma: &Mat, sd: &[f64], draws: usize, seed: u64) -> Result<(Vec<f64>, bool)> {
    let s = sigma.nrows();
    let (proj, projected) = psd_project(sigma);
    let jitter = 1e-12 * proj.trace().max(0.0) / s as f64;
    let l = cholesky_jitter(&proj, jitter.max(f64::MIN_POSITIVE))
        .or_else(|| cholesky_jitter(&proj, 1e-10 * proj.trace().abs().max(1e-300)))
        .ok_or(Error::NotPositiveDefinite)?;
    let chunks = draws.div_ceil(CHUNK);
    let mut out: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let len = CHUNK.min(draws - c * CHUNK);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_MC, c as u64]));
            let mut eps = vec![0.0; s];
            let l = &l;
            (0..len)
                .map(move |_| {
                    for e in eps.iter_mut() {
                        *e = StandardNormal.sample(&mut rng);
                    }
                    let mut t = 0.0;
                    for r in 0..s {
                        let mut z = 0.0;
                        for k in 0..=r {
                            z += l[(r, k)] * eps[k];
                        }
                        let v = (z / sd[r]).min(0.0);
                        t += v * v;
                    }
                    t
                })
                .collect::<Vec<_>>()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok((out, projected))
}

/// Order statistic `ceil((1 - alpha) draws)` of sorted draws.
pub fn critical_value(sorted: &[f64], alpha: f64) -> f64 {
    let k = ((1.0 - alpha) * sorted.len() as f64).ceil() as usize;
    sorted[k.clamp(1, sorted.len()) - 1]
}

/// One-sided test of `H0: delta >= 0` against a Monte-Carlo critical value.
pub fn one_sided_test(
    delta: &[f64],
    sigma: &SigmaHat,
    n: usize,
    alpha: f64,
    draws: usize,
    seed: u64,
    slack: f64,
) -> Result<TestOutcome> {
    if delta.len() != sigma.diag.len() || delta.is_empty() {
        return Err(Error::InvalidArgument("delta and Sigma-hat sizes differ".into()));
    }
    if draws == 0 || !(alpha > 0.0 && alpha < 1.0) || slack < 0.0 {
        return Err(Error::InvalidArgument("need draws > 0, alpha in (0, 1), slack >= 0".into()));
    }
    let sd = check_diag(&sigma.diag)?;
    let t_stat = t_statistic(delta, &sd, n, slack);
    let (sorted, psd_projected) = null_draws(&sigma.matrix, &sd, draws, seed)?;
    let c_crit = critical_value(&sorted, alpha);
    Ok(TestOutcome { t_stat, c_crit, reject: t_stat > c_crit, psd_projected })
}

/// Normal interval, its hull with 0, and the pre-test choice between them.
pub fn comparison_ci(diff: f64, sigma_delta: f64, n: usize, reject: bool, alpha: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
    let hw = norm_quantile(1.0 - alpha / 2.0) * sigma_delta / (n as f64).sqrt();
    let normal = [diff - hw, diff + hw];
    let ext = [normal[0].min(0.0), normal[1].max(0.0)];
    (normal, ext, if reject { normal } else { ext })
}

/// `sigma_eta^2 + sigma_b^2 - 2 (1/S) sum_s |s|^-1 sum_{i in s} IF_s(i) IF_b(i)`,
/// clamped at 0. Returns the value and whether clamping happened.
pub fn sigma_delta(sigma_eta: f64, split: &SplitInfluences, base: &Influence, n: usize) -> (f64, bool) {
    let mut b = vec![0.0; n];
    for (&i, &x) in base.rows.iter().zip(&base.values) {
        b[i] = x;
    }
    let sb2 = ksum(base.values.iter().map(|v| v * v)) / base.values.len() as f64;
    let cross =
        ksum(split.per_split.iter().map(|f| ksum(f.rows.iter().zip(&f.values).map(|(&i, &x)| x * b[i])) / f.rows.len() as f64))
            / split.per_split.len() as f64;
    let v = sigma_eta * sigma_eta + sb2 - 2.0 * cross;
    if v < 0.0 {
        (0.0, true)
    } else {
        (v.sqrt(), false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub alpha: f64,
    pub mc_draws: usize,
    pub seed: u64,
    pub slack: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self { alpha: 0.05, mc_draws: DEFAULT_MC_DRAWS, seed: 0, slack: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub delta: DeltaVector,
    pub theta_eta: f64,
    pub difference: f64,
    pub sigma_diag: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    pub degenerate_cells: usize,
    pub test: TestOutcome,
    pub sigma_delta: f64,
    pub sigma_delta_clamped: bool,
    pub ci_normal: [f64; 2],
    pub ci_extended: [f64; 2],
    pub ci_final: [f64; 2],
    pub slack: f64,
    pub mc_draws: usize,
    pub seed: u64,
    pub alpha: f64,
}

fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Model-vs-baseline comparison. `theta_eta` and `sigma_eta` describe the
/// aggregate split-sample estimate (any variant) of the reduced parameter;
/// `base_obs` holds the baseline's predictions on all rows.
#[allow(clippy::too_many_arguments)]
pub fn compare_to_baseline(
    mf: &dyn MomentFunction,
    h: &DeltaSpec,
    obs: &[SplitObs],
    base_obs: &[Obs],
    theta_eta: f64,
    sigma_eta: f64,
    cfg: &CompareConfig,
    tol_scale: f64,
    keep_sigma: bool,
) -> Result<ComparisonResult> {
    let n = base_obs.len();
    let split = split_influences(mf, h, obs, tol_scale)?;
    let base = influence(mf, h, base_obs, tol_scale)?;
    let delta = delta_vector(&split, &base);
    let sig = sigma_hat(&split, &base, n)?;
    let test = one_sided_test(&delta.entries, &sig, n, cfg.alpha, cfg.mc_draws, cfg.seed, cfg.slack)?;
    let (sd, clamped) = sigma_delta(sigma_eta, &split, &base, n);
    let difference = theta_eta - base.h;
    let (ci_normal, ci_extended, ci_final) = comparison_ci(difference, sd, n, test.reject, cfg.alpha);
    Ok(ComparisonResult {
        theta_eta,
        difference,
        sigma_diag: sig.diag.clone(),
        sigma: keep_sigma.then(|| mat_rows(&sig.matrix)),
        degenerate_cells: sig.degenerate_cells,
        delta,
        test,
        sigma_delta: sd,
        sigma_delta_clamped: clamped,
        ci_normal,
        ci_extended,
        ci_final,
        slack: cfg.slack,
        mc_draws: cfg.mc_draws,
        seed: cfg.seed,
        alpha: cfg.alpha,
    })
}

/// One direction of a two-learner comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionalTest {
    pub delta: DeltaVector,
    pub sigma_diag: Vec<f64>,
    pub test: TestOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoLearnerResult {
    /// Splits of A against the aggregate of B.
    pub a_vs_b: DirectionalTest,
    /// Splits of B against the aggregate of A.
    pub b_vs_a: DirectionalTest,
}

fn aggregate(mf: &dyn MomentFunction, h: &DeltaSpec, obs: &[SplitObs], tol_scale: f64) -> Result<(f64, Vec<Influence>)> {
    let groups: Vec<&[Obs]> = obs.iter().map(|s| s.as_slice()).collect();
    let (theta, _) = solve_system(mf, &groups, tol_scale)?;
    Ok((h.h(&theta), influence_at(mf, h, &groups, &theta)?))
}

fn directional(
    a: &SplitInfluences,
    b_theta: f64,
    b_infl: &[Influence],
    n: usize,
    cfg: &CompareConfig,
) -> Result<DirectionalTest> {
    // sqrt(n)(theta_B - theta) ~ n^-1/2 sum_i (1/S) sum_l (n/|s_l|) IF_l(i) 1{i in s_l}
    let mut b = vec![0.0; n];
    for f in b_infl {
        for (acc, v) in b.iter_mut().zip(scaled_scatter(f, n)) {
            *acc += v / b_infl.len() as f64;
        }
    }
    let contrib: Vec<Vec<f64>> =
        a.per_split.iter().map(|f| scaled_scatter(f, n).iter().zip(&b).map(|(x, y)| x - y).collect()).collect();
    let sig = block_sigma(&contrib, &membership(&a.per_split, n));
    let delta = DeltaVector { entries: a.per_split.iter().map(|f| f.h - b_theta).collect(), theta_b: b_theta };
    let test = one_sided_test(&delta.entries, &sig, n, cfg.alpha, cfg.mc_draws, cfg.seed, cfg.slack)?;
    Ok(DirectionalTest { delta, sigma_diag: sig.diag, test })
}

/// Both directional tests for two learners trained on the same splits.
pub fn compare_two_learners(
    mf: &dyn MomentFunction,
    h: &DeltaSpec,
    obs_a: &[SplitObs],
    obs_b: &[SplitObs],
    n: usize,
    cfg: &CompareConfig,
    tol_scale: f64,
) -> Result<TwoLearnerResult> {
    if obs_a.len() != obs_b.len() {
        return Err(Error::InvalidArgument("learners must share the split plan".into()));
    }
    let sa = split_influences(mf, h, obs_a, tol_scale)?;
    let sb = split_influences(mf, h, obs_b, tol_scale)?;
    let (ta, ia) = aggregate(mf, h, obs_a, tol_scale)?;
    let (tb, ib) = aggregate(mf, h, obs_b, tol_scale)?;
    Ok(TwoLearnerResult { a_vs_b: directional(&sa, tb, &ib, n, cfg)?, b_vs_a: directional(&sb, ta, &ia, n, cfg)? })
}

//! How much estimates and p-values move when the data are re-split.
//!
//! [`sigma_d_hat`] estimates the conditional spread of the t-statistic of a
//! variant-2 estimate across independent plans, and [`repro_measure`] turns
//! it into a p-value margin `delta_hat(beta)`.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{jacobian_hat, normal_ci, plan_inflation, sandwich, DeltaSpec};
use crate::learners::{train_all, Learner};
use crate::linalg::{inverse, Mat};
use crate::moments::{evaluate_splits, MomentFunction, SplitObs};
use crate::rng::{derive_seed, TAG_REPRO};
use crate::splits::{generate_plan, SplitPlan};
use crate::stats::{norm_cdf, norm_quantile, KahanVec};
use crate::zestim::{solve_obs, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproComponents {
    pub a_hat: Vec<f64>,
    pub v_hat_d2: f64,
    pub zeta_hat_d2: f64,
    pub rho_hat: f64,
    pub sigma_hat_d2: f64,
    /// `sigma_hat_d2` was negative from rounding and set to zero.
    pub clamped: bool,
    /// Entries `v_(i,j)` of the pooled `psi psi^T` average.
    pub v_entries: Vec<Vec<f64>>,
    /// `c_((i,j),(i',j'))` flattened as `((i*d + j)*d + i')*d + j'`.
    pub c_hat: Vec<f64>,
    /// `d_(i,(j,l))` flattened as `(i*d + j)*d + l`.
    pub d_hat: Vec<f64>,
    pub v_g: Vec<Vec<f64>>,
    pub h_hat: f64,
    pub tau: f64,
    pub sigma_eta: f64,
    pub inflation: f64,
    pub n: usize,
    pub m: usize,
}

type RepMoments = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Per-repetition averages of `Psi_s(theta)` and of `(1/|s|) sum psi psi^T`.
fn repetition_moments(
    mf: &dyn MomentFunction,
    obs: &[SplitObs],
    k: usize,
    theta: &[f64],
) -> Result<RepMoments> {
    let d = mf.dim();
    let per_split: Vec<(Vec<f64>, Vec<f64>)> = obs
        .par_iter()
        .map(|s| {
            if s.is_empty() {
                return Err(Error::EmptySubset);
            }
            let mut g = KahanVec::new(d);
            let mut q = KahanVec::new(d * d);
            let mut buf = vec![0.0; d];
            let mut outer = vec![0.0; d * d];
            for o in s {
                mf.psi(theta, o, &mut buf);
                for i in 0..d {
                    for j in 0..d {
                        outer[i * d + j] = buf[i] * buf[j];
                    }
                }
                g.add(&buf);
                q.add(&outer);
            }
            let w = 1.0 / s.len() as f64;
            Ok((g.total().iter().map(|v| v * w).collect(), q.total().iter().map(|v| v * w).collect()))
        })
        .collect::<Result<_>>()?;
    let mut gs = Vec::new();
    let mut qs = Vec::new();
    for rep in per_split.chunks(k) {
        let mut g = KahanVec::new(d);
        let mut q = KahanVec::new(d * d);
        for (a, b) in rep {
            g.add(a);
            q.add(b);
        }
        gs.push(g.total().iter().map(|v| v / rep.len() as f64).collect());
        qs.push(q.total().iter().map(|v| v / rep.len() as f64).collect());
    }
    Ok((gs, qs))
}

fn column_mean(v: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = KahanVec::new(v[0].len());
    for x in v {
        acc.add(x);
    }
    acc.total().iter().map(|s| s / v.len() as f64).collect()
}

/// Components of `sigma_D^2` at a variant-2 root `theta` for the null value `tau`.
pub fn sigma_d_hat(
    mf: &dyn MomentFunction,
    plan: &SplitPlan,
    obs: &[SplitObs],
    theta: &[f64],
    h: &DeltaSpec,
    tau: f64,
) -> Result<ReproComponents> {
    let d = mf.dim();
    h.validate(d)?;
    if obs.len() != plan.n_splits() {
        return Err(Error::InvalidArgument("observations do not match the plan".into()));
    }
    let jac = jacobian_hat(mf, obs, theta)?;
    let (gs, qs) = repetition_moments(mf, obs, plan.k, theta)?;
    let v = column_mean(&qs);
    let meat = Mat::from_row_slice(d, d, &v);
    let inflation = plan_inflation(plan);
    let sand = sandwich(&jac, &meat, inflation)?;
    let (sigma, _, _) = normal_ci(h, theta, &sand, plan.n, 0.05)?;
    let jinv = inverse(&jac).ok_or_else(|| Error::SingularJacobian("inverse failed".into()))?;
    let grad = h.grad(theta);
    let a: Vec<f64> = (0..d).map(|c| (0..d).map(|r| grad[r] * jinv[(r, c)]).sum()).collect();

    let m = gs.len() as f64;
    let gbar = column_mean(&gs);
    let mut v_g = vec![vec![0.0; d]; d];
    let mut c_hat = vec![0.0; d * d * d * d];
    let mut d_hat = vec![0.0; d * d * d];
    for (g, q) in gs.iter().zip(&qs) {
        let dg: Vec<f64> = g.iter().zip(&gbar).map(|(x, y)| x - y).collect();
        let dq: Vec<f64> = q.iter().zip(&v).map(|(x, y)| x - y).collect();
        for i in 0..d {
            for j in 0..d {
                v_g[i][j] += dg[i] * dg[j] / m;
            }
        }
        for p in 0..d * d {
            for r in 0..d * d {
                c_hat[p * d * d + r] += dq[p] * dq[r] / m;
            }
        }
        for i in 0..d {
            for p in 0..d * d {
                d_hat[i * d * d + p] += dg[i] * dq[p] / m;
            }
        }
    }

    let mut v2 = 0.0;
    for i in 0..d {
        for j in 0..d {
            v2 += a[i] * v_g[i][j] * a[j];
        }
    }
    v2 = (v2 / (sigma * sigma)).max(0.0);
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            for i2 in 0..d {
                for j2 in 0..d {
                    quad += a[i] * a[j] * a[i2] * a[j2] * c_hat[((i * d + j) * d + i2) * d + j2];
                }
            }
        }
    }
    let mut cube = 0.0;
    for i in 0..d {
        for j in 0..d {
            for l in 0..d {
                cube += a[i] * a[j] * a[l] * d_hat[(i * d + j) * d + l];
            }
        }
    }
    let hh = h.h(theta);
    let gap = hh - tau;
    let zeta2 = (0.25 * sigma.powi(-6) * gap * gap * inflation * inflation * quad).max(0.0);
    let rho = 0.5 * sigma.powi(-4) * gap * inflation * cube;
    let raw = 2.0 * (v2 + zeta2 + 2.0 * rho);
    let clamped = raw < 0.0;
    Ok(ReproComponents {
        a_hat: a,
        v_hat_d2: v2,
        zeta_hat_d2: zeta2,
        rho_hat: rho,
        sigma_hat_d2: raw.max(0.0),
        clamped,
        v_entries: v.chunks(d).map(|r| r.to_vec()).collect(),
        c_hat,
        d_hat,
        v_g,
        h_hat: hh,
        tau,
        sigma_eta: sigma,
        inflation,
        n: plan.n,
        m: plan.m,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestType {
    TwoSided,
    /// `p = Phi(t)`, paired with `delta^+`.
    Right,
    /// `p = Phi(-t)`, paired with `delta^-`.
    Left,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproMeasure {
    pub test_type: TestType,
    pub beta: f64,
    pub delta_hat: f64,
    pub p1: f64,
    pub t_stat: f64,
    pub kappa: f64,
    pub m: usize,
    pub n: usize,
}

/// p-value of the t-statistic `t = sqrt(n) (h - tau) / sigma`.
pub fn p_value(t: f64, test_type: TestType) -> f64 {
    match test_type {
        TestType::TwoSided => 2.0 * norm_cdf(-t.abs()),
        TestType::Right => norm_cdf(t),
        TestType::Left => norm_cdf(-t),
    }
}

/// `delta_hat(beta)` with `kappa = sqrt(n) sigma_D / sqrt(M)`.
#[allow(clippy::too_many_arguments)]
pub fn repro_measure(
    sigma_d: f64,
    h_hat: f64,
    tau: f64,
    sigma_eta: f64,
    n: usize,
    m: usize,
    beta: f64,
    test_type: TestType,
) -> Result<ReproMeasure> {
    if !(beta > 0.0 && beta < 0.5) {
        return Err(Error::InvalidArgument(format!("beta must lie in (0, 0.5), got {beta}")));
    }
    let t = (n as f64).sqrt() * (h_hat - tau) / sigma_eta;
    let kappa = (n as f64).sqrt() * sigma_d / (m as f64).sqrt();
    let delta = if kappa == 0.0 {
        0.0
    } else {
        match test_type {
            TestType::TwoSided => 2.0 * norm_cdf(-t.abs() - kappa * norm_quantile(beta / 2.0)) - 2.0 * norm_cdf(-t.abs()),
            TestType::Right => norm_cdf(t - kappa * norm_quantile(beta)) - norm_cdf(t),
            TestType::Left => norm_cdf(-t - kappa * norm_quantile(beta)) - norm_cdf(-t),
        }
    };
    Ok(ReproMeasure { test_type, beta, delta_hat: delta, p1: p_value(t, test_type), t_stat: t, kappa, m, n })
}

/// [`repro_measure`] from estimated components.
pub fn measure_from(c: &ReproComponents, beta: f64, test_type: TestType) -> Result<ReproMeasure> {
    repro_measure(c.sigma_hat_d2.sqrt(), c.h_hat, c.tau, c.sigma_eta, c.n, c.m, beta, test_type)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub m: usize,
    pub mean: f64,
    pub variance: f64,
    /// Monte Carlo standard error of `variance`.
    pub variance_se: f64,
}

/// Spread of `h(theta_hat)` across `reps` independent plans on fixed data,
/// for each number of repetitions in `m_list`.
#[allow(clippy::too_many_arguments)]
pub fn conditional_variance_curve(
    variant: Variant,
    mf: &dyn MomentFunction,
    learner: &dyn Learner,
    d: &Dataset,
    h: &DeltaSpec,
    k: usize,
    b: Option<usize>,
    m_list: &[usize],
    seed: u64,
    reps: usize,
) -> Result<Vec<VariancePoint>> {
    if variant == Variant::Two {
        return Err(Error::Unsupported("the variance curve covers variants 1 and 3".into()));
    }
    if reps < 2 {
        return Err(Error::InvalidArgument("need at least two plan draws".into()));
    }
    h.validate(mf.dim())?;
    m_list
        .iter()
        .map(|&m| {
            let vals = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let s = derive_seed(seed, &[TAG_REPRO, m as u64, r as u64]);
                    let plan = generate_plan(d.n(), m, k, b, s)?;
                    let models = train_all(&plan, d, learner, s)?;
                    let obs = evaluate_splits(&models, &plan, d)?;
                    Ok(h.h(&solve_obs(variant, mf, &plan, &obs, crate::zestim::DEFAULT_TOL)?.theta_hat))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = vals.iter().sum::<f64>() / reps as f64;
            let sq: Vec<f64> = vals.iter().map(|v| (v - mean).powi(2)).collect();
            let variance = sq.iter().sum::<f64>() / (reps - 1) as f64;
            let mq = sq.iter().sum::<f64>() / reps as f64;
            let var_sq = sq.iter().map(|s| (s - mq).powi(2)).sum::<f64>() / (reps - 1) as f64;
            Ok(VariancePoint { m, mean, variance, variance_se: (var_sq / reps as f64).sqrt() })
        })
        .collect()
}

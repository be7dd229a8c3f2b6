//! Sandwich variances, the variance-inflation factor and normal intervals.

use crate::error::{Error, Result};
use crate::linalg::{inverse, symmetrize, Mat};
use crate::moments::{MomentFunction, Obs, SplitObs};
use crate::splits::SplitPlan;
use crate::stats::{norm_quantile, KahanVec};
use crate::zestim::{pooled_jacobian, solve_obs, Variant, ZEstimate};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Scalar reduction `h(theta)` with its gradient.
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaSpec {
    /// `theta` itself; only for one-dimensional parameters.
    Identity,
    Coord(usize),
    /// `theta_i - theta_j`.
    Diff(usize, usize),
    Linear(Vec<f64>),
    /// User function; its gradient is taken by central differences.
    #[serde(skip)]
    Custom(ScalarFn),
}

impl fmt::Debug for DeltaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaSpec::Identity => write!(f, "Identity"),
            DeltaSpec::Coord(i) => write!(f, "Coord({i})"),
            DeltaSpec::Diff(i, j) => write!(f, "Diff({i}, {j})"),
            DeltaSpec::Linear(w) => write!(f, "Linear({w:?})"),
            DeltaSpec::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl DeltaSpec {
    pub fn validate(&self, d: usize) -> Result<()> {
        let ok = match self {
            DeltaSpec::Identity => d == 1,
            DeltaSpec::Coord(i) => *i < d,
            DeltaSpec::Diff(i, j) => *i < d && *j < d && i != j,
            DeltaSpec::Linear(w) => w.len() == d && w.iter().any(|v| *v != 0.0),
            DeltaSpec::Custom(_) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("reduction {self:?} does not fit a {d}-dimensional parameter")))
        }
    }

    pub fn h(&self, theta: &[f64]) -> f64 {
        match self {
            DeltaSpec::Identity => theta[0],
            DeltaSpec::Coord(i) => theta[*i],
            DeltaSpec::Diff(i, j) => theta[*i] - theta[*j],
            DeltaSpec::Linear(w) => w.iter().zip(theta).map(|(a, b)| a * b).sum(),
            DeltaSpec::Custom(f) => f(theta),
        }
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let d = theta.len();
        let mut g = vec![0.0; d];
        match self {
            DeltaSpec::Identity => g[0] = 1.0,
            DeltaSpec::Coord(i) => g[*i] = 1.0,
            DeltaSpec::Diff(i, j) => {
                g[*i] = 1.0;
                g[*j] = -1.0;
            }
            DeltaSpec::Linear(w) => g.copy_from_slice(w),
            DeltaSpec::Custom(f) => {
                let mut t = theta.to_vec();
                for c in 0..d {
                    let h = 1e-6 * (1.0 + theta[c].abs());
                    t[c] = theta[c] + h;
                    let up = f(&t);
                    t[c] = theta[c] - h;
                    let dn = f(&t);
                    t[c] = theta[c];
                    g[c] = (up - dn) / (2.0 * h);
                }
            }
        }
        g
    }
}

/// `1` for cross-fitting; `M^-1 (n/b + M - 1)` for repeated sample-splitting.
pub fn variance_inflation(m: usize, k: usize, b: usize, n: usize) -> f64 {
    if k > 1 {
        1.0
    } else {
        (n as f64 / b as f64 + m as f64 - 1.0) / m as f64
    }
}

pub fn plan_inflation(plan: &SplitPlan) -> f64 {
    variance_inflation(plan.m, plan.k, plan.b, plan.n)
}

fn groups(obs: &[SplitObs]) -> Vec<&[Obs]> {
    obs.iter().map(|s| s.as_slice()).collect()
}

/// Plug-in Jacobian: mean over splits of the within-split mean of `d psi / d theta`.
pub fn jacobian_hat(mf: &dyn MomentFunction, obs: &[SplitObs], theta: &[f64]) -> Result<Mat> {
    pooled_jacobian(mf, theta, &groups(obs))
}

/// Mean over splits of the within-split mean outer product `psi psi^T`.
pub fn meat(mf: &dyn MomentFunction, obs: &[SplitObs], theta: &[f64]) -> Result<Mat> {
    let d = mf.dim();
    let mut acc = KahanVec::new(d * d);
    let mut buf = vec![0.0; d];
    let mut outer = vec![0.0; d * d];
    for s in obs {
        if s.is_empty() {
            return Err(Error::EmptySubset);
        }
        let mut inner = KahanVec::new(d * d);
        for o in s {
            mf.psi(theta, o, &mut buf);
            for c in 0..d {
                for r in 0..d {
                    outer[c * d + r] = buf[r] * buf[c];
                }
            }
            inner.add(&outer);
        }
        let w = 1.0 / s.len() as f64;
        acc.add(&inner.total().iter().map(|v| v * w).collect::<Vec<_>>());
    }
    Ok(symmetrize(&(Mat::from_column_slice(d, d, &acc.total()) / obs.len() as f64)))
}

/// `V J^-1 meat J^-T`.
pub fn sandwich(jac: &Mat, meat: &Mat, inflation: f64) -> Result<Mat> {
    let d = jac.nrows();
    let scale = jac.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let det = jac.determinant();
    if !(det.abs() > 1e-12 * scale.powi(d as i32)) || scale == 0.0 {
        return Err(Error::SingularJacobian(format!("|det| = {:e}; the moment may converge faster than root-n", det.abs())));
    }
    let jinv = inverse(jac).ok_or_else(|| Error::SingularJacobian("inverse failed".into()))?;
    Ok(symmetrize(&(&jinv * meat * jinv.transpose() * inflation)))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub theta_hat: Vec<f64>,
    pub h_hat: f64,
    pub grad_h: Vec<f64>,
    pub jacobian_hat: Vec<Vec<f64>>,
    pub meat: Vec<Vec<f64>>,
    pub sandwich: Vec<Vec<f64>>,
    pub variance_inflation: f64,
    pub sigma_hat: f64,
    pub se: f64,
    pub ci: [f64; 2],
    pub alpha: f64,
    pub n: usize,
}

/// Normal interval `h(theta) +- z_{1-alpha/2} sigma / sqrt(n)` with
/// `sigma^2 = grad h V grad h^T`.
pub fn normal_ci(h: &DeltaSpec, theta: &[f64], v_hat: &Mat, n: usize, alpha: f64) -> Result<(f64, f64, [f64; 2])> {
    let g = h.grad(theta);
    let d = g.len();
    let mut s2 = 0.0;
    for a in 0..d {
        for b in 0..d {
            s2 += g[a] * v_hat[(a, b)] * g[b];
        }
    }
    if !(s2 > 0.0) || !s2.is_finite() {
        return Err(Error::ZeroVariance(format!("sigma^2 = {s2:e}")));
    }
    let sigma = s2.sqrt();
    let se = sigma / (n as f64).sqrt();
    let z = norm_quantile(1.0 - alpha / 2.0);
    let hh = h.h(theta);
    Ok((sigma, se, [hh - z * se, hh + z * se]))
}

/// Full plug-in report at `theta`.
pub fn report(
    mf: &dyn MomentFunction,
    plan: &SplitPlan,
    obs: &[SplitObs],
    theta: &[f64],
    h: &DeltaSpec,
    alpha: f64,
) -> Result<InferenceReport> {
    h.validate(mf.dim())?;
    let jac = jacobian_hat(mf, obs, theta)?;
    let mt = meat(mf, obs, theta)?;
    let infl = plan_inflation(plan);
    let v = sandwich(&jac, &mt, infl)?;
    let (sigma, se, ci) = normal_ci(h, theta, &v, plan.n, alpha)?;
    Ok(InferenceReport {
        theta_hat: theta.to_vec(),
        h_hat: h.h(theta),
        grad_h: h.grad(theta),
        jacobian_hat: rows(&jac),
        meat: rows(&mt),
        sandwich: rows(&v),
        variance_inflation: infl,
        sigma_hat: sigma,
        se,
        ci,
        alpha,
        n: plan.n,
    })
}

/// Solve a variant and attach its normal interval.
pub fn estimate(
    variant: Variant,
    mf: &dyn MomentFunction,
    plan: &SplitPlan,
    obs: &[SplitObs],
    h: &DeltaSpec,
    alpha: f64,
    tol_scale: f64,
) -> Result<(ZEstimate, InferenceReport)> {
    let z = solve_obs(variant, mf, plan, obs, tol_scale)?;
    let r = report(mf, plan, obs, &z.theta_hat, h, alpha)?;
    Ok((z, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inflation_values() {
        assert_eq!(variance_inflation(1, 1, 50, 100), 2.0);
        assert_eq!(variance_inflation(7, 3, 33, 100), 1.0);
        assert_eq!(variance_inflation(2, 1, 50, 100), 1.5);
    }

    #[test]
    fn identity_ci() {
        let (s, se, ci) = normal_ci(&DeltaSpec::Identity, &[0.0], &Mat::identity(1, 1), 100, 0.05).unwrap();
        assert_eq!((s, se), (1.0, 0.1));
        assert!((ci[1] - 0.195_996_398_454_005_4).abs() < 1e-12 && (ci[0] + ci[1]).abs() < 1e-15);
    }

    #[test]
    fn delta_method_difference() {
        let v = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]);
        let (s, _, _) = normal_ci(&DeltaSpec::Diff(0, 1), &[1.0, 0.0], &v, 1, 0.05).unwrap();
        assert!((s * s - (2.0 + 3.0 - 1.0)).abs() < 1e-12);
        let c = DeltaSpec::Custom(Arc::new(|t: &[f64]| t[0] * t[1]));
        let g = c.grad(&[2.0, 3.0]);
        assert!((g[0] - 3.0).abs() < 1e-6 && (g[1] - 2.0).abs() < 1e-6);
        assert!(DeltaSpec::Identity.validate(2).is_err());
        assert!(DeltaSpec::Diff(0, 0).validate(2).is_err());
    }

    #[test]
    fn sandwich_cases() {
        let v = sandwich(&-Mat::identity(1, 1), &Mat::from_element(1, 1, 4.0), 1.5).unwrap();
        assert_eq!(v[(0, 0)], 6.0);
        let v = sandwich(&Mat::identity(2, 2), &Mat::identity(2, 2), 2.0).unwrap();
        assert_eq!(v, Mat::identity(2, 2) * 2.0);
        assert!(matches!(sandwich(&Mat::zeros(1, 1), &Mat::identity(1, 1), 1.0), Err(Error::SingularJacobian(_))));
    }
}

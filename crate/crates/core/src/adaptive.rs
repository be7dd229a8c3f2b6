//! Adaptive interval for moments that may converge faster than root-n.
//!
//! A grid of candidate values `tau` is tested with either the normal p-value
//! `p_e` or a conservative p-value `p_c`, chosen per point by the gate
//! `a_n(tau) = 1{Psi_min(tau) Psi(tau) > gamma_n}`. Points with `p(tau) > alpha`
//! are kept. Only one-dimensional parameters are supported.

use crate::error::{Error, Result};
use crate::moments::{MomentFunction, Obs, SplitObs};
use crate::stats::{norm_cdf, KahanVec};
use crate::zestim::Variant;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

pub type PValueFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Conservative p-value used where the gate is closed.
#[derive(Clone, Default)]
pub enum PcPolicy {
    #[default]
    ConstantOne,
    User(PValueFn),
}

impl std::fmt::Debug for PcPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PcPolicy::ConstantOne => write!(f, "ConstantOne"),
            PcPolicy::User(_) => write!(f, "User"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptiveConfig {
    /// `gamma_n = c_gamma / n` unless `gamma_n` is set.
    pub c_gamma: f64,
    pub gamma_n: Option<f64>,
    pub p_c: PcPolicy,
    /// Explicit `(lo, hi)`; default is centred at the estimate.
    pub grid: Option<(f64, f64)>,
    pub points: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self { c_gamma: 1.0, gamma_n: None, p_c: PcPolicy::ConstantOne, grid: None, points: 2001 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub tau: f64,
    pub psi_min: f64,
    pub psi: f64,
    pub a_n: bool,
    pub p_e: f64,
    pub p_c: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveCI {
    /// Maximal kept segments, endpoints refined by bisection.
    pub segments: Vec<[f64; 2]>,
    /// Convex hull of the segments.
    pub hull: [f64; 2],
    /// The kept set reaches the grid edge where the gate is closed; the
    /// true set extends beyond the reported hull.
    pub unbounded: bool,
    pub widened: bool,
    pub gamma_n: f64,
    pub theta_hat: f64,
    pub se: f64,
    pub grid: Vec<GridPoint>,
}

/// Pooled moment evaluator for a scalar parameter.
struct Pooled<'a> {
    mf: &'a dyn MomentFunction,
    groups: Vec<&'a [Obs]>,
    /// `(1/G) sum_g mean f` when `psi = f - theta`.
    fbar: Option<f64>,
}

impl<'a> Pooled<'a> {
    fn new(mf: &'a dyn MomentFunction, obs: &'a [SplitObs]) -> Self {
        let groups: Vec<&[Obs]> = obs.iter().map(|s| s.as_slice()).collect();
        let mut buf = [0.0];
        let fbar = mf.average_part(&groups[0][0], &mut buf).then(|| {
            let mut acc = KahanVec::new(1);
            for g in &groups {
                let mut inner = KahanVec::new(1);
                for o in g.iter() {
                    mf.average_part(o, &mut buf);
                    inner.add(&buf);
                }
                acc.add(&[inner.total()[0] / g.len() as f64]);
            }
            acc.total()[0] / groups.len() as f64
        });
        Self { mf, groups, fbar }
    }

    fn at(&self, tau: f64) -> f64 {
        match self.fbar {
            Some(f) => f - tau,
            None => crate::moments::pooled(self.mf, &[tau], &self.groups).map_or(f64::NAN, |v| v[0]),
        }
    }
}

/// Gate at `tau`: `(Psi_min, Psi, a_n)`. For a scalar parameter both factors
/// equal the absolute pooled moment.
pub fn gate(mf: &dyn MomentFunction, obs: &[SplitObs], tau: f64, gamma_n: f64) -> Result<(f64, f64, bool)> {
    if mf.dim() != 1 {
        return Err(Error::Unsupported(format!("adaptive interval needs d = 1, `{}` has d = {}", mf.name(), mf.dim())));
    }
    let v = Pooled::new(mf, obs).at(tau).abs();
    Ok((v, v, v * v > gamma_n))
}

struct Evaluator<'a> {
    pooled: Pooled<'a>,
    theta: f64,
    sigma: f64,
    n: f64,
    gamma_n: f64,
    p_c: &'a PcPolicy,
}

impl Evaluator<'_> {
    fn point(&self, tau: f64) -> GridPoint {
        let v = self.pooled.at(tau).abs();
        let a_n = v * v > self.gamma_n;
        let p_e = if self.sigma > 0.0 {
            2.0 * norm_cdf(-(self.n.sqrt() * (self.theta - tau) / self.sigma).abs())
        } else {
            f64::from(u8::from(tau == self.theta))
        };
        let p_c = match self.p_c {
            PcPolicy::ConstantOne => 1.0,
            PcPolicy::User(f) => f(tau).clamp(0.0, 1.0),
        };
        let p = if a_n { p_e } else { p_c };
        GridPoint { tau, psi_min: v, psi: v, a_n, p_e, p_c, p }
    }
}

/// Grid-inverted adaptive interval around a scalar estimate `theta_hat`
/// with plug-in `sigma_hat` (so `SE = sigma_hat / sqrt(n)`).
pub fn adaptive_ci(
    mf: &dyn MomentFunction,
    obs: &[SplitObs],
    n: usize,
    theta_hat: f64,
    sigma_hat: f64,
    cfg: &AdaptiveConfig,
    alpha: f64,
) -> Result<AdaptiveCI> {
    if mf.dim() != 1 {
        return Err(Error::Unsupported(format!("adaptive interval needs d = 1, `{}` has d = {}", mf.name(), mf.dim())));
    }
    if obs.is_empty() || obs.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptySubset);
    }
    if cfg.points < 3 {
        return Err(Error::InvalidArgument("adaptive grid needs at least 3 points".into()));
    }
    let gamma_n = cfg.gamma_n.unwrap_or(cfg.c_gamma / n as f64);
    if !(gamma_n > 0.0) {
        return Err(Error::InvalidArgument("gamma_n must be positive".into()));
    }
    let se = sigma_hat / (n as f64).sqrt();
    let ev = Evaluator { pooled: Pooled::new(mf, obs), theta: theta_hat, sigma: sigma_hat, n: n as f64, gamma_n, p_c: &cfg.p_c };
    let (lo, hi) = match cfg.grid {
        Some(g) => g,
        None => {
            let mut half = 10.0 * se;
            if !(half > 0.0) {
                let (mn, mx) =
                    obs.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), o| (a.min(o.y), b.max(o.y)));
                half = 10.0 * (mx - mn) / (n as f64).sqrt();
            }
            // make room for the closed-gate neighbourhood of the estimate
            half = half.max(2.0 * gamma_n.sqrt());
            (theta_hat - half, theta_hat + half)
        }
    };
    let scan = |lo: f64, hi: f64| -> Vec<GridPoint> {
        let step = (hi - lo) / (cfg.points - 1) as f64;
        (0..cfg.points).into_par_iter().map(|i| ev.point(lo + step * i as f64)).collect()
    };
    let mut grid = scan(lo, hi);
    let mut widened = false;
    let touches = |g: &[GridPoint]| g[0].p > alpha || g[g.len() - 1].p > alpha;
    if touches(&grid) && cfg.grid.is_none() {
        let c = 0.5 * (lo + hi);
        let half = 5.0 * (hi - lo);
        grid = scan(c - half, c + half);
        widened = true;
    }
    let mut unbounded = false;
    if touches(&grid) {
        let edge_closed = [&grid[0], &grid[grid.len() - 1]].iter().any(|g| g.p > alpha && !g.a_n);
        if edge_closed {
            unbounded = true;
        } else {
            return Err(Error::GridTooNarrow);
        }
    }
    let tol = if se > 0.0 { 1e-4 * se } else { 1e-4 * (grid[1].tau - grid[0].tau) };
    let keep = |t: f64| ev.point(t).p > alpha;
    let refine = |mut inside: f64, mut outside: f64| -> f64 {
        while (outside - inside).abs() > tol {
            let mid = 0.5 * (inside + outside);
            if keep(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let mut segments = Vec::new();
    let mut i = 0;
    while i < grid.len() {
        if grid[i].p <= alpha {
            i += 1;
            continue;
        }
        let start = i;
        while i + 1 < grid.len() && grid[i + 1].p > alpha {
            i += 1;
        }
        let a = if start == 0 { grid[0].tau } else { refine(grid[start].tau, grid[start - 1].tau) };
        let b = if i + 1 == grid.len() { grid[i].tau } else { refine(grid[i].tau, grid[i + 1].tau) };
        segments.push([a, b]);
        i += 1;
    }
    if segments.is_empty() {
        // nothing kept on the grid: report the degenerate point estimate
        segments.push([theta_hat, theta_hat]);
    }
    let hull = [segments[0][0], segments[segments.len() - 1][1]];
    Ok(AdaptiveCI { segments, hull, unbounded, widened, gamma_n, theta_hat, se, grid })
}

/// The variant whose estimate should feed the interval by default.
pub const DEFAULT_VARIANT: Variant = Variant::Two;

//! Synthetic data generators and the Monte Carlo grid runner.
//!
//! Three generators are provided: a linear signal model, a Gaussian copula
//! that reproduces the margins and rank dependence of a base dataset, and a
//! randomized-trial generator with zero-inflated count outcomes whose
//! treatment effect may or may not be predictable from covariates.

use crate::compare::{compare_to_baseline, CompareConfig};
use crate::data::{Dataset, Propensity, Roles};
use crate::error::{Error, Result};
use crate::gates::{run_gates, GatesConfig};
use crate::inference::{estimate, DeltaSpec};
use crate::learners::{builtin, train_all, Learner, MeanLearner, ModelRef};
use crate::linalg::{cholesky_jitter, nearest_pd_correlation, Mat};
use crate::moments::{evaluate_splits, observations, Mse};
use crate::rng::{derive_seed, stream, StreamRng, TAG_SHUFFLE, TAG_SIM};
use crate::splits::generate_plan;
use crate::stats::{average_ranks, norm_cdf, norm_quantile};
use crate::zestim::{Variant, DEFAULT_TOL};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Discrete, DiscreteCDF, Poisson};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

/// Latent-normal draws `Z ~ N(0, sigma)`, one row per sample.
fn latent_draws(l: &Mat, n: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let d = l.nrows();
    let mut eps = vec![0.0; d];
    (0..n)
        .map(|_| {
            for e in eps.iter_mut() {
                *e = rng.sample(StandardNormal);
            }
            (0..d).map(|r| (0..=r).map(|c| l[(r, c)] * eps[c]).sum()).collect()
        })
        .collect()
}

fn pearson(cols: &[Vec<f64>]) -> Mat {
    let d = cols.len();
    let n = cols[0].len() as f64;
    let centred: Vec<Vec<f64>> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n;
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut s = Mat::identity(d, d);
    for a in 0..d {
        for b in a + 1..d {
            let r = centred[a].iter().zip(&centred[b]).map(|(x, y)| x * y).sum::<f64>() / (norms[a] * norms[b]);
            s[(a, b)] = r;
            s[(b, a)] = r;
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CopulaMode {
    #[default]
    Asis,
    /// Outcome-covariate latent correlations multiplied by 3, then repaired.
    Correlated,
    /// Outcome drawn independently as Bernoulli(`outcome_p`).
    Uncorrelated,
}

/// Gaussian copula over the columns of a base dataset (outcome first).
#[derive(Clone, Debug)]
pub struct CopulaDgp {
    names: Vec<String>,
    sorted: Vec<Vec<f64>>,
    sigma: Mat,
    chol: Mat,
    mode: CopulaMode,
    outcome_p: f64,
}

impl CopulaDgp {
    pub fn fit(base: &Dataset, mode: CopulaMode) -> Result<Self> {
        let mut names = vec![base.roles().outcome.clone()];
        let mut cols = vec![base.y().to_vec()];
        for (j, name) in base.roles().covariates.iter().enumerate() {
            names.push(name.clone());
            cols.push(base.covariate(j).to_vec());
        }
        let n = base.n() as f64;
        for (name, c) in names.iter().zip(&cols) {
            if c.iter().all(|&v| v == c[0]) {
                return Err(Error::InvalidArgument(format!("column `{name}` needs at least two distinct values")));
            }
        }
        let z: Vec<Vec<f64>> =
            cols.iter().map(|c| average_ranks(c).iter().map(|r| norm_quantile(r / (n + 1.0))).collect()).collect();
        let mut sigma = pearson(&z);
        if mode == CopulaMode::Correlated {
            for j in 1..sigma.nrows() {
                sigma[(0, j)] *= 3.0;
                sigma[(j, 0)] *= 3.0;
            }
        }
        let sigma = nearest_pd_correlation(&sigma, 1e-8).ok_or(Error::NotPositiveDefinite)?;
        let chol = cholesky_jitter(&sigma, 0.0).ok_or(Error::NotPositiveDefinite)?;
        let sorted = cols
            .into_iter()
            .map(|mut c| {
                c.sort_by(f64::total_cmp);
                c
            })
            .collect();
        Ok(Self { names, sorted, sigma, chol, mode, outcome_p: 0.07 })
    }

    pub fn with_outcome_p(mut self, p: f64) -> Self {
        self.outcome_p = p;
        self
    }

    pub fn sigma(&self) -> &Mat {
        &self.sigma
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Columns (outcome first) of `n` draws.
    pub fn sample_columns(&self, n: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
        let z = latent_draws(&self.chol, n, rng);
        let mut cols: Vec<Vec<f64>> = (0..self.sorted.len())
            .map(|j| z.iter().map(|row| type1_inverse(&self.sorted[j], norm_cdf(row[j]))).collect())
            .collect();
        if self.mode == CopulaMode::Uncorrelated {
            cols[0] = (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < self.outcome_p))).collect();
        }
        cols
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = stream(seed, &[TAG_SIM]);
        let cols = self.sample_columns(n, &mut rng);
        let covs: Vec<&str> = self.names[1..].iter().map(|s| s.as_str()).collect();
        Dataset::from_columns(self.names.clone(), cols, Roles::new(&self.names[0], &covs))
    }
}

/// `inf{t : F(t) >= u}` for the empirical CDF of `sorted`.
fn type1_inverse(sorted: &[f64], u: f64) -> f64 {
    crate::stats::type1_quantile(sorted, u)
}

/// Fixed latent correlation of the synthetic base (outcome, x1..x8).
const BASE_CORR: [(usize, usize, f64); 9] =
    [(0, 1, 0.45), (0, 2, 0.25), (0, 4, 0.2), (0, 6, -0.15), (1, 2, 0.3), (3, 5, 0.2), (6, 7, 0.25), (2, 8, -0.2), (4, 8, 0.15)];

fn poisson_quantile(lambda: f64, u: f64) -> f64 {
    Poisson::new(lambda).map(|p| p.inverse_cdf(u.clamp(1e-12, 1.0 - 1e-12)) as f64).unwrap_or(0.0)
}

/// Base dataset with a zero-inflated count outcome `y` and eight covariates
/// with mixed margins: normal, log-normal, Bernoulli(0.4), Poisson(2),
/// uniform, exponential, three-level categorical, normal.
pub fn synthetic_base(n: usize, seed: u64) -> Result<Dataset> {
    let mut s = Mat::identity(9, 9);
    for &(a, b, r) in &BASE_CORR {
        s[(a, b)] = r;
        s[(b, a)] = r;
    }
    let l = cholesky_jitter(&s, 0.0).ok_or(Error::NotPositiveDefinite)?;
    let mut rng = stream(seed, &[TAG_SIM, 0]);
    let z = latent_draws(&l, n, &mut rng);
    let col = |j: usize, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { z.iter().map(|r| f(r[j], norm_cdf(r[j]))).collect() };
    let cols = vec![
        col(0, &|_, u| if u < 0.5 { 0.0 } else { 1.0 + poisson_quantile(4.0, (u - 0.5) / 0.5) }),
        col(1, &|z, _| z),
        col(2, &|z, _| (0.5 * z).exp()),
        col(3, &|_, u| f64::from(u8::from(u > 0.6))),
        col(4, &|_, u| poisson_quantile(2.0, u)),
        col(5, &|_, u| u),
        col(6, &|_, u| -(1.0 - u).ln()),
        col(7, &|_, u| {
            if u < 0.3 {
                0.0
            } else if u < 0.7 {
                1.0
            } else {
                2.0
            }
        }),
        col(8, &|z, _| z),
    ];
    let mut names = vec!["y".to_string()];
    names.extend((1..=8).map(|j| format!("x{j}")));
    let covs: Vec<&str> = names[1..].iter().map(|s| s.as_str()).collect();
    Dataset::from_columns(names.clone(), cols, Roles::new("y", &covs))
}

/// `y = beta . x + noise * eps` with independent standard normal covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearDgp {
    pub beta: Vec<f64>,
    pub noise_sd: f64,
}

impl Default for LinearDgp {
    fn default() -> Self {
        Self { beta: vec![1.0], noise_sd: 1.0 }
    }
}

impl LinearDgp {
    // Draws are taken row by row so a sample is a prefix of any larger one.
    #[allow(clippy::needless_range_loop)]
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = stream(seed, &[TAG_SIM]);
        let p = self.beta.len();
        let mut cols = vec![vec![0.0; n]; p + 1];
        for i in 0..n {
            let mut y = 0.0;
            for j in 0..p {
                let x: f64 = rng.sample(StandardNormal);
                cols[j + 1][i] = x;
                y += self.beta[j] * x;
            }
            let e: f64 = rng.sample(StandardNormal);
            cols[0][i] = y + self.noise_sd * e;
        }
        let mut names = vec!["y".to_string()];
        names.extend((1..=p).map(|j| format!("x{j}")));
        let covs: Vec<&str> = names[1..].iter().map(|s| s.as_str()).collect();
        Dataset::from_columns(names.clone(), cols, Roles::new("y", &covs))
    }
}

/// Coefficients of the outcome mechanism on standardized covariates.
/// Each vector is `[intercept, x1, ..., xp]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HteParams {
    /// Logit of `P(Y = 0)`.
    pub logit_base: Vec<f64>,
    /// Treatment shift of that logit.
    pub logit_treat: Vec<f64>,
    /// Log-mean of the count component.
    pub pois_base: Vec<f64>,
    pub pois_treat: Vec<f64>,
    /// Multiplier on `logit_treat`.
    pub treat_mult: f64,
    /// Multiplier on the count mean inside the effect probability.
    pub mean_mult: f64,
}

impl Default for HteParams {
    fn default() -> Self {
        Self::strong()
    }
}

impl HteParams {
    /// Treatment leaves both components unchanged.
    pub fn none() -> Self {
        Self { logit_treat: vec![0.0], pois_treat: vec![0.0], ..Self::strong() }
    }

    /// Effect concentrated on rows with large `x1`.
    pub fn strong() -> Self {
        Self {
            logit_base: vec![0.0, -0.5],
            logit_treat: vec![-0.3, -1.0],
            pois_base: vec![1.5, 0.2],
            pois_treat: vec![0.5, 0.8],
            treat_mult: 4.0,
            mean_mult: 0.05,
        }
    }

    fn lin(c: &[f64], x: &[f64]) -> f64 {
        c.first().copied().unwrap_or(0.0) + c.iter().skip(1).zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    fn pi(&self, x: &[f64], d: f64) -> f64 {
        let eta = Self::lin(&self.logit_base, x) + d * self.treat_mult * Self::lin(&self.logit_treat, x);
        1.0 / (1.0 + (-eta).exp())
    }

    fn lambda(&self, x: &[f64], d: f64) -> f64 {
        (Self::lin(&self.pois_base, x) + d * Self::lin(&self.pois_treat, x)).exp().min(1e6)
    }

    /// `P(Y(1) != Y(0) | x, y0) = clamp(q_1 - q_0, 0, 1)` with
    /// `q_d = (1 - pi_d(x)) P(Pois(mean_mult lambda_d(x)) >= y0 + 1)`.
    pub fn effect_prob(&self, x: &[f64], y0: f64) -> f64 {
        let q = |d: f64| (1.0 - self.pi(x, d)) * poisson_tail(self.mean_mult * self.lambda(x, d), y0 as u64 + 1);
        (q(1.0) - q(0.0)).clamp(0.0, 1.0)
    }

    /// `E[Y(1) - Y(0) | x, y0]`.
    pub fn expected_effect(&self, x: &[f64], y0: f64) -> f64 {
        let p = self.effect_prob(x, y0);
        if p == 0.0 {
            return 0.0;
        }
        let lam = self.lambda(x, 1.0);
        let k = y0 as u64 + 1;
        let tail = poisson_tail(lam, k);
        let mean_above = if tail > 1e-300 { lam * poisson_tail(lam, k - 1) / tail } else { k as f64 };
        p * (mean_above - y0)
    }
}

/// `P(Pois(lambda) >= k)`.
fn poisson_tail(lambda: f64, k: u64) -> f64 {
    if k == 0 || lambda <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    Poisson::new(lambda).map(|p| p.sf(k - 1)).unwrap_or(0.0)
}

/// Draw from `Pois(lambda)` conditioned on being at least `k`.
fn truncated_poisson(lambda: f64, k: u64, rng: &mut StreamRng) -> f64 {
    let tail = poisson_tail(lambda, k);
    let Ok(p) = Poisson::new(lambda) else { return k as f64 };
    if tail < 1e-300 {
        return k as f64;
    }
    let target = rng.random::<f64>() * tail;
    let mut acc = 0.0;
    let mut x = k;
    while x < k + 100_000 {
        acc += p.pmf(x);
        if acc >= target {
            return x as f64;
        }
        x += 1;
    }
    x as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HteMode {
    #[default]
    Predictable,
    /// Treatment labels permuted after the outcomes are generated.
    Shuffled,
}

/// Randomized trial: covariates and `Y(0)` from a copula, treatment
/// Bernoulli(0.5), `Y(1)` from the effect mechanism of [`HteParams`].
#[derive(Clone, Debug)]
pub struct HteDgp {
    pub copula: CopulaDgp,
    pub params: HteParams,
    pub mode: HteMode,
    means: Vec<f64>,
    sds: Vec<f64>,
}

/// Simulated trial with the per-row expected effect kept for oracles.
pub struct HteSample {
    pub data: Dataset,
    pub cate: Vec<f64>,
}

impl HteDgp {
    pub fn new(base: &Dataset, params: HteParams, mode: HteMode) -> Result<Self> {
        let copula = CopulaDgp::fit(base, CopulaMode::Asis)?;
        let (means, sds) = (0..base.n_covariates())
            .map(|j| {
                let c = base.covariate(j);
                let m = crate::stats::mean(c);
                (m, crate::stats::variance(c, 1).sqrt().max(1e-12))
            })
            .unzip();
        Ok(Self { copula, params, mode, means, sds })
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<HteSample> {
        let mut rng = stream(seed, &[TAG_SIM]);
        let cols = self.copula.sample_columns(n, &mut rng);
        let p = cols.len() - 1;
        let mut t: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.5))).collect();
        let mut y = vec![0.0; n];
        let mut cate = vec![0.0; n];
        let mut xs = vec![0.0; p];
        for i in 0..n {
            for j in 0..p {
                xs[j] = (cols[j + 1][i] - self.means[j]) / self.sds[j];
            }
            let y0 = cols[0][i];
            cate[i] = self.params.expected_effect(&xs, y0);
            let y1 = if rng.random::<f64>() < self.params.effect_prob(&xs, y0) {
                truncated_poisson(self.params.lambda(&xs, 1.0), y0 as u64 + 1, &mut rng)
            } else {
                y0
            };
            y[i] = if t[i] == 1.0 { y1 } else { y0 };
        }
        if self.mode == HteMode::Shuffled {
            t.shuffle(&mut stream(seed, &[TAG_SHUFFLE]));
        }
        let mut names = vec!["y".to_string(), "t".to_string()];
        names.extend(self.copula.names()[1..].iter().cloned());
        let mut all = vec![y, t];
        all.extend(cols.into_iter().skip(1));
        let covs: Vec<&str> = names[2..].iter().map(|s| s.as_str()).collect();
        let mut roles = Roles::new("y", &covs);
        roles.treatment = Some("t".into());
        roles.propensity = Some(Propensity::Constant(0.5));
        Ok(HteSample { data: Dataset::from_columns(names.clone(), all, roles)?, cate })
    }
}

/// Generator selected by a grid file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DgpSpec {
    Linear {
        #[serde(default = "default_beta")]
        beta: Vec<f64>,
        #[serde(default = "one")]
        noise_sd: f64,
    },
    Copula {
        #[serde(default)]
        mode: CopulaMode,
        #[serde(default = "default_base_n")]
        base_n: usize,
        #[serde(default)]
        base_seed: u64,
    },
    Hte {
        #[serde(default)]
        params: HteParams,
        #[serde(default)]
        mode: HteMode,
        #[serde(default = "default_base_n")]
        base_n: usize,
        #[serde(default)]
        base_seed: u64,
    },
}

fn default_beta() -> Vec<f64> {
    vec![1.0]
}
fn one() -> f64 {
    1.0
}
fn default_base_n() -> usize {
    2000
}

/// A generator ready to sample.
pub enum Generator {
    Linear(LinearDgp),
    Copula(CopulaDgp),
    Hte(HteDgp),
}

impl DgpSpec {
    pub fn build(&self) -> Result<Generator> {
        Ok(match self {
            DgpSpec::Linear { beta, noise_sd } => Generator::Linear(LinearDgp { beta: beta.clone(), noise_sd: *noise_sd }),
            DgpSpec::Copula { mode, base_n, base_seed } => {
                Generator::Copula(CopulaDgp::fit(&synthetic_base(*base_n, *base_seed)?, *mode)?)
            }
            DgpSpec::Hte { params, mode, base_n, base_seed } => {
                Generator::Hte(HteDgp::new(&synthetic_base(*base_n, *base_seed)?, params.clone(), *mode)?)
            }
        })
    }

    fn label(&self) -> &'static str {
        match self {
            DgpSpec::Linear { .. } => "linear",
            DgpSpec::Copula { .. } => "copula",
            DgpSpec::Hte { .. } => "hte",
        }
    }
}

impl Generator {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        match self {
            Generator::Linear(g) => g.sample(n, seed),
            Generator::Copula(g) => g.sample(n, seed),
            Generator::Hte(g) => Ok(g.sample(n, seed)?.data),
        }
    }
}

/// `(1/S) sum_s mean over fresh rows of (y - eta_s(x))^2`.
pub fn fresh_mse(models: &[ModelRef], fresh: &Dataset) -> Result<f64> {
    let rows: Vec<usize> = (0..fresh.n()).collect();
    let per = models
        .par_iter()
        .map(|m| {
            Ok(observations(m.as_ref(), fresh, &rows)?.iter().map(|o| (o.y - o.eta).powi(2)).sum::<f64>() / rows.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Variant-2 MSE with its normal interval, scored against a fresh-draw oracle.
    Estimate,
    /// One-sided test of the learner against the full-sample mean.
    Compare,
    /// Ensemble GATES top-minus-bottom p-value.
    Gates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub dgp: DgpSpec,
    pub n: Vec<usize>,
    pub m: usize,
    pub k: Vec<usize>,
    pub methods: Vec<Method>,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_learner")]
    pub learner: String,
    #[serde(default = "default_oracle_draws")]
    pub oracle_draws: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_mc")]
    pub mc_draws: usize,
}

fn default_learner() -> String {
    "ols".into()
}
fn default_oracle_draws() -> usize {
    20_000
}
fn default_alpha() -> f64 {
    0.05
}
fn default_mc() -> usize {
    20_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: usize,
    pub dgp: String,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub method: Method,
    pub iteration: usize,
    pub seed: u64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: Option<bool>,
    pub oracle: Option<f64>,
    pub covered: Option<bool>,
}

/// A `(cell, iteration)` that returned an error; it has no CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub cell: usize,
    pub iteration: usize,
    pub error: String,
}

impl GridRow {
    fn key(&self) -> (usize, usize) {
        (self.cell, self.iteration)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub n: usize,
    pub k: usize,
    pub method: Method,
    pub rows: usize,
    pub failures: usize,
    pub coverage: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub mean_estimate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub grid: ExperimentGrid,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<GridFailure>,
    pub computed: usize,
    pub resumed: usize,
}

struct Cell {
    id: usize,
    n: usize,
    k: usize,
    method: Method,
}

fn cells(grid: &ExperimentGrid) -> Vec<Cell> {
    let mut out = Vec::new();
    for &n in &grid.n {
        for &k in &grid.k {
            for &method in &grid.methods {
                out.push(Cell { id: out.len(), n, k, method });
            }
        }
    }
    out
}

fn run_one(
    grid: &ExperimentGrid,
    gen: &Generator,
    learner: &dyn Learner,
    cell: &Cell,
    it: usize,
) -> std::result::Result<GridRow, GridFailure> {
    let seed = derive_seed(grid.seed, &[TAG_SIM, cell.id as u64, it as u64]);
    let mut row = GridRow {
        cell: cell.id,
        dgp: grid.dgp.label().into(),
        n: cell.n,
        k: cell.k,
        m: grid.m,
        method: cell.method,
        iteration: it,
        seed,
        estimate: None,
        se: None,
        ci_lo: None,
        ci_hi: None,
        p_value: None,
        reject: None,
        oracle: None,
        covered: None,
    };
    fill_row(grid, gen, learner, cell, seed, &mut row).map(|_| row).map_err(|e| GridFailure {
        cell: cell.id,
        iteration: it,
        error: e.to_string(),
    })
}

fn fill_row(
    grid: &ExperimentGrid,
    gen: &Generator,
    learner: &dyn Learner,
    cell: &Cell,
    seed: u64,
    row: &mut GridRow,
) -> Result<()> {
    let d = gen.sample(cell.n, derive_seed(seed, &[1]))?;
    match cell.method {
        Method::Estimate | Method::Compare => {
            let plan = generate_plan(cell.n, grid.m, cell.k, None, derive_seed(seed, &[2]))?;
            let models = train_all(&plan, &d, learner, derive_seed(seed, &[3]))?;
            let obs = evaluate_splits(&models, &plan, &d)?;
            let (_, rep) = estimate(Variant::Two, &Mse, &plan, &obs, &DeltaSpec::Identity, grid.alpha, DEFAULT_TOL)?;
            if cell.method == Method::Estimate {
                let fresh = gen.sample(grid.oracle_draws, derive_seed(seed, &[4]))?;
                let oracle = fresh_mse(&models.models, &fresh)?;
                row.estimate = Some(rep.h_hat);
                row.se = Some(rep.se);
                row.ci_lo = Some(rep.ci[0]);
                row.ci_hi = Some(rep.ci[1]);
                row.oracle = Some(oracle);
                row.covered = Some(rep.ci[0] <= oracle && oracle <= rep.ci[1]);
            } else {
                let all: Vec<usize> = (0..cell.n).collect();
                let base = MeanLearner.train(&d, &all, 0)?;
                let base_obs = observations(base.as_ref(), &d, &all)?;
                let cfg = CompareConfig { alpha: grid.alpha, mc_draws: grid.mc_draws, seed: derive_seed(seed, &[5]), slack: 0.0 };
                let r = compare_to_baseline(
                    &Mse,
                    &DeltaSpec::Identity,
                    &obs,
                    &base_obs,
                    rep.h_hat,
                    rep.sigma_hat,
                    &cfg,
                    DEFAULT_TOL,
                    false,
                )?;
                row.estimate = Some(r.difference);
                row.se = Some(r.sigma_delta / (cell.n as f64).sqrt());
                row.ci_lo = Some(r.ci_final[0]);
                row.ci_hi = Some(r.ci_final[1]);
                row.reject = Some(r.test.reject);
            }
        }
        Method::Gates => {
            let cfg = GatesConfig {
                m: grid.m,
                k: cell.k,
                alpha: grid.alpha,
                seed: derive_seed(seed, &[2]),
                mc_draws: grid.mc_draws,
                ..Default::default()
            };
            let r = run_gates(&cfg, &[learner], &d)?;
            row.estimate = Some(r.gates.delta_hat);
            row.se = Some(r.gates.delta_se);
            row.ci_lo = Some(r.gates.ci[0]);
            row.ci_hi = Some(r.gates.ci[1]);
            row.p_value = Some(r.gates.p_one_sided);
            row.reject = Some(r.gates.p_one_sided < grid.alpha);
        }
    }
    Ok(())
}

const CSV_NAME: &str = "results.csv";
const SUMMARY_NAME: &str = "summary.json";

fn read_existing(path: &Path) -> Result<Vec<GridRow>> {
    if !path.exists() {
        return Ok(vec![]);
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<GridRow>, _>>()?)
}

fn summarize(grid: &ExperimentGrid, rows: &[GridRow], failures: &[GridFailure]) -> Vec<CellSummary> {
    let mut by: BTreeMap<usize, Vec<&GridRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.cell).or_default().push(r);
    }
    cells(grid)
        .iter()
        .map(|c| {
            let rs = by.remove(&c.id).unwrap_or_default();
            let ok = &rs;
            let rate = |f: &dyn Fn(&GridRow) -> Option<bool>| {
                let v: Vec<bool> = ok.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64)
            };
            let est: Vec<f64> = ok.iter().filter_map(|r| r.estimate).collect();
            CellSummary {
                cell: c.id,
                n: c.n,
                k: c.k,
                method: c.method,
                rows: rs.len(),
                failures: failures.iter().filter(|f| f.cell == c.id).count(),
                coverage: rate(&|r| r.covered),
                rejection_rate: rate(&|r| r.reject),
                mean_estimate: (!est.is_empty()).then(|| est.iter().sum::<f64>() / est.len() as f64),
            }
        })
        .collect()
}

/// Run every `(cell, iteration)` missing from `out_dir/results.csv`, then
/// rewrite the CSV in `(cell, iteration)` order and write `summary.json`.
/// Failed iterations get no row; they are listed in the summary and retried
/// on the next run.
pub fn run_grid(grid: &ExperimentGrid, out_dir: &Path) -> Result<GridSummary> {
    if grid.iterations == 0 || grid.n.is_empty() || grid.k.is_empty() || grid.methods.is_empty() {
        return Err(Error::InvalidArgument("grid needs iterations, n, k and methods".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join(CSV_NAME);
    let mut done: BTreeMap<(usize, usize), GridRow> = read_existing(&csv_path)?.into_iter().map(|r| (r.key(), r)).collect();
    let resumed = done.len();
    let gen = grid.dgp.build()?;
    let learner: Arc<dyn Learner> = Arc::from(builtin(&grid.learner)?);
    let todo: Vec<(usize, usize)> =
        cells(grid).iter().flat_map(|c| (0..grid.iterations).map(move |i| (c.id, i))).filter(|k| !done.contains_key(k)).collect();
    let all_cells = cells(grid);
    let fresh: Vec<_> = todo.par_iter().map(|&(c, i)| run_one(grid, &gen, learner.as_ref(), &all_cells[c], i)).collect();
    let computed = fresh.len();
    let mut failures = Vec::new();
    for r in fresh {
        match r {
            Ok(r) => {
                done.insert(r.key(), r);
            }
            Err(f) => failures.push(f),
        }
    }
    let rows: Vec<GridRow> = done.into_values().collect();
    let mut w = csv::WriterBuilder::new().from_writer(vec![]);
    for r in &rows {
        w.serialize(CsvRow::from(r))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::cli::write_atomic(&csv_path, &bytes)?;
    let summary = GridSummary { grid: grid.clone(), cells: summarize(grid, &rows, &failures), failures, computed, resumed };
    let json = crate::cli::to_json_string(&serde_json::to_value(&summary)?);
    crate::cli::write_atomic(&out_dir.join(SUMMARY_NAME), json.as_bytes())?;
    Ok(summary)
}

/// CSV layout of [`GridRow`] with fixed float formatting.
#[derive(Serialize)]
struct CsvRow<'a> {
    cell: usize,
    dgp: &'a str,
    n: usize,
    k: usize,
    m: usize,
    method: Method,
    iteration: usize,
    seed: u64,
    estimate: Option<String>,
    se: Option<String>,
    ci_lo: Option<String>,
    ci_hi: Option<String>,
    p_value: Option<String>,
    reject: Option<bool>,
    oracle: Option<String>,
    covered: Option<bool>,
}

impl<'a> From<&'a GridRow> for CsvRow<'a> {
    fn from(r: &'a GridRow) -> Self {
        let f = |v: Option<f64>| v.map(crate::cli::format_float);
        CsvRow {
            cell: r.cell,
            dgp: &r.dgp,
            n: r.n,
            k: r.k,
            m: r.m,
            method: r.method,
            iteration: r.iteration,
            seed: r.seed,
            estimate: f(r.estimate),
            se: f(r.se),
            ci_lo: f(r.ci_lo),
            ci_hi: f(r.ci_hi),
            p_value: f(r.p_value),
            reject: r.reject,
            oracle: f(r.oracle),
            covered: r.covered,
        }
    }
}

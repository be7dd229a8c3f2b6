//! Sorted group average treatment effects from an ensemble of learners.
//!
//! Each learner is used as a T-learner: one model on treated and one on
//! control training rows, the predicted effect being the difference. The A
//! out-of-fold effect predictions are combined with weights calibrated on
//! a second fold partition, rows are sorted into J groups within each
//! training fold, and a single weighted regression on the full sample gives
//! the group effects.

use crate::compare::{block_sigma, one_sided_test, TestOutcome, DEFAULT_MC_DRAWS};
use crate::data::{Dataset, RowIndexSet};
use crate::error::{Error, Result};
use crate::learners::{Learner, ModelRef};
use crate::linalg::{wls, Mat, Vect};
use crate::rng::{derive_seed, TAG_CALIB, TAG_MODEL};
use crate::splits::generate_plan;
use crate::stats::{median, norm_cdf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Ridge used when a calibration or GATES design is rank deficient.
pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GatesConfig {
    pub m: usize,
    /// Training folds.
    pub k: usize,
    /// Calibration folds.
    pub l: usize,
    /// Number of groups.
    pub j: usize,
    /// Extra control columns; an intercept and a non-constant propensity
    /// are always included.
    pub controls: Vec<String>,
    pub alpha: f64,
    pub seed: u64,
    pub mc_draws: usize,
}

impl Default for GatesConfig {
    fn default() -> Self {
        Self { m: 20, k: 3, l: 3, j: 3, controls: vec![], alpha: 0.05, seed: 0, mc_draws: DEFAULT_MC_DRAWS }
    }
}

impl GatesConfig {
    fn validate(&self, a: usize) -> Result<()> {
        if a == 0 {
            return Err(Error::EmptyModelList);
        }
        if self.m == 0 {
            return Err(Error::InvalidRepetitions(0));
        }
        if self.j < 2 || self.k < 2 || self.l < 2 {
            return Err(Error::InvalidArgument("GATES needs J, K, L >= 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Treatment, propensity and control design of a randomized trial.
struct Trial {
    t: Vec<f64>,
    p: Vec<f64>,
    /// Control columns excluding the intercept.
    z: Vec<Vec<f64>>,
}

impl Trial {
    fn new(d: &Dataset, controls: &[String]) -> Result<Self> {
        let t = d.treatment().ok_or_else(|| Error::InvalidArgument("GATES needs a treatment column".into()))?.to_vec();
        if !d.has_propensity() {
            return Err(Error::InvalidArgument("GATES needs a propensity score".into()));
        }
        let p: Vec<f64> = (0..d.n()).map(|i| d.propensity(i).unwrap_or(f64::NAN)).collect();
        let mut z = Vec::new();
        if p.iter().any(|&v| v != p[0]) {
            z.push(p.clone());
        }
        for c in controls {
            z.push(d.column(c)?.to_vec());
        }
        Ok(Self { t, p, z })
    }

    fn weight(&self, i: usize) -> f64 {
        1.0 / (self.p[i] * (1.0 - self.p[i]))
    }

    fn resid_t(&self, i: usize) -> f64 {
        self.t[i] - self.p[i]
    }
}

/// Rows of a design: intercept, `extra(i)` columns, then controls.
fn design(trial: &Trial, rows: &[usize], extra: usize, fill: impl Fn(usize, &mut [f64])) -> Mat {
    let p = 1 + extra + trial.z.len();
    let mut x = Mat::zeros(rows.len(), p);
    let mut buf = vec![0.0; extra];
    for (r, &i) in rows.iter().enumerate() {
        x[(r, 0)] = 1.0;
        fill(i, &mut buf);
        for (c, v) in buf.iter().enumerate() {
            x[(r, 1 + c)] = *v;
        }
        for (c, col) in trial.z.iter().enumerate() {
            x[(r, 1 + extra + c)] = col[i];
        }
    }
    x
}

fn fit(trial: &Trial, y: &[f64], rows: &[usize], x: &Mat) -> Result<crate::linalg::WlsFit> {
    let yv = Vect::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
    let wv = Vect::from_iterator(rows.len(), rows.iter().map(|&i| trial.weight(i)));
    wls(x, &yv, &wv, RIDGE_FALLBACK).ok_or_else(|| Error::InvalidArgument("weighted regression has too few rows".into()))
}

/// T-learner effect predictions for `eval` from models trained on `train`.
fn t_learner(
    learners: &[&dyn Learner],
    d: &Dataset,
    trial: &Trial,
    train: &[usize],
    eval: &[usize],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (treated, control): (Vec<usize>, Vec<usize>) = train.iter().partition(|&&i| trial.t[i] == 1.0);
    if treated.len() < 2 || control.len() < 2 {
        return Err(Error::InvalidArgument("training fold needs at least two treated and two control rows".into()));
    }
    learners
        .iter()
        .map(|l| {
            let m1: ModelRef = l.train(d, &treated, derive_seed(seed, &[1]))?;
            let m0: ModelRef = l.train(d, &control, derive_seed(seed, &[0]))?;
            let p1 = m1.predict_many(d, eval)?;
            let p0 = m0.predict_many(d, eval)?;
            Ok(p1.iter().zip(&p0).map(|(a, b)| a - b).collect())
        })
        .collect()
}

/// Out-of-fold and calibrated effect predictions of one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionPredictions {
    pub folds: Vec<RowIndexSet>,
    pub calibration_folds: Vec<RowIndexSet>,
    /// `tau_a[a][i]`, out of fold.
    pub tau_a: Vec<Vec<f64>>,
    /// `beta[l][a]`.
    pub beta: Vec<Vec<f64>>,
    pub tau: Vec<f64>,
    pub ridge_fallback: bool,
}

/// Out-of-fold T-learner predictions and calibrated ensemble effects for
/// every repetition.
pub fn ensemble_predict(cfg: &GatesConfig, learners: &[&dyn Learner], d: &Dataset) -> Result<Vec<RepetitionPredictions>> {
    cfg.validate(learners.len())?;
    let trial = Trial::new(d, &cfg.controls)?;
    let n = d.n();
    let plan = generate_plan(n, cfg.m, cfg.k, None, cfg.seed)?;
    let cal = generate_plan(n, cfg.m, cfg.l, None, derive_seed(cfg.seed, &[TAG_CALIB]))?;
    let a_count = learners.len();
    (0..cfg.m)
        .into_par_iter()
        .map(|m| {
            let folds = plan.repetitions[m].clone();
            let per_fold = folds
                .par_iter()
                .enumerate()
                .map(|(k, f)| {
                    let train = f.complement(n);
                    let seed = derive_seed(cfg.seed, &[TAG_MODEL, m as u64, k as u64]);
                    t_learner(learners, d, &trial, train.as_slice(), f.as_slice(), seed).map_err(|e| Error::LearnerFailure {
                        m,
                        k,
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tau_a = vec![vec![0.0; n]; a_count];
            for (f, preds) in folds.iter().zip(&per_fold) {
                for a in 0..a_count {
                    for (&i, &v) in f.as_slice().iter().zip(&preds[a]) {
                        tau_a[a][i] = v;
                    }
                }
            }
            let calibration_folds = cal.repetitions[m].clone();
            let mut tau = vec![0.0; n];
            let mut beta = Vec::with_capacity(cfg.l);
            let mut ridge_fallback = false;
            for s in &calibration_folds {
                let rows = s.complement(n);
                let rows = rows.as_slice();
                let tbar: Vec<f64> = tau_a.iter().map(|t| rows.iter().map(|&i| t[i]).sum::<f64>() / rows.len() as f64).collect();
                let x = design(&trial, rows, a_count, |i, buf| {
                    for a in 0..a_count {
                        buf[a] = (tau_a[a][i] - tbar[a]) * trial.resid_t(i);
                    }
                });
                let f = fit(&trial, d.y(), rows, &x)?;
                ridge_fallback |= f.ridge_fallback;
                let b: Vec<f64> = (0..a_count).map(|a| f.coef[1 + a]).collect();
                for &i in s.as_slice() {
                    tau[i] = (0..a_count).map(|a| b[a] * tau_a[a][i]).sum();
                }
                beta.push(b);
            }
            Ok(RepetitionPredictions { folds, calibration_folds, tau_a, beta, tau, ridge_fallback })
        })
        .collect()
}

/// Balanced groups within one fold: rows sorted by `(tau, row)` and cut
/// into J runs whose sizes differ by at most one. Returns the group of each
/// row (aligned with `rows`) and the J-1 lower cut values.
pub fn fold_groups(rows: &[usize], tau: &[f64], j: usize, fold: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let nk = rows.len();
    if nk < j {
        return Err(Error::EmptyGroup { group: nk, fold });
    }
    let mut order: Vec<usize> = (0..nk).collect();
    order.sort_by(|&a, &b| tau[rows[a]].total_cmp(&tau[rows[b]]).then(rows[a].cmp(&rows[b])));
    let mut group = vec![0; nk];
    let mut cuts = vec![f64::NAN; j - 1];
    for (pos, &o) in order.iter().enumerate() {
        let g = pos * j / nk;
        if g > 0 && (pos - 1) * j / nk < g {
            cuts[g - 1] = tau[rows[o]];
        }
        group[o] = g;
    }
    Ok((group, cuts))
}

/// One repetition's full-sample GATES regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub gamma: Vec<f64>,
    pub se: Vec<f64>,
    pub delta: f64,
    pub delta_se: f64,
    pub beta: Vec<Vec<f64>>,
    /// `cuts[k][j]`: lower edge of group j+2 in fold k.
    pub cuts: Vec<Vec<f64>>,
    pub group_sizes: Vec<Vec<usize>>,
    pub ridge_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatesResult {
    pub gamma_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub delta_hat: f64,
    pub delta_se: f64,
    /// `1 - Phi(delta / se)`.
    pub p_one_sided: f64,
    pub p_two_sided: f64,
    pub ci: [f64; 2],
    pub repetitions: Vec<RepetitionRecord>,
    pub warnings: Vec<String>,
}

/// Group effects by weighted regression of Y on the controls and the J
/// interactions `(T - p) 1{i in G_j}` over `rows`.
fn group_regression(trial: &Trial, y: &[f64], rows: &[usize], group: &[usize], j: usize) -> Result<(Vec<f64>, Mat, bool)> {
    let mut gi = vec![usize::MAX; y.len()];
    for (&i, &g) in rows.iter().zip(group) {
        gi[i] = g;
    }
    let x0 = design(trial, rows, j, |i, buf| {
        buf.fill(0.0);
        buf[gi[i]] = trial.resid_t(i);
    });
    let f = fit(trial, y, rows, &x0)?;
    let gamma = (0..j).map(|c| f.coef[1 + c]).collect();
    let cov = f.cov_hc0.view((1, 1), (j, j)).into_owned();
    Ok((gamma, cov, f.ridge_fallback))
}

pub fn gates_estimate(cfg: &GatesConfig, d: &Dataset, preds: &[RepetitionPredictions]) -> Result<GatesResult> {
    if preds.is_empty() {
        return Err(Error::InvalidRepetitions(0));
    }
    let trial = Trial::new(d, &cfg.controls)?;
    let n = d.n();
    let j = cfg.j;
    let mut warnings = Vec::new();
    let records = preds
        .iter()
        .enumerate()
        .map(|(m, p)| {
            let mut group = vec![0; n];
            let mut cuts = Vec::new();
            let mut sizes = Vec::new();
            for (k, f) in p.folds.iter().enumerate() {
                let (g, c) = fold_groups(f.as_slice(), &p.tau, j, k)?;
                let mut sz = vec![0; j];
                for (&i, &gg) in f.as_slice().iter().zip(&g) {
                    group[i] = gg;
                    sz[gg] += 1;
                }
                cuts.push(c);
                sizes.push(sz);
            }
            let rows: Vec<usize> = (0..n).collect();
            let (gamma, cov, ridge) = group_regression(&trial, d.y(), &rows, &group, j)?;
            let se = (0..j).map(|c| cov[(c, c)].max(0.0).sqrt()).collect();
            let dv = cov[(j - 1, j - 1)] + cov[(0, 0)] - 2.0 * cov[(0, j - 1)];
            Ok((
                m,
                RepetitionRecord {
                    delta: gamma[j - 1] - gamma[0],
                    gamma,
                    se,
                    delta_se: dv.max(0.0).sqrt(),
                    beta: p.beta.clone(),
                    cuts,
                    group_sizes: sizes,
                    ridge_fallback: ridge || p.ridge_fallback,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for p in preds {
        for (k, f) in p.folds.iter().enumerate() {
            let (lo, hi) =
                f.as_slice().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| (a.min(p.tau[i]), b.max(p.tau[i])));
            if hi - lo < 1e-8 {
                warnings.push(format!("near-flat effect predictions in fold {k}"));
            }
        }
    }
    warnings.sort();
    warnings.dedup();
    let mm = records.len() as f64;
    let avg = |f: &dyn Fn(&RepetitionRecord) -> f64| records.iter().map(|(_, r)| f(r)).sum::<f64>() / mm;
    let gamma_hat = (0..j).map(|c| avg(&|r| r.gamma[c])).collect();
    let sigma_hat = (0..j).map(|c| avg(&|r| r.se[c])).collect();
    let delta_hat = avg(&|r| r.delta);
    let delta_se = avg(&|r| r.delta_se);
    let (p1, p2) = if delta_se > 0.0 {
        let z = delta_hat / delta_se;
        (norm_cdf(-z), 2.0 * norm_cdf(-z.abs()))
    } else {
        (f64::NAN, f64::NAN)
    };
    let hw = crate::stats::norm_quantile(1.0 - cfg.alpha / 2.0) * delta_se;
    Ok(GatesResult {
        gamma_hat,
        sigma_hat,
        delta_hat,
        delta_se,
        p_one_sided: p1,
        p_two_sided: p2,
        ci: [delta_hat - hw, delta_hat + hw],
        repetitions: records.into_iter().map(|(_, r)| r).collect(),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HetTestResult {
    /// One entry per (repetition, fold), in plan order.
    pub msr_s: Vec<f64>,
    pub msr_b: f64,
    pub sigma_diag: Vec<f64>,
    pub t_stat: f64,
    pub c_crit: f64,
    pub reject: bool,
    pub psd_projected: bool,
}

/// Mean squared residuals of the fold-level calibration regressions against
/// the no-heterogeneity regression, tested with the one-sided comparison test.
pub fn het_test(cfg: &GatesConfig, d: &Dataset, preds: &[RepetitionPredictions]) -> Result<HetTestResult> {
    let trial = Trial::new(d, &cfg.controls)?;
    let n = d.n();
    let y = d.y();
    let all: Vec<usize> = (0..n).collect();
    let xb = design(&trial, &all, 0, |_, _| {});
    let fb = fit(&trial, y, &all, &xb)?;
    let eb: Vec<f64> = fb.resid.iter().map(|e| e * e).collect();
    let msr_b = eb.iter().sum::<f64>() / n as f64;
    let splits: Vec<(&RepetitionPredictions, &RowIndexSet)> =
        preds.iter().flat_map(|p| p.folds.iter().map(move |f| (p, f))).collect();
    let per_split = splits
        .par_iter()
        .map(|(p, f)| {
            let rows = f.as_slice();
            let a_count = p.tau_a.len();
            let tbar: Vec<f64> = p.tau_a.iter().map(|t| rows.iter().map(|&i| t[i]).sum::<f64>() / rows.len() as f64).collect();
            let x = design(&trial, rows, a_count, |i, buf| {
                for a in 0..a_count {
                    buf[a] = (p.tau_a[a][i] - tbar[a]) * trial.resid_t(i);
                }
            });
            let fs = fit(&trial, y, rows, &x)?;
            let e2: Vec<f64> = fs.resid.iter().map(|e| e * e).collect();
            let msr = e2.iter().sum::<f64>() / rows.len() as f64;
            let w = n as f64 / rows.len() as f64;
            let mut contrib: Vec<f64> = eb.iter().map(|e| -(e - msr_b)).collect();
            let mut member = vec![false; n];
            for (&i, e) in rows.iter().zip(&e2) {
                contrib[i] += w * (e - msr);
                member[i] = true;
            }
            Ok((msr, contrib, member))
        })
        .collect::<Result<Vec<_>>>()?;
    let msr_s: Vec<f64> = per_split.iter().map(|t| t.0).collect();
    let (contrib, member): (Vec<_>, Vec<_>) = per_split.into_iter().map(|t| (t.1, t.2)).unzip();
    let sigma = block_sigma(&contrib, &member);
    let delta: Vec<f64> = msr_s.iter().map(|m| m - msr_b).collect();
    let TestOutcome { t_stat, c_crit, reject, psd_projected } =
        one_sided_test(&delta, &sigma, n, cfg.alpha, cfg.mc_draws, derive_seed(cfg.seed, &[TAG_CALIB, 1]), 0.0)?;
    Ok(HetTestResult { msr_s, msr_b, sigma_diag: sigma.diag, t_stat, c_crit, reject, psd_projected })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatesReport {
    pub gates: GatesResult,
    pub het_test: HetTestResult,
}

pub fn run_gates(cfg: &GatesConfig, learners: &[&dyn Learner], d: &Dataset) -> Result<GatesReport> {
    let preds = ensemble_predict(cfg, learners, d)?;
    Ok(GatesReport { gates: gates_estimate(cfg, d, &preds)?, het_test: het_test(cfg, d, &preds)? })
}

/// Twice the median p-value, capped at 1.
pub fn ttm(p: &[f64]) -> f64 {
    (2.0 * median(p)).min(1.0)
}

/// `sqrt(len) * mean(t)`.
pub fn seq_t(t: &[f64]) -> f64 {
    (t.len() as f64).sqrt() * t.iter().sum::<f64>() / t.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub ttm_pvalue: f64,
    pub seq_pvalue: f64,
    pub fold_pvalues: Vec<f64>,
    pub seq_pvalues: Vec<f64>,
}

/// Top-minus-bottom t-statistic from groups and regression inside `eval`.
fn within_t(trial: &Trial, y: &[f64], eval: &[usize], tau: &[f64], j: usize, fold: usize) -> Result<f64> {
    let mut full = vec![0.0; y.len()];
    for (&i, &v) in eval.iter().zip(tau) {
        full[i] = v;
    }
    let (g, _) = fold_groups(eval, &full, j, fold)?;
    let (gamma, cov, _) = group_regression(trial, y, eval, &g, j)?;
    let v = cov[(j - 1, j - 1)] + cov[(0, 0)] - 2.0 * cov[(0, j - 1)];
    if !(v > 0.0) {
        return Err(Error::ZeroVariance("top-minus-bottom standard error".into()));
    }
    Ok((gamma[j - 1] - gamma[0]) / v.sqrt())
}

/// Single-learner baselines: fold-level p-values aggregated by twice the
/// median, and sequential aggregation per repetition (training on folds
/// `1..k`, testing on fold `k+1`) aggregated the same way.
pub fn baselines(cfg: &GatesConfig, learner: &dyn Learner, d: &Dataset) -> Result<Baselines> {
    cfg.validate(1)?;
    let trial = Trial::new(d, &cfg.controls)?;
    let n = d.n();
    let y = d.y();
    let plan = generate_plan(n, cfg.m, cfg.k, None, cfg.seed)?;
    let per_rep = (0..cfg.m)
        .into_par_iter()
        .map(|m| {
            let folds = &plan.repetitions[m];
            let mut fold_p = Vec::new();
            for (k, f) in folds.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[TAG_MODEL, m as u64, k as u64]);
                let tau = t_learner(&[learner], d, &trial, f.complement(n).as_slice(), f.as_slice(), seed)?;
                fold_p.push(norm_cdf(-within_t(&trial, y, f.as_slice(), &tau[0], cfg.j, k)?));
            }
            let mut ts = Vec::new();
            let mut train: Vec<usize> = Vec::new();
            for k in 1..folds.len() {
                train.extend_from_slice(folds[k - 1].as_slice());
                train.sort_unstable();
                let seed = derive_seed(cfg.seed, &[TAG_MODEL, m as u64, (folds.len() + k) as u64]);
                let eval = folds[k].as_slice();
                let tau = t_learner(&[learner], d, &trial, &train, eval, seed)?;
                ts.push(within_t(&trial, y, eval, &tau[0], cfg.j, k)?);
            }
            Ok((fold_p, norm_cdf(-seq_t(&ts))))
        })
        .collect::<Result<Vec<_>>>()?;
    let fold_pvalues: Vec<f64> = per_rep.iter().flat_map(|r| r.0.iter().copied()).collect();
    let seq_pvalues: Vec<f64> = per_rep.iter().map(|r| r.1).collect();
    Ok(Baselines { ttm_pvalue: ttm(&fold_pvalues), seq_pvalue: ttm(&seq_pvalues), fold_pvalues, seq_pvalues })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Propensity, Roles};
    use crate::learners::{builtin, MeanLearner};

    #[test]
    fn aggregation_examples() {
        assert!((ttm(&[0.01, 0.02, 0.03]) - 0.04).abs() < 1e-15);
        assert_eq!(ttm(&[0.6, 0.6, 0.6]), 1.0);
        assert!((seq_t(&[1.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn groups_are_balanced() {
        let rows: Vec<usize> = (0..6).collect();
        let tau = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let (g, cuts) = fold_groups(&rows, &tau, 3, 0).unwrap();
        assert_eq!(g, vec![2, 2, 1, 1, 0, 0]);
        assert_eq!(cuts, vec![3.0, 5.0]);
        for nk in 3..40 {
            let rows: Vec<usize> = (0..nk).collect();
            let tau: Vec<f64> = (0..nk).map(|i| ((i * 7) % 5) as f64).collect();
            let (g, _) = fold_groups(&rows, &tau, 3, 0).unwrap();
            for j in 0..3 {
                let c = g.iter().filter(|&&x| x == j).count() as f64;
                assert!((c - nk as f64 / 3.0).abs() <= 1.0);
            }
        }
        assert!(matches!(fold_groups(&[0, 1], &[0.0, 1.0], 3, 4), Err(Error::EmptyGroup { fold: 4, .. })));
    }

    fn trial_data(n: usize, effect: impl Fn(f64) -> f64) -> Dataset {
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
        let t: Vec<f64> = (0..n).map(|i| ((i / 2 + i) % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] + t[i] * effect(x[i]) + 0.1 * (((i * 13) % 7) as f64 - 3.0)).collect();
        let mut roles = Roles::new("y", &["x"]);
        roles.treatment = Some("t".into());
        roles.propensity = Some(Propensity::Constant(0.5));
        Dataset::from_columns(vec!["y".into(), "t".into(), "x".into()], vec![y, t, x], roles).unwrap()
    }

    #[test]
    fn two_group_effect_recovered() {
        let d = trial_data(600, |x| if x > 0.0 { 1.0 } else { -1.0 });
        let ols = builtin("tree(2)").unwrap();
        let cfg = GatesConfig { m: 3, j: 2, mc_draws: 2000, ..Default::default() };
        let r = run_gates(&cfg, &[ols.as_ref()], &d).unwrap();
        assert!((r.gates.delta_hat - 2.0).abs() < 0.2, "{}", r.gates.delta_hat);
        assert!(r.gates.p_one_sided < 1e-6);
        assert!(r.het_test.reject);
        for rec in &r.gates.repetitions {
            for sz in &rec.group_sizes {
                assert!(sz.iter().max().unwrap() - sz.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn duplicated_learner_flags_ridge() {
        let d = trial_data(300, |x| x);
        let ols = builtin("ols").unwrap();
        let cfg = GatesConfig { m: 2, mc_draws: 1000, ..Default::default() };
        let p = ensemble_predict(&cfg, &[ols.as_ref(), ols.as_ref()], &d).unwrap();
        assert!(p.iter().all(|r| r.ridge_fallback));
    }

    #[test]
    fn balanced_groups_give_difference_in_means() {
        // every group of four rows holds exactly two treated rows, matching p = 0.5
        let n = 48;
        let x: Vec<f64> = (0..n).map(|i| (i / 4) as f64).collect();
        let t: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 4 < 2))).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] * t[i] + ((i * 5) % 3) as f64).collect();
        let mut roles = Roles::new("y", &["x"]);
        roles.treatment = Some("t".into());
        roles.propensity = Some(Propensity::Constant(0.5));
        let d = Dataset::from_columns(vec!["y".into(), "t".into(), "x".into()], vec![y.clone(), t.clone(), x.clone()], roles)
            .unwrap();
        let trial = Trial::new(&d, &[]).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let group: Vec<usize> = (0..n).map(|i| i / 16).collect();
        let (gamma, _, _) = group_regression(&trial, &y, &rows, &group, 3).unwrap();
        for (j, g) in gamma.iter().enumerate() {
            let mean = |tv: f64| {
                let v: Vec<f64> = (0..n).filter(|&i| group[i] == j && t[i] == tv).map(|i| y[i]).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            assert!((g - (mean(1.0) - mean(0.0))).abs() < 1e-8);
        }
    }

    #[test]
    fn learner_order_does_not_matter() {
        let d = trial_data(300, |x| 2.0 * x);
        let a = builtin("ols").unwrap();
        let b = builtin("tree(2)").unwrap();
        let cfg = GatesConfig { m: 2, mc_draws: 1000, ..Default::default() };
        let p1 = ensemble_predict(&cfg, &[a.as_ref(), b.as_ref()], &d).unwrap();
        let p2 = ensemble_predict(&cfg, &[b.as_ref(), a.as_ref()], &d).unwrap();
        let r1 = gates_estimate(&cfg, &d, &p1).unwrap();
        let r2 = gates_estimate(&cfg, &d, &p2).unwrap();
        assert!((r1.delta_hat - r2.delta_hat).abs() < 1e-9 && (r1.p_one_sided - r2.p_one_sided).abs() < 1e-9);
    }

    #[test]
    fn deterministic_outcome_is_degenerate() {
        let n = 120;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let t: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let mut roles = Roles::new("y", &["x"]);
        roles.treatment = Some("t".into());
        roles.propensity = Some(Propensity::Constant(0.5));
        let d = Dataset::from_columns(vec!["y".into(), "t".into(), "x".into()], vec![vec![1.0; n], t, x], roles).unwrap();
        let cfg = GatesConfig { m: 1, mc_draws: 100, ..Default::default() };
        let p = ensemble_predict(&cfg, &[&MeanLearner], &d).unwrap();
        assert!(matches!(het_test(&cfg, &d, &p), Err(Error::ZeroDiagonal(_))));
    }

    #[test]
    fn baselines_run() {
        let d = trial_data(300, |x| 3.0 * x);
        let l = builtin("ols").unwrap();
        let cfg = GatesConfig { m: 3, ..Default::default() };
        let b = baselines(&cfg, l.as_ref(), &d).unwrap();
        assert_eq!(b.fold_pvalues.len(), 9);
        assert_eq!(b.seq_pvalues.len(), 3);
        assert!(b.ttm_pvalue <= 1.0 && b.seq_pvalue < 0.05);
    }
}

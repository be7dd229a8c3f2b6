//! Training algorithms and fitted models.
//!
//! A [`Learner`] maps training rows of a [`Dataset`] to a [`Model`], which
//! predicts a real value (or a probability for classifiers) from a covariate
//! row. Learners must be deterministic given the data and the seed.

mod external;
mod tree;

pub use external::{ExternalLearner, ExternalSpec};
pub use tree::TreeLearner;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{Mat, Vect};
use crate::rng::{derive_seed, TAG_MODEL};
use crate::splits::SplitPlan;
use crate::stats::ksum;
use rayon::prelude::*;
use std::sync::Arc;

/// Fitted prediction function.
pub trait Model: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;

    /// Predictions for `rows` of `d`; batch learners override this.
    fn predict_many(&self, d: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let mut buf = Vec::with_capacity(d.n_covariates());
        Ok(rows
            .iter()
            .map(|&i| {
                d.covariate_row(i, &mut buf);
                self.predict(&buf)
            })
            .collect())
    }
}

/// Training algorithm.
pub trait Learner: Send + Sync {
    fn name(&self) -> String;
    fn train(&self, d: &Dataset, rows: &[usize], seed: u64) -> Result<Arc<dyn Model>>;
}

pub type ModelRef = Arc<dyn Model>;

/// Per-split models, indexed like [`SplitPlan::split`].
#[derive(Clone)]
pub struct SplitModels {
    pub k: usize,
    pub models: Vec<ModelRef>,
}

impl SplitModels {
    pub fn get(&self, m: usize, k: usize) -> &ModelRef {
        &self.models[m * self.k + k]
    }

    /// Same model on every split of `plan`.
    pub fn constant(plan: &SplitPlan, model: ModelRef) -> Self {
        Self { k: plan.k, models: vec![model; plan.n_splits()] }
    }
}

/// Train one model per split on the complement of its evaluation set.
/// The seed for split `(m, k)` is derived from `(seed, m, k)` only.
pub fn train_all(plan: &SplitPlan, d: &Dataset, learner: &dyn Learner, seed: u64) -> Result<SplitModels> {
    let models = (0..plan.n_splits())
        .into_par_iter()
        .map(|idx| {
            let (m, k) = (idx / plan.k, idx % plan.k);
            let train = plan.split(idx).complement(plan.n);
            let s = derive_seed(seed, &[TAG_MODEL, m as u64, k as u64]);
            learner.train(d, train.as_slice(), s).map_err(|e| Error::LearnerFailure { m, k, reason: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitModels { k: plan.k, models })
}

/// Parse a learner name such as `ols`, `ridge(0.5)`, `knn(5)` or `tree(3)`.
pub fn builtin(name: &str) -> Result<Box<dyn Learner>> {
    let name = name.trim();
    let (head, arg) = match name.find('(') {
        Some(i) if name.ends_with(')') => (&name[..i], Some(name[i + 1..name.len() - 1].trim())),
        Some(_) => return Err(Error::UnknownLearner(name.into())),
        None => (name, None),
    };
    let bad = || Error::UnknownLearner(name.to_string());
    let num = |a: Option<&str>| -> Result<f64> { a.ok_or_else(bad)?.parse::<f64>().map_err(|_| bad()) };
    let int = |a: Option<&str>| -> Result<usize> { a.ok_or_else(bad)?.parse::<usize>().map_err(|_| bad()) };
    Ok(match (head, arg) {
        ("mean", None) => Box::new(MeanLearner),
        ("ols", None) => Box::new(RidgeLearner { lambda: 0.0 }),
        ("ridge", a) => {
            let lambda = num(a)?;
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(bad());
            }
            Box::new(RidgeLearner { lambda })
        }
        ("knn", a) => {
            let k = int(a)?;
            if k == 0 {
                return Err(bad());
            }
            Box::new(KnnLearner { k })
        }
        ("tree", a) => Box::new(TreeLearner::new(int(a)?)),
        ("logistic", None) => Box::new(LogisticLearner),
        _ => return Err(bad()),
    })
}

fn train_y(d: &Dataset, rows: &[usize]) -> Vec<f64> {
    let y = d.y();
    rows.iter().map(|&i| y[i]).collect()
}

fn design(d: &Dataset, rows: &[usize]) -> Mat {
    let p = d.n_covariates();
    Mat::from_fn(rows.len(), p, |r, j| d.covariate(j)[rows[r]])
}

/// Constant predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantModel(pub f64);

impl Model for ConstantModel {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

/// Predicts the training-outcome mean.
#[derive(Clone, Copy, Debug)]
pub struct MeanLearner;

impl Learner for MeanLearner {
    fn name(&self) -> String {
        "mean".into()
    }

    fn train(&self, d: &Dataset, rows: &[usize], _seed: u64) -> Result<ModelRef> {
        if rows.is_empty() {
            return Err(Error::EmptySubset);
        }
        Ok(Arc::new(ConstantModel(ksum(rows.iter().map(|&i| d.y()[i])) / rows.len() as f64)))
    }
}

/// Affine predictor `intercept + x·coef`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl Model for LinearModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }
}

/// Ridge regression with an unpenalized intercept; `lambda = 0` is OLS
/// (minimum-norm solution when the design is rank deficient).
#[derive(Clone, Copy, Debug)]
pub struct RidgeLearner {
    pub lambda: f64,
}

impl Learner for RidgeLearner {
    fn name(&self) -> String {
        if self.lambda == 0.0 {
            "ols".into()
        } else {
            format!("ridge({})", self.lambda)
        }
    }

    fn train(&self, d: &Dataset, rows: &[usize], _seed: u64) -> Result<ModelRef> {
        if rows.is_empty() {
            return Err(Error::EmptySubset);
        }
        let y = train_y(d, rows);
        let ybar = ksum(y.iter().copied()) / y.len() as f64;
        let p = d.n_covariates();
        if p == 0 {
            return Ok(Arc::new(LinearModel { intercept: ybar, coef: vec![] }));
        }
        let mut x = design(d, rows);
        let means: Vec<f64> = (0..p).map(|j| x.column(j).mean()).collect();
        for (j, m) in means.iter().enumerate() {
            x.column_mut(j).add_scalar_mut(-m);
        }
        let yc = Vect::from_iterator(y.len(), y.iter().map(|v| v - ybar));
        let mut xtx = x.transpose() * &x;
        for j in 0..p {
            xtx[(j, j)] += self.lambda;
        }
        let xty = x.transpose() * yc;
        let svd = xtx.svd(true, true);
        let smax = svd.singular_values.max();
        let beta = svd.solve(&xty, 1e-12 * smax.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let intercept = ybar - beta.iter().zip(&means).map(|(b, m)| b * m).sum::<f64>();
        if !intercept.is_finite() || beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficients".into()));
        }
        Ok(Arc::new(LinearModel { intercept, coef: beta.iter().copied().collect() }))
    }
}

/// k-nearest-neighbour regression with Euclidean distance on raw covariates;
/// distance ties are broken by training-row order.
#[derive(Clone, Copy, Debug)]
pub struct KnnLearner {
    pub k: usize,
}

struct KnnModel {
    k: usize,
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Model for KnnModel {
    fn predict(&self, q: &[f64]) -> f64 {
        let n = self.y.len();
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let row = &self.x[i * self.p..(i + 1) * self.p];
                (row.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i)
            })
            .collect();
        let k = self.k.min(n);
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        ksum(dist[..k].iter().map(|&(_, i)| self.y[i])) / k as f64
    }
}

impl Learner for KnnLearner {
    fn name(&self) -> String {
        format!("knn({})", self.k)
    }

    fn train(&self, d: &Dataset, rows: &[usize], _seed: u64) -> Result<ModelRef> {
        if rows.is_empty() {
            return Err(Error::EmptySubset);
        }
        let p = d.n_covariates();
        let mut x = Vec::with_capacity(rows.len() * p);
        let mut buf = Vec::new();
        for &i in rows {
            d.covariate_row(i, &mut buf);
            x.extend_from_slice(&buf);
        }
        Ok(Arc::new(KnnModel { k: self.k, p, x, y: train_y(d, rows) }))
    }
}

/// Logistic regression by damped Newton (100 iterations, gradient tolerance
/// 1e-10) with a 1e-8 ridge on the slopes to survive separation.
#[derive(Clone, Copy, Debug)]
pub struct LogisticLearner;

/// `1 / (1 + exp(-(intercept + x·coef)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub linear: LinearModel,
}

impl Model for LogisticModel {
    fn predict(&self, x: &[f64]) -> f64 {
        logistic(self.linear.predict(x))
    }
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

const LOGIT_RIDGE: f64 = 1e-8;

fn logit_objective(x: &Mat, y: &[f64], beta: &Vect) -> f64 {
    let eta = x * beta;
    let mut ll = 0.0;
    for (e, &yi) in eta.iter().zip(y) {
        // log(1 + exp(e)) - y e, computed stably
        ll += if *e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() } - yi * e;
    }
    ll + 0.5 * LOGIT_RIDGE * beta.rows(1, beta.len() - 1).norm_squared()
}

impl Learner for LogisticLearner {
    fn name(&self) -> String {
        "logistic".into()
    }

    fn train(&self, d: &Dataset, rows: &[usize], _seed: u64) -> Result<ModelRef> {
        if rows.is_empty() {
            return Err(Error::EmptySubset);
        }
        let y = train_y(d, rows);
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("logistic learner needs a 0/1 outcome".into()));
        }
        let p = d.n_covariates() + 1;
        let x = Mat::from_fn(rows.len(), p, |r, j| if j == 0 { 1.0 } else { d.covariate(j - 1)[rows[r]] });
        let mut beta = Vect::zeros(p);
        let mut obj = logit_objective(&x, &y, &beta);
        for _ in 0..100 {
            let eta = &x * &beta;
            let mu: Vec<f64> = eta.iter().map(|&e| logistic(e)).collect();
            let mut grad = Vect::zeros(p);
            let mut hess = Mat::zeros(p, p);
            for i in 0..rows.len() {
                let r = x.row(i);
                let w = mu[i] * (1.0 - mu[i]);
                for a in 0..p {
                    grad[a] += (mu[i] - y[i]) * r[a];
                    for b in 0..p {
                        hess[(a, b)] += w * r[a] * r[b];
                    }
                }
            }
            for a in 1..p {
                grad[a] += LOGIT_RIDGE * beta[a];
                hess[(a, a)] += LOGIT_RIDGE;
            }
            hess[(0, 0)] += 1e-12;
            if grad.norm() < 1e-10 {
                break;
            }
            let step = match hess.clone().cholesky() {
                Some(c) => c.solve(&grad),
                None => crate::linalg::solve(&hess, &grad).unwrap_or_else(|| grad.clone()),
            };
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..50 {
                let cand = &beta - &step * t;
                let c_obj = logit_objective(&x, &y, &cand);
                if c_obj <= obj {
                    beta = cand;
                    obj = c_obj;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite logistic coefficients".into()));
        }
        Ok(Arc::new(LogisticModel { linear: LinearModel { intercept: beta[0], coef: beta.iter().skip(1).copied().collect() } }))
    }
}

/// Ignores the data and returns a fixed model. Useful for exact-null
/// experiments where the trained model must equal a known function.
#[derive(Clone)]
pub struct FixedLearner {
    pub model: ModelRef,
    pub label: String,
}

impl Learner for FixedLearner {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn train(&self, _d: &Dataset, _rows: &[usize], _seed: u64) -> Result<ModelRef> {
        Ok(self.model.clone())
    }
}

/// Model defined by a closure over the covariate row.
pub struct FnModel<F: Fn(&[f64]) -> f64 + Send + Sync>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> Model for FnModel<F> {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Equal-weight average of member models.
#[derive(Clone)]
pub struct AveragedModel {
    members: Vec<ModelRef>,
}

impl AveragedModel {
    pub fn members(&self) -> &[ModelRef] {
        &self.members
    }
}

impl Model for AveragedModel {
    fn predict(&self, x: &[f64]) -> f64 {
        ksum(self.members.iter().map(|m| m.predict(x))) / self.members.len() as f64
    }

    fn predict_many(&self, d: &Dataset, rows: &[usize]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; rows.len()];
        for m in &self.members {
            for (a, v) in acc.iter_mut().zip(m.predict_many(d, rows)?) {
                *a += v;
            }
        }
        let k = self.members.len() as f64;
        Ok(acc.into_iter().map(|v| v / k).collect())
    }
}

pub fn average_model(models: Vec<ModelRef>) -> Result<AveragedModel> {
    if models.is_empty() {
        return Err(Error::EmptyModelList);
    }
    Ok(AveragedModel { members: models })
}

//! Split plans: repeated sample-splitting (K = 1) and repeated cross-fitting (K > 1).

use crate::data::RowIndexSet;
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_PLAN};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// M repetitions of K evaluation sets each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub b: usize,
    pub seed: u64,
    pub repetitions: Vec<Vec<RowIndexSet>>,
}

/// One split: evaluate on `eval`, train on its complement.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainEvalPair {
    pub eval: RowIndexSet,
    pub train: RowIndexSet,
}

/// Build a plan. For K > 1 `b` is ignored and each repetition partitions
/// `[0, n)`; for K = 1 each repetition holds one subset of size `b`
/// (`None` means `n / 2`).
pub fn generate_plan(n: usize, m: usize, k: usize, b: Option<usize>, seed: u64) -> Result<SplitPlan> {
    if m == 0 {
        return Err(Error::InvalidRepetitions(m));
    }
    if k == 0 || (k > 1 && n < 2 * k) {
        return Err(Error::InvalidFoldCount { k, n });
    }
    let b = if k == 1 {
        let b = b.unwrap_or(n / 2);
        if b == 0 || b >= n {
            return Err(Error::InvalidSubsampleSize { b, n });
        }
        b
    } else {
        n / k
    };
    let repetitions = (0..m)
        .map(|r| {
            let mut rng = stream(seed, &[TAG_PLAN, r as u64]);
            if k == 1 {
                vec![RowIndexSet::new(sample(&mut rng, n, b).into_vec())]
            } else {
                kfold(&mut rng, n, k)
            }
        })
        .collect();
    Ok(SplitPlan { n, m, k, b, seed, repetitions })
}

fn kfold<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<RowIndexSet> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        out.push(RowIndexSet::new(perm[start..start + len].to_vec()));
        start += len;
    }
    out
}

impl SplitPlan {
    /// Number of splits, M·K.
    pub fn n_splits(&self) -> usize {
        self.m * self.k
    }

    /// Evaluation sets in `(m, k)` lexicographic order.
    pub fn eval_sets(&self) -> impl Iterator<Item = (usize, usize, &RowIndexSet)> {
        self.repetitions.iter().enumerate().flat_map(|(m, folds)| folds.iter().enumerate().map(move |(k, s)| (m, k, s)))
    }

    pub fn split(&self, idx: usize) -> &RowIndexSet {
        &self.repetitions[idx / self.k][idx % self.k]
    }
}

/// All `(m, k, pair)` triples, train = complement of eval.
pub fn enumerate_pairs(plan: &SplitPlan) -> Vec<(usize, usize, TrainEvalPair)> {
    plan.eval_sets().map(|(m, k, s)| (m, k, TrainEvalPair { eval: s.clone(), train: s.complement(plan.n) })).collect()
}

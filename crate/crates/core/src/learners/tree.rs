//! Regression tree grown by greedy variance reduction.

use super::{Learner, Model, ModelRef};
use crate::data::Dataset;
use crate::error::{Error, Result};
use std::sync::Arc;

const MIN_LEAF: usize = 5;

/// Depth-limited CART regression tree without pruning.
#[derive(Clone, Copy, Debug)]
pub struct TreeLearner {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl TreeLearner {
    pub fn new(max_depth: usize) -> Self {
        Self { max_depth, min_leaf: MIN_LEAF }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
struct TreeModel {
    nodes: Vec<Node>,
}

impl Model for TreeModel {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

struct Builder<'a> {
    x: Vec<&'a [f64]>,
    y: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn mean(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&i| self.y[i]).sum::<f64>() / rows.len() as f64
    }

    /// Best (feature, threshold, gain) over all features, or None.
    fn best_split(&self, rows: &[usize]) -> Option<(usize, f64)> {
        let n = rows.len();
        let total: f64 = rows.iter().map(|&i| self.y[i]).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = rows.to_vec();
        for (f, col) in self.x.iter().enumerate() {
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            let mut left = 0.0;
            for pos in 0..n - 1 {
                left += self.y[order[pos]];
                let nl = pos + 1;
                let nr = n - nl;
                if nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let (a, b) = (col[order[pos]], col[order[pos + 1]]);
                if a == b {
                    continue;
                }
                // maximizing between-child sum of squares is equivalent to
                // minimizing the within-child SSE
                let score = left * left / nl as f64 + (total - left) * (total - left) / nr as f64;
                if best.is_none_or(|(s, _, _)| score > s + 1e-12 * s.abs()) {
                    best = Some((score, f, 0.5 * (a + b)));
                }
            }
        }
        let base = total * total / n as f64;
        best.filter(|(s, _, _)| *s > base + 1e-12 * base.abs()).map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(self.mean(rows)));
        if depth >= self.max_depth || rows.len() < 2 * self.min_leaf {
            return id;
        }
        if let Some((feature, threshold)) = self.best_split(rows) {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[feature][i] <= threshold);
            let left = self.grow(&l, depth + 1);
            let right = self.grow(&r, depth + 1);
            self.nodes[id] = Node::Split { feature, threshold, left, right };
        }
        id
    }
}

impl Learner for TreeLearner {
    fn name(&self) -> String {
        format!("tree({})", self.max_depth)
    }

    fn train(&self, d: &Dataset, rows: &[usize], _seed: u64) -> Result<ModelRef> {
        if rows.is_empty() {
            return Err(Error::EmptySubset);
        }
        let mut b = Builder {
            x: (0..d.n_covariates()).map(|j| d.covariate(j)).collect(),
            y: d.y(),
            max_depth: self.max_depth,
            min_leaf: self.min_leaf.max(1),
            nodes: Vec::new(),
        };
        b.grow(rows, 0);
        Ok(Arc::new(TreeModel { nodes: b.nodes }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Roles;

    #[test]
    fn recovers_step_function() {
        let x: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v < 20.0 { 1.0 } else { 3.0 }).collect();
        let d = Dataset::from_columns(vec!["y".into(), "x".into()], vec![y, x], Roles::new("y", &["x"])).unwrap();
        let rows: Vec<usize> = (0..40).collect();
        let m = TreeLearner::new(2).train(&d, &rows, 0).unwrap();
        assert_eq!(m.predict(&[3.0]), 1.0);
        assert_eq!(m.predict(&[30.0]), 3.0);
        let stump = TreeLearner::new(0).train(&d, &rows, 0).unwrap();
        assert_eq!(stump.predict(&[3.0]), 2.0);
    }
}

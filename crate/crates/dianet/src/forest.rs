//! Multi-output CART regression trees and random forests with
//! impurity-based (Gini) feature importances.
//!
//! Impurity of a node is the sum over output components of the biased
//! variance of that component among the node's samples. A split's
//! importance contribution is `(node samples / root samples) * impurity
//! decrease`, accumulated on the split feature; importances are normalized
//! per tree and averaged over the forest, so they are non-negative and sum
//! to one whenever at least one split occurred.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct ForestHyperParams {
    pub tree_count: usize,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Fraction of features considered at each split. 1.0 examines all
    /// features, which keeps forests equivariant under column permutation.
    pub feature_fraction: f64,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestHyperParams {
    fn default() -> Self {
        ForestHyperParams {
            tree_count: 100,
            max_depth: None,
            min_leaf: 2,
            feature_fraction: 1.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug)]
enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        mean: Vec<f64>,
    },
}

#[derive(Debug)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
    /// Per-feature importance, normalized to sum 1 when any split exists.
    pub importances: Vec<f64>,
    pub split_count: usize,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64], out: &mut [f64]) {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { mean } => {
                    out.copy_from_slice(mean);
                    return;
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct RegressionForest {
    pub trees: Vec<RegressionTree>,
    /// Mean of per-tree normalized importances; all zeros when no tree
    /// managed a split (flagged degenerate).
    pub importances: Vec<f64>,
    pub degenerate: bool,
    pub features: usize,
    pub outputs: usize,
}

impl RegressionForest {
    pub fn predict(&self, row: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.outputs];
        let mut tmp = vec![0.0; self.outputs];
        for tree in &self.trees {
            tree.predict(row, &mut tmp);
            for (a, t) in acc.iter_mut().zip(&tmp) {
                *a += t;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Dense row-major matrix view used by the fitting routines.
#[derive(Debug, Clone, Copy)]
pub struct MatrixRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

impl<'a> MatrixRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data/shape mismatch");
        MatrixRef { data, rows, cols }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

struct TreeBuilder<'a> {
    x: MatrixRef<'a>,
    y: MatrixRef<'a>,
    max_depth: Option<usize>,
    min_leaf: usize,
    features_per_split: usize,
    rng: Rng,
    root_samples: usize,
    nodes: Vec<TreeNode>,
    importance: Vec<f64>,
    split_count: usize,
}

/// (mean vector, impurity) of a sample set; impurity is the per-output
/// biased variance summed over outputs.
fn moments(y: MatrixRef<'_>, idx: &[usize]) -> (Vec<f64>, f64) {
    let c = y.cols;
    let n = idx.len() as f64;
    let mut mean = vec![0.0; c];
    for &i in idx {
        for (m, v) in mean.iter_mut().zip(y.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut imp = 0.0;
    for &i in idx {
        for (m, v) in mean.iter().zip(y.row(i)) {
            let d = v - m;
            imp += d * d;
        }
    }
    (mean, (imp / n).max(0.0))
}

impl<'a> TreeBuilder<'a> {
    fn build(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let (mean, impurity) = moments(self.y, idx);
        let stop =
            idx.len() < 2 * self.min_leaf || impurity <= 1e-24 || self.max_depth.is_some_and(|d| depth >= d);
        if !stop {
            if let Some((feature, threshold, gain, split_at)) = self.best_split(idx) {
                // sklearn-style importance: weight the impurity decrease by
                // the fraction of the tree's samples passing this node.
                self.importance[feature] += idx.len() as f64 / self.root_samples as f64 * gain;
                self.split_count += 1;

                idx.sort_by(|&a, &b| {
                    self.x
                        .at(a, feature)
                        .partial_cmp(&self.x.at(b, feature))
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let node_slot = self.nodes.len();
                self.nodes.push(TreeNode::Leaf { mean: Vec::new() }); // placeholder
                let (left_idx, right_idx) = idx.split_at_mut(split_at);
                let left = self.build(left_idx, depth + 1);
                let right = self.build(right_idx, depth + 1);
                self.nodes[node_slot] = TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
                return node_slot;
            }
        }
        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { mean });
        slot
    }

    /// Finds the (feature, threshold) maximizing the impurity decrease
    /// `imp(node) - (n_l imp_l + n_r imp_r) / n`. Returns the split point in
    /// the feature-sorted order as well. Ties resolve to the first feature
    /// and earliest threshold examined, which keeps fits deterministic.
    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64, f64, usize)> {
        let p = self.x.cols;
        let c = self.y.cols;
        let n = idx.len();
        let nf = n as f64;

        let features: Vec<usize> = if self.features_per_split >= p {
            (0..p).collect()
        } else {
            // Uniform subset without replacement.
            let mut all: Vec<usize> = (0..p).collect();
            self.rng.shuffle(&mut all);
            let mut chosen = all[..self.features_per_split].to_vec();
            chosen.sort_unstable();
            chosen
        };

        let (_, parent_imp) = moments(self.y, idx);
        if parent_imp <= 0.0 {
            return None;
        }

        let mut total = vec![0.0; c];
        let mut total_sq = vec![0.0; c];
        for &i in idx {
            for (j, v) in self.y.row(i).iter().enumerate() {
                total[j] += v;
                total_sq[j] += v * v;
            }
        }

        let mut best: Option<(usize, f64, f64, usize)> = None;
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for &feature in &features {
            order.clear();
            order.extend_from_slice(idx);
            order.sort_by(|&a, &b| {
                self.x
                    .at(a, feature)
                    .partial_cmp(&self.x.at(b, feature))
                    .unwrap()
                    .then(a.cmp(&b))
            });

            let mut left = vec![0.0; c];
            let mut left_sq = vec![0.0; c];
            for pos in 1..n {
                let moved = order[pos - 1];
                for (j, v) in self.y.row(moved).iter().enumerate() {
                    left[j] += v;
                    left_sq[j] += v * v;
                }
                if pos < self.min_leaf || n - pos < self.min_leaf {
                    continue;
                }
                let lo = self.x.at(order[pos - 1], feature);
                let hi = self.x.at(order[pos], feature);
                if lo >= hi {
                    continue;
                }
                let (nl, nr) = (pos as f64, (n - pos) as f64);
                let mut child_imp = 0.0;
                for j in 0..c {
                    let lvar = left_sq[j] / nl - (left[j] / nl) * (left[j] / nl);
                    let rsum = total[j] - left[j];
                    let rvar = (total_sq[j] - left_sq[j]) / nr - (rsum / nr) * (rsum / nr);
                    child_imp += nl / nf * lvar.max(0.0) + nr / nf * rvar.max(0.0);
                }
                let gain = parent_imp - child_imp;
                let threshold = 0.5 * (lo + hi);
                // Gain ties (identical partitions through different columns)
                // break on the threshold value, a data property that is
                // stable under column permutation; feature order is only the
                // last resort.
                let better = match best {
                    None => gain > 1e-15,
                    Some((_, bt, bg, _)) => gain > bg || (gain == bg && threshold < bt),
                };
                if better {
                    best = Some((feature, threshold, gain, pos));
                }
            }
        }
        best
    }
}

pub fn fit_tree(
    x: MatrixRef<'_>,
    y: MatrixRef<'_>,
    hp: &ForestHyperParams,
    rng: Rng,
    sample: Vec<usize>,
) -> RegressionTree {
    let p = x.cols;
    let features_per_split = if hp.feature_fraction >= 1.0 {
        p
    } else {
        ((p as f64 * hp.feature_fraction).ceil() as usize).clamp(1, p)
    };
    let mut builder = TreeBuilder {
        x,
        y,
        max_depth: hp.max_depth,
        min_leaf: hp.min_leaf.max(1),
        features_per_split,
        rng,
        root_samples: sample.len(),
        nodes: Vec::new(),
        importance: vec![0.0; p],
        split_count: 0,
    };
    let mut idx = sample;
    builder.build(&mut idx, 0);

    // Sum in value order, not column order, so the normalizer (and with it
    // every normalized importance) is bit-stable under column permutation.
    let mut sorted = builder.importance.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sum: f64 = sorted.iter().sum();
    if sum > 0.0 {
        builder.importance.iter_mut().for_each(|v| *v /= sum);
    }
    RegressionTree {
        nodes: builder.nodes,
        importances: builder.importance,
        split_count: builder.split_count,
    }
}

/// Fits `hp.tree_count` CART trees on (X, Y) and averages their normalized
/// importances. X is `[n, p]`, Y is `[n, c]`.
pub fn fit_forest(x: MatrixRef<'_>, y: MatrixRef<'_>, hp: &ForestHyperParams) -> Result<RegressionForest> {
    if x.rows != y.rows {
        return Err(Error::Usage(format!(
            "fit_forest: {} X rows vs {} Y rows",
            x.rows, y.rows
        )));
    }
    if x.rows < 2 * hp.min_leaf {
        return Err(Error::Usage(format!(
            "fit_forest: need at least {} samples for min_leaf {}, got {}",
            2 * hp.min_leaf,
            hp.min_leaf,
            x.rows
        )));
    }
    if hp.tree_count == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }

    let root = Rng::new(hp.seed);
    let mut trees = Vec::with_capacity(hp.tree_count);
    for t in 0..hp.tree_count {
        let mut rng = root.derive(&format!("tree{t}"));
        let sample: Vec<usize> = if hp.bootstrap {
            (0..x.rows).map(|_| rng.below(x.rows)).collect()
        } else {
            (0..x.rows).collect()
        };
        trees.push(fit_tree(x, y, hp, rng, sample));
    }

    let mut importances = vec![0.0; x.cols];
    let mut any_split = false;
    for tree in &trees {
        if tree.split_count > 0 {
            any_split = true;
        }
        for (acc, v) in importances.iter_mut().zip(&tree.importances) {
            *acc += v;
        }
    }
    let contributing = trees.iter().filter(|t| t.split_count > 0).count();
    if contributing > 0 {
        importances.iter_mut().for_each(|v| *v /= contributing as f64);
    }
    Ok(RegressionForest {
        trees,
        importances,
        degenerate: !any_split,
        features: x.cols,
        outputs: y.cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill_rand(rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        rng.fill_normal(&mut v, 0.0, 1.0);
        v
    }

    #[test]
    fn copied_column_takes_nearly_all_importance() {
        let mut rng = Rng::new(1);
        let (n, p) = (200, 8);
        let x = fill_rand(&mut rng, n * p);
        // Y (2 outputs) is exactly column 5 of X.
        let mut y = vec![0.0; n * 2];
        for i in 0..n {
            y[i * 2] = x[i * p + 5];
            y[i * 2 + 1] = 2.0 * x[i * p + 5];
        }
        let forest = fit_forest(
            MatrixRef::new(&x, n, p),
            MatrixRef::new(&y, n, 2),
            &ForestHyperParams { tree_count: 30, seed: 3, ..Default::default() },
        )
        .unwrap();
        assert!(!forest.degenerate);
        assert!(
            forest.importances[5] > 0.95,
            "importance on the copied column: {:?}",
            forest.importances
        );
    }

    #[test]
    fn independent_noise_spreads_importance() {
        // Median over 10 seeds of the max importance stays below 3x the
        // uniform share 1/p.
        let (n, p) = (120, 6);
        let mut maxima = Vec::new();
        for seed in 0..10u64 {
            let mut rng = Rng::new(100 + seed);
            let x = fill_rand(&mut rng, n * p);
            let y = fill_rand(&mut rng, n);
            let forest = fit_forest(
                MatrixRef::new(&x, n, p),
                MatrixRef::new(&y, n, 1),
                &ForestHyperParams { tree_count: 40, seed, ..Default::default() },
            )
            .unwrap();
            let mx = forest.importances.iter().cloned().fold(0.0, f64::max);
            maxima.push(mx);
        }
        maxima.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = maxima[maxima.len() / 2];
        assert!(
            median < 3.0 / p as f64,
            "median max importance {median} vs bound {}",
            3.0 / p as f64
        );
    }

    #[test]
    fn single_depth_one_tree_puts_all_importance_on_split_feature() {
        // Y is a step function of feature 0; only one split is possible.
        let n = 40;
        let mut x = vec![0.0; n * 3];
        let mut y = vec![0.0; n];
        for i in 0..n {
            x[i * 3] = i as f64;
            x[i * 3 + 1] = (i % 7) as f64 * 0.001;
            x[i * 3 + 2] = (i % 3) as f64 * 0.001;
            y[i] = if i < n / 2 { 0.0 } else { 1.0 };
        }
        let forest = fit_forest(
            MatrixRef::new(&x, n, 3),
            MatrixRef::new(&y, n, 1),
            &ForestHyperParams {
                tree_count: 1,
                max_depth: Some(1),
                bootstrap: false,
                seed: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(forest.importances[0], 1.0);
        assert_eq!(forest.importances[1], 0.0);
        assert_eq!(forest.importances[2], 0.0);
    }

    #[test]
    fn importances_sum_to_one() {
        let mut rng = Rng::new(9);
        let (n, p) = (100, 5);
        let x = fill_rand(&mut rng, n * p);
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = x[i * p] + 0.5 * x[i * p + 2] + 0.1 * rng.normal();
        }
        let forest = fit_forest(
            MatrixRef::new(&x, n, p),
            MatrixRef::new(&y, n, 1),
            &ForestHyperParams { tree_count: 25, seed: 4, ..Default::default() },
        )
        .unwrap();
        let sum: f64 = forest.importances.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        assert!(forest.importances.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn constant_features_are_degenerate() {
        let n = 20;
        let x = vec![1.0; n * 4];
        let mut rng = Rng::new(2);
        let y = fill_rand(&mut rng, n);
        let forest = fit_forest(
            MatrixRef::new(&x, n, 4),
            MatrixRef::new(&y, n, 1),
            &ForestHyperParams { tree_count: 5, seed: 1, ..Default::default() },
        )
        .unwrap();
        assert!(forest.degenerate);
        assert!(forest.importances.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let x = vec![1.0, 2.0, 3.0];
        let y = vec![1.0, 2.0, 3.0];
        let hp = ForestHyperParams { min_leaf: 2, ..Default::default() };
        assert!(fit_forest(MatrixRef::new(&x, 3, 1), MatrixRef::new(&y, 3, 1), &hp).is_err());
    }

    #[test]
    fn prediction_fits_training_signal() {
        let mut rng = Rng::new(33);
        let n = 150;
        let x = fill_rand(&mut rng, n * 2);
        let y: Vec<f64> = (0..n).map(|i| if x[i * 2] > 0.0 { 2.0 } else { -2.0 }).collect();
        let forest = fit_forest(
            MatrixRef::new(&x, n, 2),
            MatrixRef::new(&y, n, 1),
            &ForestHyperParams { tree_count: 20, seed: 7, ..Default::default() },
        )
        .unwrap();
        let pred = forest.predict(&[1.0, 0.0]);
        assert!(pred[0] > 1.0, "pred {:?}", pred);
        let pred = forest.predict(&[-1.0, 0.0]);
        assert!(pred[0] < -1.0, "pred {:?}", pred);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = Rng::new(5);
        let (n, p) = (80, 4);
        let x = fill_rand(&mut rng, n * p);
        let y = fill_rand(&mut rng, n);
        let hp = ForestHyperParams { tree_count: 10, seed: 11, ..Default::default() };
        let f1 = fit_forest(MatrixRef::new(&x, n, p), MatrixRef::new(&y, n, 1), &hp).unwrap();
        let f2 = fit_forest(MatrixRef::new(&x, n, p), MatrixRef::new(&y, n, 1), &hp).unwrap();
        assert_eq!(f1.importances, f2.importances);
    }
}

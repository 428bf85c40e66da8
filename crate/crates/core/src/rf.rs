//! CART classification trees, bagged forests and the two-stage
//! (all features → top-k by Gini importance → larger forest) fit.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{AnnotatedDataset, ExpressionMatrix};
use crate::preprocess::downsample_classes;
use crate::rng::{self, Rng};

pub const FORMAT_VERSION: u32 = 1;

/// Gini impurity `1 − Σ p_c²` of a class histogram.
pub fn gini(counts: &[usize]) -> Result<f64> {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::data("gini impurity of an empty node"));
    }
    Ok(gini_unchecked(counts, n))
}

fn gini_unchecked(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Impurity decrease of splitting a node of `n` samples into `left`/`right`.
pub fn gini_decrease(parent: &[usize], left: &[usize], right: &[usize]) -> f64 {
    let n: usize = parent.iter().sum();
    let nl: usize = left.iter().sum();
    let nr = n - nl;
    let (nf, nlf, nrf) = (n as f64, nl as f64, nr as f64);
    gini_unchecked(parent, n) - (nlf / nf) * gini_unchecked(left, nl) - (nrf / nf) * gini_unchecked(right, nr)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub decrease: f64,
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b { m } else { a }
}

/// Best Gini split of `samples` over `candidates`.
///
/// `values` is `features × samples`. Thresholds are midpoints between
/// consecutive distinct values; ties keep the lowest feature index and then
/// the lowest threshold. Returns `None` when no split has a positive decrease.
pub fn best_split(
    values: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    samples: &[usize],
    candidates: &[usize],
) -> Option<Split> {
    if samples.len() < 2 {
        return None;
    }
    let mut parent = vec![0usize; n_classes];
    for &s in samples {
        parent[labels[s]] += 1;
    }
    let mut sorted_candidates = candidates.to_vec();
    sorted_candidates.sort_unstable();

    let mut best: Option<Split> = None;
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(samples.len());
    let mut left = vec![0usize; n_classes];
    let mut right = vec![0usize; n_classes];
    for &f in &sorted_candidates {
        let row = values.row(f);
        pairs.clear();
        pairs.extend(samples.iter().map(|&s| (row[s], labels[s])));
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        left.fill(0);
        right.copy_from_slice(&parent);
        for i in 0..pairs.len() - 1 {
            let (v, y) = pairs[i];
            left[y] += 1;
            right[y] -= 1;
            let next = pairs[i + 1].0;
            if next <= v {
                continue;
            }
            let decrease = gini_decrease(&parent, &left, &right);
            if decrease > 0.0 && best.is_none_or(|b| decrease > b.decrease) {
                best = Some(Split {
                    feature: f,
                    threshold: midpoint(v, next),
                    decrease,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        class: usize,
    },
}

impl TreeNode {
    /// Class of one sample given a lookup from feature index to value.
    pub fn predict_with(&self, value: impl Fn(usize) -> f64) -> usize {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { class } => return *class,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if value(*feature) <= *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

struct Grower<'a> {
    values: ArrayView2<'a, f64>,
    labels: &'a [usize],
    n_classes: usize,
    mtry: usize,
    importances: Vec<f64>,
    total: f64,
}

impl Grower<'_> {
    fn grow(&mut self, samples: &mut [usize], rng: &mut Rng) -> TreeNode {
        let mut counts = vec![0usize; self.n_classes];
        for &s in samples.iter() {
            counts[self.labels[s]] += 1;
        }
        if counts.iter().filter(|&&c| c > 0).count() <= 1 {
            return TreeNode::Leaf { class: majority(&counts) };
        }
        let p = self.values.nrows();
        let candidates = index::sample(rng, p, self.mtry.min(p)).into_vec();
        let Some(split) = best_split(self.values, self.labels, self.n_classes, samples, &candidates) else {
            return TreeNode::Leaf { class: majority(&counts) };
        };
        self.importances[split.feature] += samples.len() as f64 / self.total * split.decrease;
        let row = self.values.row(split.feature);
        let mut lo = 0;
        for i in 0..samples.len() {
            if row[samples[i]] <= split.threshold {
                samples.swap(lo, i);
                lo += 1;
            }
        }
        let (l, r) = samples.split_at_mut(lo);
        let left = self.grow(l, rng);
        let right = self.grow(r, rng);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Grows one unpruned tree on a bootstrap sample.
///
/// Returns the tree and the per-feature weighted Gini decreases it produced
/// (each split contributes `n_node / n_bootstrap · Δ`).
pub fn fit_tree(
    values: ArrayView2<f64>,
    labels: &[usize],
    n_classes: usize,
    mtry: usize,
    rng: &mut Rng,
) -> (TreeNode, Vec<f64>) {
    let n = labels.len();
    let mut samples: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut g = Grower {
        values,
        labels,
        n_classes,
        mtry: mtry.max(1),
        importances: vec![0.0; values.nrows()],
        total: n as f64,
    };
    let tree = g.grow(&mut samples, rng);
    (tree, g.importances)
}

pub fn default_mtry(n_features: usize) -> usize {
    ((n_features as f64).sqrt().floor() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub format_version: u32,
    pub n_trees: usize,
    pub mtry: usize,
    pub seed: u64,
    pub feature_ids: Vec<String>,
    pub class_names: Vec<String>,
    /// Mean over trees of the summed weighted Gini decreases per feature.
    pub importances: Vec<f64>,
    pub trees: Vec<TreeNode>,
}

/// Bagged forest. Tree `t` draws from substream `(seed, "tree", t)`.
pub fn fit_forest(data: &AnnotatedDataset, n_trees: usize, mtry: Option<usize>, seed: u64) -> Result<Forest> {
    if n_trees == 0 {
        return Err(Error::config("a forest needs at least one tree"));
    }
    if data.n_samples() == 0 {
        return Err(Error::data("cannot fit a forest on zero samples"));
    }
    let p = data.n_features();
    let mtry = mtry.unwrap_or_else(|| default_mtry(p)).max(1);
    // Bootstrap indices refer to samples sorted by id, so column order is irrelevant.
    let mut by_id: Vec<usize> = (0..data.n_samples()).collect();
    by_id.sort_by(|&a, &b| data.matrix.sample_ids[a].cmp(&data.matrix.sample_ids[b]));
    let canonical;
    let data = if by_id.windows(2).all(|w| w[0] < w[1]) {
        data
    } else {
        canonical = data.subset(&by_id);
        &canonical
    };
    let values = data.matrix.values.view();
    let n_classes = data.n_classes();
    let fitted: Vec<(TreeNode, Vec<f64>)> = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::substream(seed, rng::TREE, t as u64);
            fit_tree(values, &data.labels, n_classes, mtry, &mut r)
        })
        .collect();
    let mut importances = vec![0.0; p];
    let mut trees = Vec::with_capacity(n_trees);
    for (tree, imp) in fitted {
        for (acc, v) in importances.iter_mut().zip(imp) {
            *acc += v;
        }
        trees.push(tree);
    }
    for v in &mut importances {
        *v /= n_trees as f64;
    }
    Ok(Forest {
        format_version: FORMAT_VERSION,
        n_trees,
        mtry,
        seed,
        feature_ids: data.matrix.feature_ids.clone(),
        class_names: data.class_names.clone(),
        importances,
        trees,
    })
}

#[derive(Debug, Clone)]
pub struct ForestPrediction {
    pub labels: Vec<usize>,
    /// `samples × classes`; each row sums to 1.
    pub votes: Array2<f64>,
}

impl Forest {
    /// Majority vote; `values` is `features × samples` in this forest's feature order.
    pub fn predict(&self, values: ArrayView2<f64>) -> Result<ForestPrediction> {
        if values.nrows() != self.feature_ids.len() {
            return Err(Error::Dimension {
                expected: self.feature_ids.len(),
                got: values.nrows(),
            });
        }
        let n = values.ncols();
        let k = self.class_names.len();
        let mut votes = Array2::zeros((n, k));
        for s in 0..n {
            let col = values.column(s);
            for tree in &self.trees {
                votes[[s, tree.predict_with(|f| col[f])]] += 1.0;
            }
        }
        votes /= self.trees.len() as f64;
        let labels = votes.rows().into_iter().map(|r| majority_f(r.iter().copied())).collect();
        Ok(ForestPrediction { labels, votes })
    }

    /// Predicts a matrix whose features are matched to this forest by id.
    pub fn predict_matrix(&self, matrix: &ExpressionMatrix) -> Result<ForestPrediction> {
        let pos: HashMap<&str, usize> = matrix
            .feature_ids
            .iter()
            .enumerate()
            .map(|(i, f)| (f.as_str(), i))
            .collect();
        let rows = self
            .feature_ids
            .iter()
            .map(|f| {
                pos.get(f.as_str())
                    .copied()
                    .ok_or_else(|| Error::data(format!("matrix lacks feature {f:?} used by the forest")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.predict(matrix.values.select(ndarray::Axis(0), &rows).view())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        if f.format_version != FORMAT_VERSION {
            return Err(Error::data(format!("unsupported forest format_version {}", f.format_version)));
        }
        if f.trees.len() != f.n_trees || f.importances.len() != f.feature_ids.len() {
            return Err(Error::data("forest document is inconsistent"));
        }
        Ok(f)
    }
}

fn majority_f(votes: impl Iterator<Item = f64>) -> usize {
    crate::mlp::argmax(votes)
}

pub fn predict_forest(forest: &Forest, matrix: &ExpressionMatrix) -> Result<ForestPrediction> {
    forest.predict_matrix(matrix)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub stage1_trees: usize,
    pub keep: usize,
    pub stage2_trees: usize,
    /// Downsample every class to the smallest class size before fitting.
    pub balance: bool,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            stage1_trees: 100,
            keep: 1000,
            stage2_trees: 500,
            balance: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoStage {
    pub stage1: Forest,
    /// Indices into the input feature axis, ranked by stage-1 importance.
    pub selected: Vec<usize>,
    pub forest: Forest,
}

/// Ranks features by importance (descending), ties to the lower index.
pub fn rank_by_importance(importances: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..importances.len()).collect();
    idx.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    idx
}

pub fn two_stage_fit(data: &AnnotatedDataset, cfg: &TwoStageConfig, seed: u64) -> Result<TwoStage> {
    let balanced;
    let data = if cfg.balance {
        balanced = downsample_classes(data, seed);
        &balanced
    } else {
        data
    };
    let stage1 = fit_forest(data, cfg.stage1_trees, None, rng::derive_seed(seed, "stage", 1))?;
    let selected: Vec<usize> = rank_by_importance(&stage1.importances)
        .into_iter()
        .take(cfg.keep.min(data.n_features()))
        .collect();
    let reduced = data.with_matrix(data.matrix.select_features(&selected))?;
    let forest = fit_forest(&reduced, cfg.stage2_trees, None, rng::derive_seed(seed, "stage", 2))?;
    Ok(TwoStage {
        stage1,
        selected,
        forest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[5, 5]).unwrap(), 0.5);
        assert_eq!(gini(&[10, 0]).unwrap(), 0.0);
        assert!((gini(&[1, 2, 3]).unwrap() - 11.0 / 18.0).abs() < 1e-15);
        assert!(gini(&[0, 0]).is_err());
    }

    #[test]
    fn best_split_examples() {
        let v = array![[1.0, 2.0, 9.0, 10.0]];
        let s = best_split(v.view(), &[0, 0, 1, 1], 2, &[0, 1, 2, 3], &[0]).unwrap();
        assert_eq!((s.feature, s.threshold, s.decrease), (0, 5.5, 0.5));

        let c = array![[3.0, 3.0, 3.0, 3.0]];
        assert!(best_split(c.view(), &[0, 0, 1, 1], 2, &[0, 1, 2, 3], &[0]).is_none());

        let twin = array![[1.0, 2.0, 9.0, 10.0], [1.0, 2.0, 9.0, 10.0]];
        let s = best_split(twin.view(), &[0, 0, 1, 1], 2, &[0, 1, 2, 3], &[1, 0]).unwrap();
        assert_eq!(s.feature, 0);
    }

    fn dataset(values: Array2<f64>, labels: Vec<usize>, k: usize) -> AnnotatedDataset {
        use crate::ingest::{LabelField, MetadataRow};
        let n = labels.len();
        AnnotatedDataset {
            matrix: ExpressionMatrix::new(
                (0..values.nrows()).map(|f| format!("srna:f{f}")).collect(),
                (0..n).map(|s| format!("S{s}")).collect(),
                values,
            )
            .unwrap(),
            metadata: (0..n)
                .map(|s| MetadataRow {
                    sample_id: format!("S{s}"),
                    dataset_id: "D".into(),
                    tissue: None,
                    sex: None,
                    age: None,
                })
                .collect(),
            label_field: LabelField::Tissue,
            labels,
            class_names: (0..k).map(|c| format!("c{c}")).collect(),
        }
    }

    #[test]
    fn pure_data_gives_single_leaf() {
        let v = array![[1.0, 2.0, 3.0]];
        let mut r = rng::substream(1, rng::TREE, 0);
        let (t, imp) = fit_tree(v.view(), &[1, 1, 1], 2, 1, &mut r);
        assert_eq!(t, TreeNode::Leaf { class: 1 });
        assert_eq!(imp, vec![0.0]);
    }

    #[test]
    fn four_sample_tree_is_one_split() {
        let v = array![[1.0, 2.0, 9.0, 10.0]];
        let labels = [0, 0, 1, 1];
        // Find a seed whose bootstrap draws both classes.
        for seed in 0..50 {
            let mut r = rng::substream(seed, rng::TREE, 0);
            let (t, _) = fit_tree(v.view(), &labels, 2, 1, &mut r);
            if let TreeNode::Split { threshold, feature, .. } = &t {
                assert_eq!(t.depth(), 1);
                assert_eq!(*feature, 0);
                assert!(*threshold > 2.0 && *threshold < 9.0);
                let mut r2 = rng::substream(seed, rng::TREE, 0);
                assert_eq!(fit_tree(v.view(), &labels, 2, 1, &mut r2).0, t);
                return;
            }
        }
        panic!("no bootstrap drew both classes");
    }

    #[test]
    fn full_bootstrap_split_is_at_midpoint() {
        // Bootstraps containing the inner points 2 and 9 must split at 5.5.
        let v = array![[1.0, 2.0, 9.0, 10.0]];
        let labels = [0, 0, 1, 1];
        let mut seen = false;
        for seed in 0..200 {
            let mut r = rng::substream(seed, rng::TREE, 0);
            let draws: Vec<usize> = (0..4).map(|_| r.random_range(0..4)).collect();
            if draws.contains(&1) && draws.contains(&2) {
                let mut r = rng::substream(seed, rng::TREE, 0);
                let (t, _) = fit_tree(v.view(), &labels, 2, 1, &mut r);
                match t {
                    TreeNode::Split { threshold, .. } => assert_eq!(threshold, 5.5),
                    _ => panic!("expected a split"),
                }
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn mtry_default() {
        assert_eq!(default_mtry(100), 10);
        assert_eq!(default_mtry(2), 1);
        assert_eq!(default_mtry(0), 1);
    }

    #[test]
    fn single_tree_forest_equals_fit_tree() {
        let v = array![[0.1, 0.4, 0.35, 0.8, 0.9, 0.05], [1.0, 0.0, 1.0, 0.0, 1.0, 0.2]];
        let labels = vec![0, 0, 1, 1, 1, 0];
        let d = dataset(v.clone(), labels.clone(), 2);
        let f = fit_forest(&d, 1, None, 42).unwrap();
        let mut r = rng::substream(42, rng::TREE, 0);
        let (t, imp) = fit_tree(v.view(), &labels, 2, 1, &mut r);
        assert_eq!(f.trees, vec![t.clone()]);
        assert_eq!(f.importances, imp);

        let p = f.predict(v.view()).unwrap();
        for s in 0..6 {
            assert_eq!(p.labels[s], t.predict_with(|j| v[[j, s]]));
        }
    }

    #[test]
    fn tied_vote_goes_to_lowest_class() {
        let f = Forest {
            format_version: 1,
            n_trees: 2,
            mtry: 1,
            seed: 0,
            feature_ids: vec!["srna:a".into()],
            class_names: vec!["a".into(), "b".into()],
            importances: vec![0.0],
            trees: vec![TreeNode::Leaf { class: 1 }, TreeNode::Leaf { class: 0 }],
        };
        let p = f.predict(array![[0.5]].view()).unwrap();
        assert_eq!(p.labels, vec![0]);
        assert_eq!(p.votes.row(0).sum(), 1.0);
        assert!(f.predict(array![[0.5], [0.1]].view()).is_err());
        assert_eq!(Forest::from_json(&f.to_json().unwrap()).unwrap(), f);
    }

    #[test]
    fn keep_is_capped_by_feature_count() {
        let v = Array2::from_shape_fn((5, 20), |(f, s)| ((f * 7 + s * 3) % 11) as f64);
        let labels: Vec<usize> = (0..20).map(|s| s % 2).collect();
        let d = dataset(v, labels, 2);
        let cfg = TwoStageConfig {
            stage1_trees: 3,
            keep: 1000,
            stage2_trees: 4,
            balance: true,
        };
        let ts = two_stage_fit(&d, &cfg, 5).unwrap();
        assert_eq!(ts.selected.len(), 5);
        assert_eq!(ts.forest.feature_ids.len(), 5);
        assert_eq!(ts.forest.mtry, 2);
        assert_eq!(ts.forest.trees.len(), 4);
    }

    #[test]
    fn ranking_ties_prefer_lower_index() {
        assert_eq!(rank_by_importance(&[0.1, 0.5, 0.5, 0.0]), vec![1, 2, 0, 3]);
    }
}

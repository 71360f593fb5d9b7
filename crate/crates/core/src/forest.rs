//! CART trees and bagged random forests.
//!
//! Splits are exhaustive over midpoints between consecutive distinct values.
//! Regression minimises the summed child squared error (equivalently the
//! weighted child variance); classification minimises weighted Gini impurity.
//! At each node features are visited in a random order until `mtry`
//! non-constant candidates have been scored; ties go to the lowest feature
//! index, then the smallest threshold. A row goes left iff `x <= threshold`.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Regression,
    /// Targets are class indices `0..n_classes` stored as `f64`.
    Classification { n_classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Candidate features per node; `None` uses every feature.
    pub mtry: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_samples_leaf: 1,
            mtry: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Mean target (regression) or class index (classification).
    Leaf { value: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    task: Task,
    n_features: usize,
    params: TreeParams,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn params(&self) -> TreeParams {
        self.params
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    #[inline]
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

fn check_inputs(x: &Matrix, y: &[f64], task: Task) -> Result<()> {
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Argument(format!(
            "cannot fit a tree on a {}x{} matrix",
            x.rows(),
            x.cols()
        )));
    }
    if x.rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} targets",
            x.rows(),
            y.len()
        )));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("tree inputs must not contain missing values".into()));
    }
    if let Task::Classification { n_classes } = task {
        if let Some(bad) = y
            .iter()
            .find(|&&v| v < 0.0 || v.fract() != 0.0 || v as usize >= n_classes)
        {
            return Err(Error::Argument(format!(
                "class label {bad} outside 0..{n_classes}"
            )));
        }
    }
    Ok(())
}

/// Grows one tree on all rows of `x`.
pub fn fit_tree(x: &Matrix, y: &[f64], task: Task, params: TreeParams, rng: &mut Rng) -> Result<Tree> {
    check_inputs(x, y, task)?;
    let rows: Vec<usize> = (0..x.rows()).collect();
    Ok(grow(x, y, task, params, rows, rng))
}

pub fn tree_predict(tree: &Tree, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != tree.n_features {
        return Err(Error::Shape(format!(
            "tree trained on {} features, got {}",
            tree.n_features,
            x.cols()
        )));
    }
    Ok((0..x.rows()).map(|r| tree.predict_row(x.row(r))).collect())
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    task: Task,
    params: TreeParams,
    mtry: usize,
    nodes: Vec<Node>,
    // scratch
    pairs: Vec<(f64, f64)>,
    class_left: Vec<f64>,
    class_total: Vec<f64>,
    features: Vec<usize>,
}

struct BestSplit {
    score: f64,
    feature: usize,
    threshold: f64,
}

fn grow(x: &Matrix, y: &[f64], task: Task, params: TreeParams, mut rows: Vec<usize>, rng: &mut Rng) -> Tree {
    let p = x.cols();
    let n_classes = match task {
        Task::Classification { n_classes } => n_classes,
        Task::Regression => 0,
    };
    let mut b = Builder {
        x,
        y,
        task,
        params,
        mtry: params.mtry.unwrap_or(p).clamp(1, p),
        nodes: Vec::new(),
        pairs: Vec::with_capacity(rows.len()),
        class_left: vec![0.0; n_classes],
        class_total: vec![0.0; n_classes],
        features: (0..p).collect(),
    };
    b.build(&mut rows, 0, rng);
    Tree {
        nodes: b.nodes,
        task,
        n_features: p,
        params,
    }
}

impl Builder<'_> {
    fn leaf_value(&mut self, rows: &[usize]) -> f64 {
        match self.task {
            Task::Regression if self.is_pure(rows) => self.y[rows[0]],
            Task::Regression => {
                // summed in value order so the mean does not depend on row order
                let mut vals: Vec<f64> = rows.iter().map(|&r| self.y[r]).collect();
                vals.sort_unstable_by(f64::total_cmp);
                vals.iter().sum::<f64>() / vals.len() as f64
            }
            Task::Classification { .. } => {
                self.class_total.iter_mut().for_each(|c| *c = 0.0);
                for &r in rows {
                    self.class_total[self.y[r] as usize] += 1.0;
                }
                // first maximum = smallest class index on ties
                let mut best = 0;
                for (k, &c) in self.class_total.iter().enumerate() {
                    if c > self.class_total[best] {
                        best = k;
                    }
                }
                best as f64
            }
        }
    }

    fn is_pure(&self, rows: &[usize]) -> bool {
        let first = self.y[rows[0]];
        rows.iter().all(|&r| self.y[r] == first)
    }

    fn build(&mut self, rows: &mut [usize], depth: usize, rng: &mut Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let min_leaf = self.params.min_samples_leaf.max(1);
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        let split = if depth_ok && rows.len() >= 2 * min_leaf && !self.is_pure(rows) {
            self.best_split(rows, min_leaf, rng)
        } else {
            None
        };
        let Some(split) = split else {
            let value = self.leaf_value(rows);
            self.nodes[id] = Node::Leaf { value };
            return id;
        };
        let mut cut = 0;
        for i in 0..rows.len() {
            if self.x.get(rows[i], split.feature) <= split.threshold {
                rows.swap(i, cut);
                cut += 1;
            }
        }
        let (l, r) = rows.split_at_mut(cut);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, rows: &[usize], min_leaf: usize, rng: &mut Rng) -> Option<BestSplit> {
        rng.shuffle(&mut self.features);
        let mut best: Option<BestSplit> = None;
        let mut scored = 0;
        for fi in 0..self.features.len() {
            if scored == self.mtry {
                break;
            }
            let f = self.features[fi];
            self.pairs.clear();
            self.pairs
                .extend(rows.iter().map(|&r| (self.x.get(r, f), self.y[r])));
            self.pairs
                .sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            if self.pairs[0].0 == self.pairs[self.pairs.len() - 1].0 {
                continue;
            }
            scored += 1;
            if let Some((score, threshold)) = self.scan(min_leaf) {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        score < b.score
                            || (score == b.score
                                && (f < b.feature || (f == b.feature && threshold < b.threshold)))
                    }
                };
                if better {
                    best = Some(BestSplit {
                        score,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }

    /// Best (impurity, threshold) over the sorted `pairs`; lower is better.
    fn scan(&mut self, min_leaf: usize) -> Option<(f64, f64)> {
        let n = self.pairs.len();
        let mut best: Option<(f64, f64)> = None;
        let consider = |score: f64, lo: f64, hi: f64, best: &mut Option<(f64, f64)>| {
            let mut t = 0.5 * (lo + hi);
            if t >= hi {
                t = lo;
            }
            if best.is_none_or(|(s, _)| score < s) {
                *best = Some((score, t));
            }
        };
        match self.task {
            Task::Regression => {
                let total: f64 = self.pairs.iter().map(|p| p.1).sum();
                let total_sq: f64 = self.pairs.iter().map(|p| p.1 * p.1).sum();
                let mut left = 0.0;
                for i in 0..n - 1 {
                    left += self.pairs[i].1;
                    let nl = i + 1;
                    let nr = n - nl;
                    if nl < min_leaf || nr < min_leaf || self.pairs[i].0 == self.pairs[i + 1].0 {
                        continue;
                    }
                    let right = total - left;
                    // SSE_left + SSE_right
                    let sse = total_sq - left * left / nl as f64 - right * right / nr as f64;
                    consider(sse, self.pairs[i].0, self.pairs[i + 1].0, &mut best);
                }
            }
            Task::Classification { .. } => {
                self.class_left.iter_mut().for_each(|c| *c = 0.0);
                self.class_total.iter_mut().for_each(|c| *c = 0.0);
                for p in &self.pairs {
                    self.class_total[p.1 as usize] += 1.0;
                }
                let mut sq_left = 0.0;
                let mut sq_right: f64 = self.class_total.iter().map(|c| c * c).sum();
                let pairs = std::mem::take(&mut self.pairs);
                for i in 0..n - 1 {
                    let k = pairs[i].1 as usize;
                    let cl = self.class_left[k];
                    let cr = self.class_total[k] - cl;
                    sq_left += 2.0 * cl + 1.0;
                    sq_right -= 2.0 * cr - 1.0;
                    self.class_left[k] += 1.0;
                    let nl = i + 1;
                    let nr = n - nl;
                    if nl < min_leaf || nr < min_leaf || pairs[i].0 == pairs[i + 1].0 {
                        continue;
                    }
                    // weighted Gini = n - sum_l c^2/nl - sum_r c^2/nr
                    let gini = n as f64 - sq_left / nl as f64 - sq_right / nr as f64;
                    consider(gini, pairs[i].0, pairs[i + 1].0, &mut best);
                }
                self.pairs = pairs;
            }
        }
        best
    }
}

/// The classical default candidate count: `max(1, p/3)` for regression and
/// `max(1, sqrt(p))` for classification.
pub fn default_mtry(task: Task, n_features: usize) -> usize {
    match task {
        Task::Regression => (n_features / 3).max(1),
        Task::Classification { .. } => ((n_features as f64).sqrt().floor() as usize).max(1),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// `None` applies [`default_mtry`].
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 300,
            max_depth: None,
            min_samples_leaf: 5,
            mtry: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    task: Task,
    n_features: usize,
}

impl Forest {
    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn task(&self) -> Task {
        self.task
    }
}

/// Bagged ensemble; tree `t` draws from the child stream `t` of `config.seed`,
/// so a forest of k trees is a prefix of any larger forest with the same seed.
pub fn fit_forest(x: &Matrix, y: &[f64], task: Task, config: &ForestConfig) -> Result<Forest> {
    check_inputs(x, y, task)?;
    if config.n_trees == 0 {
        return Err(Error::Argument("forest needs at least one tree".into()));
    }
    if config.min_samples_leaf == 0 {
        return Err(Error::Argument("min_samples_leaf must be at least 1".into()));
    }
    let params = TreeParams {
        max_depth: config.max_depth,
        min_samples_leaf: config.min_samples_leaf,
        mtry: Some(config.mtry.unwrap_or_else(|| default_mtry(task, x.cols()))),
    };
    let parent = Rng::new(config.seed);
    let n = x.rows();
    let trees = (0..config.n_trees as u64)
        .map(|t| {
            let mut rng = parent.child(t);
            let rows: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.below(n)).collect()
            } else {
                (0..n).collect()
            };
            grow(x, y, task, params, rows, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        task,
        n_features: x.cols(),
    })
}

/// Mean over trees (regression) or majority vote with ties to the smallest
/// class index (classification).
pub fn forest_predict(forest: &Forest, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != forest.n_features {
        return Err(Error::Shape(format!(
            "forest trained on {} features, got {}",
            forest.n_features,
            x.cols()
        )));
    }
    let preds = match forest.task {
        Task::Regression => (0..x.rows())
            .map(|r| {
                let row = x.row(r);
                forest.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / forest.trees.len() as f64
            })
            .collect(),
        Task::Classification { n_classes } => {
            let mut votes = vec![0usize; n_classes];
            (0..x.rows())
                .map(|r| {
                    let row = x.row(r);
                    votes.iter_mut().for_each(|v| *v = 0);
                    for t in &forest.trees {
                        votes[t.predict_row(row) as usize] += 1;
                    }
                    let mut best = 0;
                    for (k, &v) in votes.iter().enumerate() {
                        if v > votes[best] {
                            best = k;
                        }
                    }
                    best as f64
                })
                .collect()
        }
    };
    Ok(preds)
}

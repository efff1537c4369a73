use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{make_run, Frame, ImputationRun, Kind};
use crate::missing::MaskedDataset;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features tried per split.
    pub mtry: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    /// Fit on `rows` of a row-major matrix `x` with `p` columns.
    pub fn fit(x: &[f64], p: usize, y: &[f64], rows: &[usize], params: &TreeParams, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut rows = rows.to_vec();
        tree.grow(x, p, y, &mut rows, 0, params, rng);
        tree
    }

    fn grow(&mut self, x: &[f64], p: usize, y: &[f64], rows: &mut [usize], depth: usize, params: &TreeParams, rng: &mut ChaCha8Rng) -> usize {
        let n = rows.len();
        let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / n as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));
        if depth >= params.max_depth || n < 2 * params.min_leaf || rows.iter().all(|&r| y[r] == y[rows[0]]) {
            return id;
        }
        let total: f64 = rows.iter().map(|&r| y[r]).sum();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
        for feature in sample(rng, p, params.mtry.min(p)).into_iter() {
            order.clear();
            order.extend(rows.iter().map(|&r| (x[r * p + feature], y[r])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = 0.0;
            for i in 0..n - 1 {
                left += order[i].1;
                let nl = i + 1;
                if order[i].0 == order[i + 1].0 || nl < params.min_leaf || n - nl < params.min_leaf {
                    continue;
                }
                let right = total - left;
                // Maximizing this is equivalent to minimizing the child SSE.
                let score = left * left / nl as f64 + right * right / (n - nl) as f64;
                if best.is_none_or(|b| score > b.0 + 1e-12) {
                    best = Some((score, feature, (order[i].0 + order[i + 1].0) / 2.0));
                }
            }
        }
        let Some((score, feature, threshold)) = best else { return id };
        if score <= total * total / n as f64 + 1e-12 {
            return id;
        }
        let mut split = 0;
        for i in 0..n {
            if x[rows[i] * p + feature] <= threshold {
                rows.swap(i, split);
                split += 1;
            }
        }
        let (l, r) = rows.split_at_mut(split);
        let left = self.grow(x, p, y, l, depth + 1, params, rng);
        let right = self.grow(x, p, y, r, depth + 1, params, rng);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split { feature, threshold, left, right } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    pub trees: Vec<RegressionTree>,
}

impl RandomForest {
    /// Bagged trees, each on a bootstrap of `sample_fraction · |rows|` rows.
    pub fn fit(x: &[f64], p: usize, y: &[f64], rows: &[usize], trees: usize, sample_fraction: f64, params: &TreeParams, seed: u64) -> Self {
        let size = ((rows.len() as f64 * sample_fraction).ceil() as usize).max(1);
        let trees = (0..trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream(seed, &[b"tree", &(t as u64).to_le_bytes()]);
                let bag: Vec<usize> = (0..size).map(|_| rows[rng.random_range(0..rows.len())]).collect();
                RegressionTree::fit(x, p, y, &bag, params, &mut rng)
            })
            .collect();
        RandomForest { trees }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub max_iter: usize,
    pub sample_fraction: f64,
    /// Features per split; `None` means ⌊√p⌋.
    pub mtry: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 50, max_depth: 8, min_leaf: 3, max_iter: 10, sample_fraction: 0.8, mtry: None }
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Iterative forest imputation. Stops when the summed squared change of
/// the imputed cells grows, keeping the previous iteration's values.
pub fn missforest(masked: &MaskedDataset, config: &ForestConfig, seed: u64) -> ImputationRun {
    let mut frame = Frame::new(masked);
    let order = frame.visit_order();
    for &j in &order {
        let fill = median(frame.observed_values(j)).unwrap_or(3.0);
        for r in frame.rows_of(j, Kind::Del) {
            frame.y[r][j] = fill;
        }
    }
    let mut prev_change = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..config.max_iter {
        let before = frame.clone();
        for &j in &order {
            let obs = frame.rows_of(j, Kind::Obs);
            let del = frame.rows_of(j, Kind::Del);
            if obs.is_empty() {
                continue;
            }
            let rows = frame.predictors(j, &[]);
            let p = rows[0].len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let y: Vec<f64> = frame.y.iter().map(|r| r[j]).collect();
            let params = TreeParams {
                max_depth: config.max_depth,
                min_leaf: config.min_leaf,
                mtry: config.mtry.unwrap_or(((p as f64).sqrt() as usize).max(1)),
            };
            let forest_seed = crate::rng::derive_seed(seed, &[b"missforest", &(it as u64).to_le_bytes(), &(j as u64).to_le_bytes()]);
            let forest = RandomForest::fit(&flat, p, &y, &obs, config.trees, config.sample_fraction, &params, forest_seed);
            for r in del {
                frame.y[r][j] = forest.predict(&rows[r]);
            }
        }
        iterations = it + 1;
        let change: f64 = (0..frame.rows())
            .flat_map(|r| (0..frame.fields.len()).map(move |j| (r, j)))
            .filter(|&(r, j)| frame.kind[r][j] == Kind::Del)
            .map(|(r, j)| (frame.y[r][j] - before.y[r][j]).powi(2))
            .sum();
        if change > prev_change {
            frame = before;
            break;
        }
        prev_change = change;
        if change == 0.0 {
            break;
        }
    }
    let ds = frame.complete(masked);
    let mut cfg = serde_json::to_value(config).unwrap();
    cfg["iterations"] = iterations.into();
    make_run("missforest", seed, cfg, masked, vec![ds])
}

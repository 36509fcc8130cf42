//! Hybrid feature construction and a random-forest regressor over it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader};
use crate::error::{Error, Result};
use crate::handcrafted::LowLevelDescriptor;
use crate::mlp::DeepContrastFeature;

/// `[DCF / |DCF| | low / |low|]`; a zero block stays zero.
#[derive(Clone, Debug, PartialEq)]
pub struct HdhfVector(pub Vec<f64>);

pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

pub fn build_hdhf(dcf: &DeepContrastFeature, low: &LowLevelDescriptor) -> HdhfVector {
    let mut v = l2_normalized(&dcf.0);
    v.extend(l2_normalized(low.as_slice()));
    HdhfVector(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// `None` uses `ceil(sqrt(dim))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: Some(12),
            min_leaf: 5,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    /// One unbootstrapped, fully grown tree over every feature.
    pub fn memorize(seed: u64) -> Self {
        ForestParams {
            n_trees: 1,
            max_depth: None,
            min_leaf: 1,
            features_per_split: Some(usize::MAX),
            bootstrap: false,
            seed,
        }
    }

    fn mtry(&self, dim: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize)
            .clamp(1, dim)
    }
}

/// Flat tree node. `feature < 0` marks a leaf.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Node {
    pub feature: i32,
    pub threshold: f64,
    pub left: i32,
    pub right: i32,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.feature < 0 {
                return n.value;
            }
            i = if x[n.feature as usize] <= n.threshold {
                n.left
            } else {
                n.right
            } as usize;
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.feature < 0 {
                0
            } else {
                1 + walk(t, n.left as usize).max(walk(t, n.right as usize))
            }
        }
        walk(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForestModel {
    pub dim: usize,
    pub params: ForestParams,
    pub trees: Vec<Tree>,
    /// Out-of-bag mean absolute error, when bootstrapping left any sample
    /// out of at least one tree.
    pub oob_mae: Option<f64>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    dim: usize,
    mtry: usize,
    min_leaf: usize,
    max_depth: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    pairs: Vec<(f64, f64)>,
}

struct Split {
    feature: usize,
    threshold: f64,
    sse: f64,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> i32 {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node {
            feature: -1,
            threshold: 0.0,
            left: -1,
            right: -1,
            value: mean.clamp(0.0, 1.0),
        });
        self.nodes.len() as i32 - 1
    }

    /// Lowest summed squared error over cut points of one feature.
    fn best_cut(&mut self, idx: &[usize], f: usize) -> Option<(f64, f64)> {
        self.pairs.clear();
        self.pairs.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
        self.pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let n = self.pairs.len();
        let (total, total_sq) = self.pairs.iter().fold((0.0, 0.0), |(s, q), p| (s + p.1, q + p.1 * p.1));
        let mut best: Option<(f64, f64)> = None;
        let (mut ls, mut lq) = (0.0, 0.0);
        for k in 1..n {
            let y = self.pairs[k - 1].1;
            ls += y;
            lq += y * y;
            if k < self.min_leaf || n - k < self.min_leaf {
                continue;
            }
            let (a, b) = (self.pairs[k - 1].0, self.pairs[k].0);
            if a == b {
                continue;
            }
            let (rs, rq) = (total - ls, total_sq - lq);
            let sse = (lq - ls * ls / k as f64) + (rq - rs * rs / (n - k) as f64);
            if best.map_or(true, |(s, _)| sse < s) {
                let mid = a + (b - a) / 2.0;
                best = Some((sse, if mid < b { mid } else { a }));
            }
        }
        best
    }

    fn find_split(&mut self, idx: &[usize]) -> Option<Split> {
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.shuffle(&mut self.rng);
        let mut best: Option<Split> = None;
        for (tried, &f) in order.iter().enumerate() {
            // Keep drawing past the quota only while no split is valid.
            if tried >= self.mtry && best.is_some() {
                break;
            }
            if let Some((sse, threshold)) = self.best_cut(idx, f) {
                if best.as_ref().map_or(true, |b| sse < b.sse) {
                    best = Some(Split { feature: f, threshold, sse });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> i32 {
        let first = self.y[idx[0]];
        let pure = idx.iter().all(|&i| self.y[i] == first);
        if pure || depth >= self.max_depth || idx.len() < 2 * self.min_leaf.max(1) {
            return self.leaf(idx);
        }
        let Some(split) = self.find_split(idx) else {
            return self.leaf(idx);
        };
        let at = self.nodes.len();
        self.nodes.push(Node {
            feature: split.feature as i32,
            threshold: split.threshold,
            left: -1,
            right: -1,
            value: 0.0,
        });
        let mut lo = 0;
        for k in 0..idx.len() {
            if self.x[idx[k]][split.feature] <= split.threshold {
                idx.swap(lo, k);
                lo += 1;
            }
        }
        let (left, right) = idx.split_at_mut(lo);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[at].left = l;
        self.nodes[at].right = r;
        at as i32
    }
}

fn check_dim(x: &[f64], dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::len_mismatch("forest input", dim, x.len()));
    }
    Ok(())
}

/// Trains on `(features, label)` pairs. Each tree draws its own bootstrap
/// and feature subsets from a stream keyed by its index, so results do not
/// depend on scheduling.
pub fn forest_train(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Result<ForestModel> {
    if x.is_empty() {
        return Err(Error::Empty("forest training set".into()));
    }
    if x.len() != y.len() {
        return Err(Error::len_mismatch("forest labels", x.len(), y.len()));
    }
    if params.n_trees == 0 {
        return Err(Error::InvalidArgument("forest needs at least one tree".into()));
    }
    let dim = x[0].len();
    for row in x {
        check_dim(row, dim)?;
    }
    if let Some(bad) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("label {bad} outside [0, 1]")));
    }
    let n = x.len();
    let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let mut idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut in_bag = vec![false; n];
            idx.iter().for_each(|&i| in_bag[i] = true);
            let mut b = Builder {
                x,
                y,
                dim,
                mtry: params.mtry(dim),
                min_leaf: params.min_leaf.max(1),
                max_depth: params.max_depth.unwrap_or(usize::MAX),
                rng,
                nodes: Vec::new(),
                pairs: Vec::with_capacity(n),
            };
            b.grow(&mut idx, 0);
            (Tree { nodes: b.nodes }, in_bag)
        })
        .collect();

    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0usize; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_sum[i] += tree.predict(&x[i]);
            oob_count[i] += 1;
        }
    }
    let covered: Vec<usize> = (0..n).filter(|&i| oob_count[i] > 0).collect();
    let oob_mae = (!covered.is_empty()).then(|| {
        covered.iter().map(|&i| (oob_sum[i] / oob_count[i] as f64 - y[i]).abs()).sum::<f64>() / covered.len() as f64
    });
    Ok(ForestModel {
        dim,
        params: params.clone(),
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        oob_mae,
    })
}

/// The low-level-only comparison forest; identical apart from the input.
pub fn forest_lf_train(x: &[LowLevelDescriptor], y: &[f64], params: &ForestParams) -> Result<ForestModel> {
    let rows: Vec<Vec<f64>> = x.iter().map(|d| d.as_slice().to_vec()).collect();
    forest_train(&rows, y, params)
}

pub fn forest_predict(model: &ForestModel, x: &[f64]) -> Result<f64> {
    check_dim(x, model.dim)?;
    let sum: f64 = model.trees.iter().map(|t| t.predict(x)).sum();
    Ok((sum / model.trees.len() as f64).clamp(0.0, 1.0))
}

/// Tree-major evaluation of many rows.
pub fn forest_predict_batch(model: &ForestModel, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    for r in rows {
        check_dim(r, model.dim)?;
    }
    let mut sums = vec![0.0; rows.len()];
    for tree in &model.trees {
        for (s, r) in sums.iter_mut().zip(rows) {
            *s += tree.predict(r);
        }
    }
    let n = model.trees.len() as f64;
    Ok(sums.into_iter().map(|s| (s / n).clamp(0.0, 1.0)).collect())
}

const FOREST_MAGIC: &[u8; 4] = b"SRFR";

#[derive(Serialize, Deserialize)]
struct ForestHeader {
    dim: usize,
    params: ForestParams,
    oob_mae: Option<f64>,
    node_counts: Vec<usize>,
}

impl ForestModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ForestHeader {
            dim: self.dim,
            params: self.params.clone(),
            oob_mae: self.oob_mae,
            node_counts: self.trees.iter().map(|t| t.nodes.len()).collect(),
        };
        let mut payload = Vec::new();
        for n in self.trees.iter().flat_map(|t| &t.nodes) {
            payload.extend_from_slice(&n.feature.to_le_bytes());
            payload.extend_from_slice(&n.threshold.to_le_bytes());
            payload.extend_from_slice(&n.left.to_le_bytes());
            payload.extend_from_slice(&n.right.to_le_bytes());
            payload.extend_from_slice(&n.value.to_le_bytes());
        }
        container::encode(FOREST_MAGIC, &header, &payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = container::read_file(path)?;
        let (header, payload): (ForestHeader, _) = container::decode(path, FOREST_MAGIC, &bytes)?;
        let mut reader = Reader::new(path, payload);
        let mut trees = Vec::with_capacity(header.node_counts.len());
        for &count in &header.node_counts {
            let mut nodes = Vec::with_capacity(count);
            for _ in 0..count {
                nodes.push(Node {
                    feature: reader.i32()?,
                    threshold: reader.f64()?,
                    left: reader.i32()?,
                    right: reader.i32()?,
                    value: reader.f64()?,
                });
            }
            let valid = |c: i32| c >= 0 && (c as usize) < count;
            if count == 0 || nodes.iter().any(|n| n.feature >= 0 && (!valid(n.left) || !valid(n.right) || n.feature as usize >= header.dim)) {
                return Err(Error::malformed(path, "invalid tree structure"));
            }
            trees.push(Tree { nodes });
        }
        reader.finish()?;
        Ok(ForestModel {
            dim: header.dim,
            params: header.params,
            trees,
            oob_mae: header.oob_mae,
        })
    }
}

//! Least-squares fusion of per-level saliency maps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, SaliencyMap};

pub const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alphas: Vec<f64>,
    /// `Σ‖y - Gα‖² + RIDGE·‖α‖²` at the fitted weights.
    pub residual: f64,
}

impl FusionWeights {
    pub fn uniform(levels: usize) -> Self {
        FusionWeights {
            alphas: vec![1.0 / levels as f64; levels],
            residual: f64::NAN,
        }
    }
}

fn check_levels(maps: &[SaliencyMap], levels: usize, w: usize, h: usize) -> Result<()> {
    if maps.len() != levels {
        return Err(Error::len_mismatch("level maps", levels, maps.len()));
    }
    for m in maps {
        if m.width() != w || m.height() != h {
            return Err(Error::size_mismatch("level map", (w, h), (m.width(), m.height())));
        }
    }
    Ok(())
}

/// Regularized objective for arbitrary weights.
pub fn fusion_objective(level_maps: &[Vec<SaliencyMap>], gts: &[BinaryMask], alphas: &[f64]) -> f64 {
    let mut total = RIDGE * alphas.iter().map(|a| a * a).sum::<f64>();
    for (maps, gt) in level_maps.iter().zip(gts) {
        for (p, &g) in gt.values().iter().enumerate() {
            let pred: f64 = maps.iter().zip(alphas).map(|(m, a)| a * m.values()[p]).sum();
            let e = g as u8 as f64 - pred;
            total += e * e;
        }
    }
    total
}

/// Solves `(GᵀG + RIDGE·I) α = Gᵀy` over every pixel of every image.
pub fn fit_fusion(level_maps: &[Vec<SaliencyMap>], gts: &[BinaryMask]) -> Result<FusionWeights> {
    if level_maps.is_empty() {
        return Err(Error::Empty("fusion validation set".into()));
    }
    if level_maps.len() != gts.len() {
        return Err(Error::len_mismatch("fusion ground truths", level_maps.len(), gts.len()));
    }
    let m = level_maps[0].len();
    if m == 0 {
        return Err(Error::Empty("fusion levels".into()));
    }
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    for (maps, gt) in level_maps.iter().zip(gts) {
        check_levels(maps, m, gt.width(), gt.height())?;
        let mut row = vec![0.0; m];
        for (p, &g) in gt.values().iter().enumerate() {
            for (k, map) in maps.iter().enumerate() {
                row[k] = map.values()[p];
            }
            for a in 0..m {
                if g {
                    rhs[a] += row[a];
                }
                for b in a..m {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    for a in 0..m {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    if gram.iter().all(|&v| v == 0.0) {
        return Err(Error::Singular("fusion design matrix is all zero".into()));
    }
    let system = gram + DMatrix::identity(m, m) * RIDGE;
    let chol = system
        .cholesky()
        .ok_or_else(|| Error::Singular("fusion normal equations".into()))?;
    let alphas: Vec<f64> = chol.solve(&rhs).iter().copied().collect();
    let residual = fusion_objective(level_maps, gts, &alphas);
    Ok(FusionWeights { alphas, residual })
}

/// Pixelwise weighted sum, clamped to [0, 1].
pub fn fuse(level_maps: &[SaliencyMap], weights: &FusionWeights) -> Result<SaliencyMap> {
    let first = level_maps
        .first()
        .ok_or_else(|| Error::Empty("level maps".into()))?;
    check_levels(level_maps, weights.alphas.len(), first.width(), first.height())?;
    let n = first.values().len();
    let mut out = vec![0.0; n];
    for (map, &a) in level_maps.iter().zip(&weights.alphas) {
        for (o, &v) in out.iter_mut().zip(map.values()) {
            *o += a * v;
        }
    }
    SaliencyMap::from_clamped(first.width(), first.height(), out)
}

//! Fully connected binary CRF refinement by synchronous mean-field updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{RasterImage, SaliencyMap};

pub const PROB_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CrfBackend {
    /// Every pixel pair.
    Exact,
    /// Pairs within a square window sized so the dropped spatial kernel
    /// weight is below `1e-16` of its peak.
    Windowed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    pub w1: f64,
    pub w2: f64,
    /// Spatial width of the bilateral kernel, in pixels.
    pub sigma_alpha: f64,
    /// Color width of the bilateral kernel, in 8-bit RGB units.
    pub sigma_beta: f64,
    /// Width of the smoothness kernel, in pixels.
    pub sigma_gamma: f64,
    pub iterations: usize,
    pub backend: CrfBackend,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w1: 3.0,
            w2: 5.0,
            sigma_alpha: 3.0,
            sigma_beta: 50.0,
            sigma_gamma: 3.0,
            iterations: 10,
            backend: CrfBackend::Windowed,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.sigma_alpha, self.sigma_beta, self.sigma_gamma];
        if widths.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("CRF kernel widths must be positive".into()));
        }
        if [self.w1, self.w2].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("CRF kernel weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Pairwise weight for squared pixel distance `d2` and squared color
    /// distance `c2`.
    pub fn kernel(&self, d2: f64, c2: f64) -> f64 {
        let a = self.sigma_alpha * self.sigma_alpha;
        let b = self.sigma_beta * self.sigma_beta;
        let g = self.sigma_gamma * self.sigma_gamma;
        self.w1 * (-d2 / (2.0 * a) - c2 / (2.0 * b)).exp() + self.w2 * (-d2 / (2.0 * g)).exp()
    }

    pub fn window_radius(&self) -> usize {
        let s = self.sigma_alpha.max(self.sigma_gamma);
        (s * (2.0 * 1e16f64.ln()).sqrt()).ceil() as usize
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn color_dist2(a: [u8; 3], b: [u8; 3]) -> u32 {
    (0..3)
        .map(|c| {
            let d = a[c] as i32 - b[c] as i32;
            (d * d) as u32
        })
        .sum()
}

/// Messages `Σ_j k(i,j) Q_j(1)` and `Σ_j k(i,j)` for every pixel over all pairs.
fn exact_messages(img: &RasterImage, params: &CrfParams, q1: &[f64]) -> Vec<(f64, f64)> {
    let w = img.width();
    let px = img.pixels();
    (0..px.len())
        .into_par_iter()
        .map(|i| {
            let (xi, yi) = ((i % w) as f64, (i / w) as f64);
            let mut on = 0.0;
            let mut total = 0.0;
            for (j, &pj) in px.iter().enumerate() {
                if j == i {
                    continue;
                }
                let (dx, dy) = ((j % w) as f64 - xi, (j / w) as f64 - yi);
                let k = params.kernel(dx * dx + dy * dy, color_dist2(px[i], pj) as f64);
                on += k * q1[j];
                total += k;
            }
            (on, total)
        })
        .collect()
}

/// Window offsets `(dx, dy)` in the half-plane after `(0, 0)` with their
/// bilateral spatial and smoothness factors.
struct Window {
    offsets: Vec<(isize, isize, f64, f64)>,
    color: Vec<f64>,
}

impl Window {
    fn new(params: &CrfParams, w: usize, h: usize) -> Self {
        let r = params.window_radius() as isize;
        let (rx, ry) = (r.min(w as isize - 1), r.min(h as isize - 1));
        let a = 2.0 * params.sigma_alpha * params.sigma_alpha;
        let g = 2.0 * params.sigma_gamma * params.sigma_gamma;
        let mut offsets = Vec::new();
        for dy in 0..=ry {
            for dx in -rx..=rx {
                if dy == 0 && dx <= 0 {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                offsets.push((dx, dy, params.w1 * (-d2 / a).exp(), params.w2 * (-d2 / g).exp()));
            }
        }
        let b = 2.0 * params.sigma_beta * params.sigma_beta;
        let color = (0..=3 * 255 * 255).map(|c2| (-(c2 as f64) / b).exp()).collect();
        Window { offsets, color }
    }

    /// Symmetric accumulation: each unordered pair is visited once.
    fn messages(&self, img: &RasterImage, q1: &[f64]) -> Vec<(f64, f64)> {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let px = img.pixels();
        let mut out = vec![(0.0, 0.0); px.len()];
        for &(dx, dy, sa, sg) in &self.offsets {
            let x_lo = (-dx).max(0);
            let x_hi = (w - dx).min(w);
            for y in 0..(h - dy) {
                let row = (y * w) as usize;
                let nrow = ((y + dy) * w) as usize;
                for x in x_lo..x_hi {
                    let i = row + x as usize;
                    let j = nrow + (x + dx) as usize;
                    let k = sa * self.color[color_dist2(px[i], px[j]) as usize] + sg;
                    out[i].0 += k * q1[j];
                    out[i].1 += k;
                    out[j].0 += k * q1[i];
                    out[j].1 += k;
                }
            }
        }
        out
    }
}

fn check(img: &RasterImage, init: &SaliencyMap) -> Result<()> {
    if img.width() != init.width() || img.height() != init.height() {
        return Err(Error::size_mismatch(
            "CRF image vs map",
            (img.width(), img.height()),
            (init.width(), init.height()),
        ));
    }
    Ok(())
}

/// Runs mean-field and returns `Q(1)` after each iteration, the last entry
/// being the refined map. With zero iterations the clamped initialization is
/// returned alone.
pub fn crf_trace(img: &RasterImage, init: &SaliencyMap, params: &CrfParams) -> Result<Vec<Vec<f64>>> {
    check(img, init)?;
    params.validate()?;
    let prior: Vec<f64> = init
        .values()
        .iter()
        .map(|&s| s.clamp(PROB_EPS, 1.0 - PROB_EPS))
        .collect();
    let unary: Vec<f64> = prior.iter().map(|&p| logit(p)).collect();
    let mut q1 = prior.clone();
    let mut trace = vec![q1.clone()];
    let window = matches!(params.backend, CrfBackend::Windowed).then(|| Window::new(params, img.width(), img.height()));
    for _ in 0..params.iterations {
        let msgs = match &window {
            Some(win) => win.messages(img, &q1),
            None => exact_messages(img, params, &q1),
        };
        // Q_i(1) ∝ P_i(1)·exp(-Σ k·Q_j(0)), Q_i(0) ∝ P_i(0)·exp(-Σ k·Q_j(1)).
        // Cancelling messages return the prior itself rather than its
        // sigmoid-of-logit round trip.
        q1 = (0..prior.len())
            .map(|i| {
                let (on, total) = msgs[i];
                let m1 = total - on;
                let m0 = on;
                let d = m0 - m1;
                if d == 0.0 {
                    prior[i]
                } else {
                    sigmoid(unary[i] + d)
                }
            })
            .collect();
        trace.push(q1.clone());
    }
    Ok(trace)
}

pub fn crf_refine(img: &RasterImage, init: &SaliencyMap, params: &CrfParams) -> Result<SaliencyMap> {
    let q = crf_trace(img, init, params)?.pop().expect("trace is non-empty");
    SaliencyMap::from_clamped(img.width(), img.height(), q)
}

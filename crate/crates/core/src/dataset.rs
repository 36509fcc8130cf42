//! Annotation tooling: label consistency across annotators, majority-vote
//! ground truth, and the color-contrast selection criterion.

use crate::error::{Error, Result};
use crate::handcrafted::{chi_square, color_histogram, ColorSpace, BINS_PER_CHANNEL};
use crate::imaging::{BinaryMask, RasterImage};

pub const CONSISTENCY_THRESHOLD: f64 = 0.9;
pub const CONTRAST_THRESHOLD: f64 = 0.7;
pub const RING_RADIUS: usize = 15;

fn same_sizes(masks: &[BinaryMask]) -> Result<()> {
    let first = masks.first().ok_or_else(|| Error::Empty("annotation masks".into()))?;
    for m in masks {
        if !m.same_size(first.width(), first.height()) {
            return Err(Error::size_mismatch(
                "annotation mask",
                (first.width(), first.height()),
                (m.width(), m.height()),
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Consistency {
    pub intersection: usize,
    pub union: usize,
}

impl Consistency {
    /// `|∩| / |∪|`, and 1 when no annotator marked anything.
    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    /// Exact rational comparison against `threshold` at 1e-6 resolution.
    pub fn passes(&self, threshold: f64) -> bool {
        if self.union == 0 {
            return true;
        }
        let need = (threshold * 1e6).round() as u128;
        self.intersection as u128 * 1_000_000 >= need * self.union as u128
    }
}

pub fn consistency_counts(masks: &[BinaryMask]) -> Result<Consistency> {
    same_sizes(masks)?;
    let n = masks[0].values().len();
    let (mut intersection, mut union) = (0, 0);
    for p in 0..n {
        let votes = masks.iter().filter(|m| m.values()[p]).count();
        intersection += (votes == masks.len()) as usize;
        union += (votes > 0) as usize;
    }
    Ok(Consistency { intersection, union })
}

pub fn label_consistency(masks: &[BinaryMask]) -> Result<f64> {
    Ok(consistency_counts(masks)?.value())
}

/// Salient where at least two of three annotators agree.
pub fn majority_gt(masks: &[BinaryMask]) -> Result<BinaryMask> {
    if masks.len() != 3 {
        return Err(Error::Dataset(format!("majority vote needs 3 masks, got {}", masks.len())));
    }
    same_sizes(masks)?;
    let values = (0..masks[0].values().len())
        .map(|p| masks.iter().filter(|m| m.values()[p]).count() >= 2)
        .collect();
    BinaryMask::new(masks[0].width(), masks[0].height(), values)
}

/// 4-connected components of the set pixels, in raster order of their first
/// pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<u32>> {
    let (w, h) = (mask.width(), mask.height());
    let v = mask.values();
    let mut seen = vec![false; v.len()];
    let mut out = Vec::new();
    for start in 0..v.len() {
        if !v[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            comp.push(p as u32);
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if v[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

pub fn touches_border(mask: &BinaryMask) -> bool {
    let (w, h) = (mask.width(), mask.height());
    (0..w).any(|x| mask.get(x, 0) || mask.get(x, h - 1)) || (0..h).any(|y| mask.get(0, y) || mask.get(w - 1, y))
}

/// Pixels within Euclidean distance `radius` of `pixels` but not in it.
pub fn dilation_ring(width: usize, height: usize, pixels: &[u32], radius: usize) -> Vec<u32> {
    let mut inside = vec![false; width * height];
    for &p in pixels {
        inside[p as usize] = true;
    }
    let r = radius as isize;
    let disk: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut ring = vec![false; width * height];
    for &p in pixels {
        let (x, y) = ((p as usize % width) as isize, (p as usize / width) as isize);
        // Interior pixels add nothing beyond what their boundary reaches.
        let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize || !inside[ny as usize * width + nx as usize]
        });
        if !edge {
            continue;
        }
        for &(dx, dy) in &disk {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && nx < width as isize && ny < height as isize {
                ring[ny as usize * width + nx as usize] = true;
            }
        }
    }
    (0..width * height)
        .filter(|&i| ring[i] && !inside[i])
        .map(|i| i as u32)
        .collect()
}

/// Minimum over salient components of the χ² distance between the
/// component's RGB histogram and that of its surrounding ring.
pub fn color_contrast_criterion(img: &RasterImage, gt: &BinaryMask, radius: usize) -> Result<f64> {
    if !gt.same_size(img.width(), img.height()) {
        return Err(Error::size_mismatch(
            "ground truth vs image",
            (img.width(), img.height()),
            (gt.width(), gt.height()),
        ));
    }
    let comps = connected_components(gt);
    if comps.is_empty() {
        return Err(Error::Empty("ground truth has no salient pixels".into()));
    }
    let rgb = |pixels: &[u32]| -> Vec<[f64; 3]> {
        pixels.iter().map(|&p| img.pixels()[p as usize].map(f64::from)).collect()
    };
    let mut best = f64::INFINITY;
    for comp in &comps {
        let ring = dilation_ring(img.width(), img.height(), comp, radius);
        let a = color_histogram(&rgb(comp), ColorSpace::Rgb, BINS_PER_CHANNEL);
        let b = color_histogram(&rgb(&ring), ColorSpace::Rgb, BINS_PER_CHANNEL);
        best = best.min(chi_square(&a, &b)?);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationCheck {
    pub consistency: Consistency,
    pub included: bool,
    /// Majority ground truth for included images.
    pub gt: Option<BinaryMask>,
    /// Criterion value on the majority ground truth, when it has salient pixels.
    pub contrast: Option<f64>,
    pub components: usize,
    pub touches_border: bool,
}

pub fn check_annotations(img: &RasterImage, masks: &[BinaryMask]) -> Result<AnnotationCheck> {
    let consistency = consistency_counts(masks)?;
    let included = consistency.passes(CONSISTENCY_THRESHOLD);
    let majority = majority_gt(masks)?;
    let contrast = if majority.count() > 0 {
        Some(color_contrast_criterion(img, &majority, RING_RADIUS)?)
    } else {
        None
    };
    Ok(AnnotationCheck {
        consistency,
        included,
        components: connected_components(&majority).len(),
        touches_border: touches_border(&majority),
        gt: included.then_some(majority),
        contrast,
    })
}

//! Graph-based segmentation (Felzenszwalb & Huttenlocher) and the
//! multi-level decomposition built on top of it.

use std::path::Path;

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RasterImage;

const SMOOTHING_SIGMA: f64 = 0.8;

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn point(x: usize, y: usize) -> Self {
        BoundingBox {
            x0: x,
            y0: y,
            x1: x,
            y1: y,
        }
    }

    pub fn extend(&mut self, x: usize, y: usize) {
        self.x0 = self.x0.min(x);
        self.y0 = self.y0.min(y);
        self.x1 = self.x1.max(x);
        self.y1 = self.y1.max(y);
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    /// Flat pixel indices in raster order.
    pub pixels: Vec<u32>,
    pub bbox: BoundingBox,
}

impl Region {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Parameters a level was produced with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub k: f64,
    pub min_size: usize,
}

/// One nonoverlapping decomposition of an image into 4-connected regions.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub level: usize,
    width: usize,
    height: usize,
    labels: Vec<u32>,
    regions: Vec<Region>,
    adjacency: Vec<Vec<usize>>,
    pub params: Option<SegmentParams>,
}

impl Segmentation {
    /// Builds a segmentation from an arbitrary label grid. Labels are split
    /// into 4-connected components and renumbered densely in raster order of
    /// first appearance, so the result does not depend on the input ids.
    pub fn from_labels(width: usize, height: usize, raw: &[u32]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty("segmentation of an empty grid".into()));
        }
        if raw.len() != width * height {
            return Err(Error::len_mismatch("label grid", width * height, raw.len()));
        }
        let labels = connected_relabel(width, height, raw);
        Ok(Self::from_dense(width, height, labels))
    }

    fn from_dense(width: usize, height: usize, labels: Vec<u32>) -> Self {
        let n = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut regions: Vec<Option<Region>> = vec![None; n];
        for (idx, &l) in labels.iter().enumerate() {
            let (x, y) = (idx % width, idx / width);
            match &mut regions[l as usize] {
                Some(r) => {
                    r.pixels.push(idx as u32);
                    r.bbox.extend(x, y);
                }
                slot @ None => {
                    *slot = Some(Region {
                        pixels: vec![idx as u32],
                        bbox: BoundingBox::point(x, y),
                    })
                }
            }
        }
        let regions: Vec<Region> = regions
            .into_iter()
            .map(|r| r.expect("dense labels"))
            .collect();
        let adjacency = adjacency_of(width, height, &labels, regions.len());
        Segmentation {
            level: 1,
            width,
            height,
            labels,
            regions,
            adjacency,
            params: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, r: usize) -> &Region {
        &self.regions[r]
    }

    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn neighbors(&self, r: usize) -> &[usize] {
        &self.adjacency[r]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    /// Writes the label grid as a 16-bit grayscale PNG plus a `.json` sidecar.
    pub fn save(&self, png_path: impl AsRef<Path>) -> Result<()> {
        let png_path = png_path.as_ref();
        if self.regions.len() > u16::MAX as usize + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} regions do not fit a 16-bit label image",
                self.regions.len()
            )));
        }
        let data: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        let buf: ImageBuffer<Luma<u16>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, data)
                .expect("label buffer matches dimensions");
        buf.save_with_format(png_path, image::ImageFormat::Png)
            .map_err(|e| Error::malformed(png_path, e.to_string()))?;
        let sidecar = SegmentationSidecar {
            level: self.level,
            n: self.regions.len(),
            params: self.params,
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        let side_path = png_path.with_extension("json");
        std::fs::write(&side_path, json).map_err(|e| Error::io(side_path, e))
    }

    pub fn load(png_path: impl AsRef<Path>) -> Result<Self> {
        let png_path = png_path.as_ref();
        let side_path = png_path.with_extension("json");
        let text = std::fs::read(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: SegmentationSidecar = serde_json::from_slice(&text)
            .map_err(|e| Error::malformed(&side_path, e.to_string()))?;
        let dynamic = image::open(png_path).map_err(|e| Error::Decode {
            path: png_path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let buf = match dynamic {
            image::DynamicImage::ImageLuma16(b) => b,
            other => {
                return Err(Error::UnsupportedFormat {
                    path: png_path.to_path_buf(),
                    reason: format!("label image must be 16-bit gray, got {:?}", other.color()),
                })
            }
        };
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let raw: Vec<u32> = buf.into_raw().into_iter().map(u32::from).collect();
        let mut seg = Segmentation::from_labels(w, h, &raw)?;
        if seg.num_regions() != sidecar.n {
            return Err(Error::malformed(
                png_path,
                format!("sidecar says {} regions, labels give {}", sidecar.n, seg.num_regions()),
            ));
        }
        seg.level = sidecar.level;
        seg.params = sidecar.params;
        Ok(seg)
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentationSidecar {
    level: usize,
    #[serde(rename = "N")]
    n: usize,
    params: Option<SegmentParams>,
}

/// Splits labels into 4-connected components, numbered in raster order.
fn connected_relabel(width: usize, height: usize, raw: &[u32]) -> Vec<u32> {
    const UNSET: u32 = u32::MAX;
    let mut out = vec![UNSET; raw.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..raw.len() {
        if out[start] != UNSET {
            continue;
        }
        let id = raw[start];
        out[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut visit = |q: usize| {
                if out[q] == UNSET && raw[q] == id {
                    out[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        next += 1;
    }
    out
}

fn adjacency_of(width: usize, height: usize, labels: &[u32], n: usize) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut link = |a: u32, b: u32| {
        if a != b {
            adj[a as usize].push(b as usize);
            adj[b as usize].push(a as usize);
        }
    };
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if x + 1 < width {
                link(labels[p], labels[p + 1]);
            }
            if y + 1 < height {
                link(labels[p], labels[p + width]);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Recomputes 4-neighbor adjacency for an existing segmentation.
pub fn region_adjacency(seg: &Segmentation) -> Vec<Vec<usize>> {
    adjacency_of(seg.width, seg.height, &seg.labels, seg.num_regions())
}

fn gaussian_mask(sigma: f64) -> Vec<f64> {
    let len = (sigma * 4.0).ceil() as usize + 1;
    let mut mask: Vec<f64> = (0..len)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum = 2.0 * mask[1..].iter().sum::<f64>() + mask[0];
    for m in &mut mask {
        *m /= sum;
    }
    mask
}

/// Separable Gaussian smoothing of each channel with clamped borders.
fn smooth(img: &RasterImage, sigma: f64) -> Vec<[f64; 3]> {
    let (w, h) = (img.width(), img.height());
    let mask = gaussian_mask(sigma);
    let src: Vec<[f64; 3]> = img
        .pixels()
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let pass = |input: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (i, &m) in mask.iter().enumerate() {
                    let taps: &[isize] = if i == 0 { &[0] } else { &[-1, 1] };
                    for &sign in taps {
                        let off = sign * i as isize;
                        let (sx, sy) = if horizontal {
                            ((x as isize + off).clamp(0, w as isize - 1) as usize, y)
                        } else {
                            (x, (y as isize + off).clamp(0, h as isize - 1) as usize)
                        };
                        let v = input[sy * w + sx];
                        for c in 0..3 {
                            acc[c] += m * v[c];
                        }
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let tmp = pass(&src, true);
    pass(&tmp, false)
}

#[derive(Clone, Copy, Debug)]
struct Edge {
    a: u32,
    b: u32,
    w: f64,
}

/// The sorted 8-connected edge list of the smoothed image; reused across `k`
/// values during level search.
pub struct PixelGraph {
    width: usize,
    height: usize,
    edges: Vec<Edge>,
}

impl PixelGraph {
    pub fn new(img: &RasterImage) -> Self {
        let (w, h) = (img.width(), img.height());
        let sm = smooth(img, SMOOTHING_SIGMA);
        let dist = |p: usize, q: usize| {
            let (u, v) = (sm[p], sm[q]);
            ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2) + (u[2] - v[2]).powi(2)).sqrt()
        };
        let mut edges = Vec::with_capacity(4 * w * h);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let mut push = |q: usize| {
                    edges.push(Edge {
                        a: p as u32,
                        b: q as u32,
                        w: dist(p, q),
                    })
                };
                if x + 1 < w {
                    push(p + 1);
                }
                if y + 1 < h {
                    push(p + w);
                }
                if x + 1 < w && y + 1 < h {
                    push(p + w + 1);
                }
                if x + 1 < w && y > 0 {
                    push(p - w + 1);
                }
            }
        }
        edges.sort_by(|e, f| {
            e.w.total_cmp(&f.w)
                .then(e.a.cmp(&f.a))
                .then(e.b.cmp(&f.b))
        });
        PixelGraph {
            width: w,
            height: h,
            edges,
        }
    }

    /// Runs the merge criterion for one `k`, then the `min_size` pass, then
    /// the 4-connected relabel.
    pub fn segment(&self, k: f64, min_size: usize) -> Segmentation {
        let n = self.width * self.height;
        let mut forest = DisjointSet::new(n);
        let mut threshold = vec![k; n];
        for e in &self.edges {
            let a = forest.find(e.a as usize);
            let b = forest.find(e.b as usize);
            if a != b && e.w <= threshold[a] && e.w <= threshold[b] {
                let root = forest.join(a, b);
                threshold[root] = e.w + k / forest.size(root) as f64;
            }
        }
        for e in &self.edges {
            let a = forest.find(e.a as usize);
            let b = forest.find(e.b as usize);
            if a != b && (forest.size(a) < min_size || forest.size(b) < min_size) {
                forest.join(a, b);
            }
        }
        let raw: Vec<u32> = (0..n).map(|p| forest.find(p) as u32).collect();
        let mut seg = Segmentation::from_labels(self.width, self.height, &raw)
            .expect("grid is non-empty");
        seg.params = Some(SegmentParams { k, min_size });
        seg
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn size(&self, root: usize) -> usize {
        self.size[root]
    }

    fn join(&mut self, a: usize, b: usize) -> usize {
        let (hi, lo) = if self.rank[a] >= self.rank[b] { (a, b) } else { (b, a) };
        self.parent[lo] = hi;
        self.size[hi] += self.size[lo];
        if self.rank[hi] == self.rank[lo] {
            self.rank[hi] += 1;
        }
        hi
    }
}

/// Single-level graph-based segmentation.
pub fn graph_segment(img: &RasterImage, k: f64, min_size: usize) -> Result<Segmentation> {
    if img.is_empty() {
        return Err(Error::Empty("image for segmentation".into()));
    }
    if !(k > 0.0) || min_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "segmentation needs k > 0 and min_size >= 1 (got k={k}, min_size={min_size})"
        )));
    }
    Ok(PixelGraph::new(img).segment(k, min_size))
}

/// Levels ordered from finest to coarsest.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationStack {
    pub levels: Vec<Segmentation>,
}

impl SegmentationStack {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Target region count of level `i` (1-based) on the geometric series from
/// `finest` to `coarsest`.
pub fn level_target(i: usize, levels: usize, finest: usize, coarsest: usize) -> f64 {
    if levels <= 1 {
        return finest as f64;
    }
    let t = (i - 1) as f64 / (levels - 1) as f64;
    finest as f64 * (coarsest as f64 / finest as f64).powf(t)
}

const K_SEARCH_LO: f64 = 1e-3;
const K_SEARCH_HI: f64 = 1e6;
const K_SEARCH_STEPS: usize = 12;
const TARGET_TOLERANCE: f64 = 0.3;

/// Searches `k` for one level so the region count lands within ±30% of
/// `target`, bisecting in log-space for at most 12 steps. Returns the closest
/// segmentation seen when the tolerance is never met.
fn search_level(graph: &PixelGraph, target: f64, min_size: usize) -> Segmentation {
    let (mut lo, mut hi) = (K_SEARCH_LO.ln(), K_SEARCH_HI.ln());
    let mut best: Option<(f64, Segmentation)> = None;
    for _ in 0..K_SEARCH_STEPS {
        let mid = 0.5 * (lo + hi);
        let seg = graph.segment(mid.exp(), min_size);
        let count = seg.num_regions() as f64;
        let miss = (count / target).ln().abs();
        let within = (count - target).abs() <= TARGET_TOLERANCE * target;
        if count > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if best.as_ref().map_or(true, |(m, _)| miss < *m) {
            best = Some((miss, seg));
        }
        if within {
            break;
        }
    }
    best.expect("at least one search step").1
}

/// Builds `levels` segmentations whose region counts follow the geometric
/// series from `finest` to `coarsest`.
pub fn build_stack(
    img: &RasterImage,
    levels: usize,
    finest: usize,
    coarsest: usize,
) -> Result<SegmentationStack> {
    if img.is_empty() {
        return Err(Error::Empty("image for segmentation".into()));
    }
    if levels == 0 || coarsest == 0 || finest < coarsest {
        return Err(Error::InvalidArgument(format!(
            "stack needs levels >= 1 and finest >= coarsest >= 1 (got {levels}, {finest}, {coarsest})"
        )));
    }
    let graph = PixelGraph::new(img);
    let area = img.len();
    let mut segs: Vec<Segmentation> = (1..=levels)
        .into_par_iter()
        .map(|i| {
            let target = level_target(i, levels, finest, coarsest);
            let min_size = 20usize.max((area as f64 / (10.0 * target)).floor() as usize);
            let mut seg = search_level(&graph, target, min_size);
            seg.level = i;
            seg
        })
        .collect();
    // Region counts weakly decrease with level; a coarser level that came out
    // finer than its predecessor is replaced by it.
    for i in 1..segs.len() {
        if segs[i].num_regions() > segs[i - 1].num_regions() {
            let mut prev = segs[i - 1].clone();
            prev.level = i + 1;
            segs[i] = prev;
        }
    }
    Ok(SegmentationStack { levels: segs })
}

//! The 39-dimensional low-level region descriptor: color and texture
//! contrasts of a region against the pseudo-background and the whole image,
//! followed by per-region color variances, perimeter and area.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::imaging::{hsv_of, lab_of, rgb_to_gray, BinaryMask, PlanarImage, RasterImage, SaliencyMap};
use crate::segmentation::Segmentation;

pub const DESCRIPTOR_DIM: usize = 39;
pub const BINS_PER_CHANNEL: usize = 8;
pub const LM_FILTERS: usize = 48;
pub const LM_SUPPORT: usize = 49;
pub const LBP_BINS: usize = 256;
pub const BORDER: usize = 30;
pub const BACKGROUND_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Lab,
    Hsv,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 3] = [ColorSpace::Rgb, ColorSpace::Lab, ColorSpace::Hsv];

    /// Per-channel `(lo, hi)` used for histogram binning.
    pub fn ranges(self) -> [(f64, f64); 3] {
        match self {
            ColorSpace::Rgb => [(0.0, 255.0); 3],
            ColorSpace::Lab => [(0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)],
            ColorSpace::Hsv => [(0.0, 1.0); 3],
        }
    }

    /// Factor applied to channel means before differencing and to values
    /// before taking variances, so the three spaces share a unit range.
    pub fn unit(self) -> f64 {
        match self {
            ColorSpace::Rgb => 1.0 / 255.0,
            ColorSpace::Lab => 1.0 / 100.0,
            ColorSpace::Hsv => 1.0,
        }
    }

    fn convert(self, rgb: [u8; 3]) -> [f64; 3] {
        match self {
            ColorSpace::Rgb => rgb.map(f64::from),
            ColorSpace::Lab => lab_of(rgb),
            ColorSpace::Hsv => hsv_of(rgb),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bins: Vec<f64>,
}

impl Histogram {
    /// L1-normalized counts; all zeros when nothing was counted.
    pub fn from_counts(counts: &[u32]) -> Self {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let bins = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Histogram { bins }
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

fn channel_bin(v: f64, (lo, hi): (f64, f64), bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

fn joint_bin(v: [f64; 3], ranges: &[(f64, f64); 3], bins: usize) -> usize {
    let b: [usize; 3] = std::array::from_fn(|c| channel_bin(v[c], ranges[c], bins));
    (b[0] * bins + b[1]) * bins + b[2]
}

/// Joint 3-D histogram with `bins_per_channel³` cells.
pub fn color_histogram(pixels: &[[f64; 3]], space: ColorSpace, bins_per_channel: usize) -> Histogram {
    let ranges = space.ranges();
    let mut counts = vec![0u32; bins_per_channel.pow(3)];
    for &p in pixels {
        counts[joint_bin(p, &ranges, bins_per_channel)] += 1;
    }
    Histogram::from_counts(&counts)
}

/// `½ Σ (a_i - b_i)² / (a_i + b_i)`, skipping empty bins.
pub fn chi_square(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::len_mismatch("histogram bins", a.len(), b.len()));
    }
    let mut sum = 0.0;
    for (&x, &y) in a.bins.iter().zip(&b.bins) {
        let d = x + y;
        if d > 0.0 {
            sum += (x - y) * (x - y) / d;
        }
    }
    Ok(0.5 * sum)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBackground {
    pub mask: BinaryMask,
    /// Set when no border pixel passed the saliency test and the whole
    /// border frame was used instead.
    pub fallback: bool,
}

fn in_border(x: usize, y: usize, w: usize, h: usize, border: usize) -> bool {
    x < border || y < border || x + border >= w || y + border >= h
}

/// Border pixels whose initial saliency is below `thresh`.
pub fn pseudo_background(init: &SaliencyMap, border: usize, thresh: f64) -> PseudoBackground {
    let (w, h) = (init.width(), init.height());
    let mask = BinaryMask::from_fn(w, h, |x, y| in_border(x, y, w, h, border) && init.get(x, y) < thresh)
        .expect("size from map");
    if mask.count() > 0 {
        return PseudoBackground { mask, fallback: false };
    }
    log::debug!("pseudo-background empty; using the full border frame");
    PseudoBackground {
        mask: BinaryMask::from_fn(w, h, |x, y| in_border(x, y, w, h, border)).expect("size from map"),
        fallback: true,
    }
}

/// The Leung-Malik bank: 18 edge and 18 bar filters (3 scales by 6
/// orientations, elongation 3), then for each of four scales a Gaussian, a
/// Laplacian of Gaussian and a Laplacian of Gaussian at three times the scale.
/// Every filter is zero-mean with unit L1 norm; storage is row-major over
/// `(dy, dx)` offsets in `-24..=24`.
pub struct FilterBank {
    pub support: usize,
    pub filters: Vec<Vec<f64>>,
}

fn gauss1d(sigma: f64, x: f64, order: u8) -> f64 {
    let var = sigma * sigma;
    let g = (-x * x / (2.0 * var)).exp() / (std::f64::consts::PI * 2.0 * var).sqrt();
    match order {
        0 => g,
        1 => -g * x / var,
        _ => g * (x * x - var) / (var * var),
    }
}

fn normalise(mut f: Vec<f64>) -> Vec<f64> {
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter_mut().for_each(|v| *v -= mean);
    let l1: f64 = f.iter().map(|v| v.abs()).sum();
    f.iter_mut().for_each(|v| *v /= l1);
    f
}

fn filter_from(support: usize, g: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let half = (support / 2) as f64;
    let mut f = Vec::with_capacity(support * support);
    for row in 0..support {
        for col in 0..support {
            f.push(g(col as f64 - half, row as f64 - half));
        }
    }
    normalise(f)
}

impl FilterBank {
    pub fn leung_malik(support: usize) -> Self {
        let root2 = std::f64::consts::SQRT_2;
        let mut edges = Vec::new();
        let mut bars = Vec::new();
        for s in 1..=3 {
            let scale = root2.powi(s);
            for o in 0..6 {
                let angle = std::f64::consts::PI * o as f64 / 6.0;
                let (sn, c) = angle.sin_cos();
                let oriented = |order: u8| {
                    filter_from(support, |x, y| {
                        let px = c * x - sn * y;
                        let py = sn * x + c * y;
                        gauss1d(3.0 * scale, px, 0) * gauss1d(scale, py, order)
                    })
                };
                edges.push(oriented(1));
                bars.push(oriented(2));
            }
        }
        let mut filters = edges;
        filters.extend(bars);
        for s in 1..=4 {
            let scale = root2.powi(s);
            filters.push(filter_from(support, |x, y| {
                (-(x * x + y * y) / (2.0 * scale * scale)).exp()
            }));
            for sigma in [scale, 3.0 * scale] {
                filters.push(filter_from(support, |x, y| {
                    let r2 = x * x + y * y;
                    let v = sigma * sigma;
                    (-r2 / (2.0 * v)).exp() * (r2 - 2.0 * v)
                }));
            }
        }
        FilterBank { support, filters }
    }

    pub fn standard() -> &'static FilterBank {
        static BANK: OnceLock<FilterBank> = OnceLock::new();
        BANK.get_or_init(|| FilterBank::leung_malik(LM_SUPPORT))
    }

    pub fn half(&self) -> usize {
        self.support / 2
    }
}

/// Symmetric reflection (`-1 -> 0`, `n -> n - 1`) repeated for any offset.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        period as usize - 1 - m
    } else {
        m
    }
}

fn fft2(buf: &mut [Complex64], w: usize, h: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(buf);
    let mut t = vec![Complex64::default(); w * h];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = buf[y * w + x];
        }
    }
    col.process(&mut t);
    for x in 0..w {
        for y in 0..h {
            buf[y * w + x] = t[x * h + y];
        }
    }
}

type Spectra = Arc<Vec<Vec<Complex64>>>;

/// Spectra of the bank's filters packed two per complex kernel (even index
/// real, odd index imaginary), laid out for correlation on a `w x h` grid.
fn bank_spectra(w: usize, h: usize) -> Spectra {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Spectra>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(s) = cache.lock().unwrap().get(&(w, h)) {
        return s.clone();
    }
    let bank = FilterBank::standard();
    let half = bank.half() as isize;
    let mut planner = FftPlanner::new();
    let spectra: Vec<Vec<Complex64>> = bank
        .filters
        .chunks(2)
        .map(|pair| {
            let mut buf = vec![Complex64::default(); w * h];
            for dy in -half..=half {
                for dx in -half..=half {
                    let k = ((dy + half) as usize) * bank.support + (dx + half) as usize;
                    let at = (-dy).rem_euclid(h as isize) as usize * w + (-dx).rem_euclid(w as isize) as usize;
                    buf[at] = Complex64::new(pair[0][k], pair[1][k]);
                }
            }
            fft2(&mut buf, w, h, &mut planner, false);
            buf
        })
        .collect();
    let spectra = Arc::new(spectra);
    cache.lock().unwrap().insert((w, h), spectra.clone());
    spectra
}

/// Correlation of a gray plane with every filter of the standard bank under
/// symmetric border extension; one plane per filter.
pub fn lm_responses(gray: &PlanarImage) -> Vec<Vec<f64>> {
    let (w, h) = (gray.width(), gray.height());
    let half = FilterBank::standard().half();
    let (nw, nh) = (w + 2 * half, h + 2 * half);
    let plane = gray.plane(0);
    let mut padded = vec![Complex64::default(); nw * nh];
    for py in 0..nh {
        let sy = reflect(py as isize - half as isize, h);
        for px in 0..nw {
            let sx = reflect(px as isize - half as isize, w);
            padded[py * nw + px] = Complex64::new(plane[sy * w + sx], 0.0);
        }
    }
    let mut planner = FftPlanner::new();
    fft2(&mut padded, nw, nh, &mut planner, false);
    let scale = 1.0 / (nw * nh) as f64;
    let mut out = Vec::with_capacity(LM_FILTERS);
    for spectrum in bank_spectra(nw, nh).iter() {
        let mut buf: Vec<Complex64> = padded.iter().zip(spectrum).map(|(a, b)| a * b).collect();
        fft2(&mut buf, nw, nh, &mut planner, true);
        let mut re = Vec::with_capacity(w * h);
        let mut im = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let v = buf[(y + half) * nw + x + half] * scale;
                re.push(v.re);
                im.push(v.im);
            }
        }
        out.push(re);
        out.push(im);
    }
    out
}

/// Tolerance under which two absolute responses count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

/// Per pixel, the index of the filter with the largest absolute response;
/// near-ties go to the lowest index.
pub fn lm_max_index(gray: &PlanarImage) -> Vec<u8> {
    argmax_abs(&lm_responses(gray))
}

pub(crate) fn argmax_abs(responses: &[Vec<f64>]) -> Vec<u8> {
    let n = responses[0].len();
    (0..n)
        .map(|p| {
            let best = responses.iter().map(|r| r[p].abs()).fold(0.0, f64::max);
            responses
                .iter()
                .position(|r| r[p].abs() >= best - TIE_TOLERANCE)
                .unwrap_or(0) as u8
        })
        .collect()
}

fn index_histogram(codes: &[u8], pixels: impl IntoIterator<Item = usize>, bins: usize) -> Histogram {
    let mut counts = vec![0u32; bins];
    for p in pixels {
        counts[codes[p] as usize] += 1;
    }
    Histogram::from_counts(&counts)
}

/// Histogram of the maximum-response filter index over `pixels`.
pub fn lm_max_response_histogram(gray: &PlanarImage, pixels: &[u32]) -> Histogram {
    let codes = lm_max_index(gray);
    index_histogram(&codes, pixels.iter().map(|&p| p as usize), LM_FILTERS)
}

/// Basic 8-neighbor LBP. Neighbors run clockwise from the top-left, which
/// supplies the most significant bit; a bit is set when the neighbor is at
/// least the center. Out-of-image neighbors are clamped to the border.
pub fn lbp_codes(gray: &PlanarImage) -> Vec<u8> {
    const RING: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];
    let (w, h) = (gray.width(), gray.height());
    let plane = gray.plane(0);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let center = plane[y * w + x];
            let mut code = 0u8;
            for (dx, dy) in RING {
                let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                code = (code << 1) | (plane[ny * w + nx] >= center) as u8;
            }
            out.push(code);
        }
    }
    out
}

pub fn lbp_histogram(gray: &PlanarImage, pixels: &[u32]) -> Histogram {
    let codes = lbp_codes(gray);
    index_histogram(&codes, pixels.iter().map(|&p| p as usize), LBP_BINS)
}

/// Per-pixel values shared by every descriptor of one image.
pub struct ImageFeatures {
    width: usize,
    height: usize,
    colors: [Vec<[f64; 3]>; 3],
    lm: Vec<u8>,
    lbp: Vec<u8>,
}

/// Means, variances and histograms over one pixel set.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportStats {
    /// Unit-scaled channel means, indexed `[space][channel]`.
    pub mean: [[f64; 3]; 3],
    /// Unit-scaled population variances, indexed `[space][channel]`.
    pub var: [[f64; 3]; 3],
    pub color: [Histogram; 3],
    pub lm: Histogram,
    pub lbp: Histogram,
}

/// Statistics of the pseudo-background and the whole image.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastReference {
    pub background: SupportStats,
    pub image: SupportStats,
}

impl ImageFeatures {
    pub fn new(img: &RasterImage) -> Self {
        let gray = rgb_to_gray(img);
        let colors = ColorSpace::ALL.map(|s| img.pixels().iter().map(|&p| s.convert(p)).collect());
        ImageFeatures {
            width: img.width(),
            height: img.height(),
            colors,
            lm: lm_max_index(&gray),
            lbp: lbp_codes(&gray),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn stats(&self, pixels: &[u32]) -> Result<SupportStats> {
        if pixels.is_empty() {
            return Err(Error::Empty("descriptor support".into()));
        }
        let n = pixels.len() as f64;
        let mut mean = [[0.0; 3]; 3];
        let mut var = [[0.0; 3]; 3];
        let color = std::array::from_fn(|s| {
            let space = ColorSpace::ALL[s];
            let unit = space.unit();
            let values: Vec<[f64; 3]> = pixels.iter().map(|&p| self.colors[s][p as usize]).collect();
            for c in 0..3 {
                // Shifted by the first value so constant supports are exact.
                let base = values[0][c] * unit;
                let d = values.iter().map(|v| v[c] * unit - base).sum::<f64>() / n;
                let d2 = values.iter().map(|v| (v[c] * unit - base).powi(2)).sum::<f64>() / n;
                mean[s][c] = base + d;
                var[s][c] = (d2 - d * d).max(0.0);
            }
            color_histogram(&values, space, BINS_PER_CHANNEL)
        });
        Ok(SupportStats {
            mean,
            var,
            color,
            lm: index_histogram(&self.lm, pixels.iter().map(|&p| p as usize), LM_FILTERS),
            lbp: index_histogram(&self.lbp, pixels.iter().map(|&p| p as usize), LBP_BINS),
        })
    }

    pub fn reference(&self, bg: &PseudoBackground) -> Result<ContrastReference> {
        if !bg.mask.same_size(self.width, self.height) {
            return Err(Error::size_mismatch(
                "pseudo-background vs image",
                (self.width, self.height),
                (bg.mask.width(), bg.mask.height()),
            ));
        }
        let background: Vec<u32> = mask_pixels(&bg.mask);
        let all: Vec<u32> = (0..(self.width * self.height) as u32).collect();
        Ok(ContrastReference {
            background: self.stats(&background)?,
            image: self.stats(&all)?,
        })
    }
}

fn mask_pixels(mask: &BinaryMask) -> Vec<u32> {
    mask.values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i as u32)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowLevelDescriptor(pub [f64; DESCRIPTOR_DIM]);

impl LowLevelDescriptor {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Column names `c1..c28, s1..s11`.
pub fn descriptor_names() -> Vec<String> {
    (1..=28)
        .map(|i| format!("c{i}"))
        .chain((1..=11).map(|i| format!("s{i}")))
        .collect()
}

/// Region pixels with a 4-neighbor outside the region; the image edge
/// counts as outside.
pub fn perimeter(seg: &Segmentation, r: usize) -> usize {
    let (w, h) = (seg.width(), seg.height());
    let labels = seg.labels();
    let label = r as u32;
    seg.region(r)
        .pixels
        .iter()
        .filter(|&&p| {
            let (x, y) = (p as usize % w, p as usize / w);
            x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || labels[p as usize - 1] != label
                || labels[p as usize + 1] != label
                || labels[p as usize - w] != label
                || labels[p as usize + w] != label
        })
        .count()
}

pub fn descriptor(
    feat: &ImageFeatures,
    reference: &ContrastReference,
    seg: &Segmentation,
    r: usize,
) -> Result<LowLevelDescriptor> {
    if seg.width() != feat.width || seg.height() != feat.height {
        return Err(Error::size_mismatch(
            "segmentation vs image",
            (feat.width, feat.height),
            (seg.width(), seg.height()),
        ));
    }
    if r >= seg.num_regions() {
        return Err(Error::InvalidArgument(format!("region {r} out of range")));
    }
    let region = seg.region(r);
    let rs = feat.stats(&region.pixels)?;
    let (b, i) = (&reference.background, &reference.image);
    let mut v = [0.0; DESCRIPTOR_DIM];
    for s in 0..3 {
        let base = 8 * s;
        for c in 0..3 {
            v[base + c] = (rs.mean[s][c] - b.mean[s][c]).abs();
            v[base + 3 + c] = (rs.mean[s][c] - i.mean[s][c]).abs();
        }
        v[base + 6] = chi_square(&rs.color[s], &b.color[s])?;
        v[base + 7] = chi_square(&rs.color[s], &i.color[s])?;
        for c in 0..3 {
            v[28 + 3 * s + c] = rs.var[s][c];
        }
    }
    v[24] = chi_square(&rs.lm, &b.lm)?;
    v[25] = chi_square(&rs.lm, &i.lm)?;
    v[26] = chi_square(&rs.lbp, &b.lbp)?;
    v[27] = chi_square(&rs.lbp, &i.lbp)?;
    let (w, h) = (feat.width as f64, feat.height as f64);
    v[37] = perimeter(seg, r) as f64 / (2.0 * (w + h));
    v[38] = region.area() as f64 / (w * h);
    Ok(LowLevelDescriptor(v))
}

pub fn level_descriptors(
    feat: &ImageFeatures,
    reference: &ContrastReference,
    seg: &Segmentation,
) -> Result<Vec<LowLevelDescriptor>> {
    (0..seg.num_regions()).map(|r| descriptor(feat, reference, seg, r)).collect()
}

/// A descriptor row keyed by image, level and region.
pub struct DescriptorRow<'a> {
    pub image_id: &'a str,
    pub level: u8,
    pub region: u16,
    pub descriptor: &'a LowLevelDescriptor,
}

pub fn write_descriptor_csv<'a>(path: impl AsRef<Path>, rows: impl IntoIterator<Item = DescriptorRow<'a>>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "image_id,level,region,{}", descriptor_names().join(",")).map_err(io)?;
    for row in rows {
        let values: Vec<String> = row.descriptor.0.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "{},{},{},{}", row.image_id, row.level, row.region, values.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

//! Nested region windows and the small convolutional feature backbone that
//! turns each window into a feature vector.
//!
//! For a region `r` three windows are cut from the image:
//!
//! * **A**: the bounding box of `r`, with pixels outside `r` filled by the
//!   backbone mean color, so they vanish after mean subtraction;
//! * **B**: the bounding box of `r` together with its adjacent regions,
//!   left intact;
//! * **C**: the whole image with the pixels of `r` filled by the mean color.
//!
//! Each window is warped to `input_side x input_side`, pushed through the
//! backbone, and the three outputs are concatenated as `[A | B | C]`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Reader};
use crate::error::{Error, Result};
use crate::imaging::{warp_to_square, RasterImage};
use crate::segmentation::{BoundingBox, Segmentation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Fully connected; flattens a spatial input implicitly.
    Fc { out_dim: usize, bias: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub layers: Vec<LayerSpec>,
    pub input_side: usize,
    pub feature_dim: usize,
    pub mean_rgb: [f64; 3],
    pub seed: u64,
}

impl BackboneSpec {
    /// `conv(8,5,1,2)-relu-maxpool(2,2)-conv(16,5,1,2)-relu-maxpool(2,2)-flatten-fc(64)`.
    pub fn desk(input_side: usize, mean_rgb: [f64; 3], seed: u64) -> Self {
        BackboneSpec {
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 5,
                    stride: 1,
                    pad: 2,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                    pad: 2,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    out_dim: 64,
                    bias: true,
                },
            ],
            input_side,
            feature_dim: 64,
            mean_rgb,
            seed,
        }
    }

    /// Mean color rounded to 8 bits, used to fill masked pixels.
    pub fn mean_fill(&self) -> [u8; 3] {
        self.mean_rgb
            .map(|m| (m + 0.5).floor().clamp(0.0, 255.0) as u8)
    }

    /// Per-layer shapes and parameter counts; errors when the chain does not
    /// fit together or the final length differs from `feature_dim`.
    fn plan(&self) -> Result<Vec<LayerPlan>> {
        if self.input_side == 0 {
            return Err(Error::InvalidArgument("backbone input_side must be >= 1".into()));
        }
        let mut shape = Shape::Spatial {
            c: 3,
            h: self.input_side,
            w: self.input_side,
        };
        let mut plans = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |why: String| Error::InvalidArgument(format!("backbone layer {i}: {why}"));
            let (out, n_weights, n_bias) = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    bias,
                } => {
                    let Shape::Spatial { c, h, w } = shape else {
                        return Err(bad("conv after flatten".into()));
                    };
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(bad("conv needs positive kernel, stride and channels".into()));
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(bad(format!("kernel {kernel} larger than padded {h}x{w}")));
                    }
                    let ho = (h + 2 * pad - kernel) / stride + 1;
                    let wo = (w + 2 * pad - kernel) / stride + 1;
                    (
                        Shape::Spatial {
                            c: out_channels,
                            h: ho,
                            w: wo,
                        },
                        out_channels * c * kernel * kernel,
                        if bias { out_channels } else { 0 },
                    )
                }
                LayerSpec::Relu => (shape, 0, 0),
                LayerSpec::MaxPool { kernel, stride } => {
                    let Shape::Spatial { c, h, w } = shape else {
                        return Err(bad("maxpool after flatten".into()));
                    };
                    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                        return Err(bad(format!("pool {kernel}/{stride} on {h}x{w}")));
                    }
                    (
                        Shape::Spatial {
                            c,
                            h: (h - kernel) / stride + 1,
                            w: (w - kernel) / stride + 1,
                        },
                        0,
                        0,
                    )
                }
                LayerSpec::Flatten => (Shape::Flat(shape.len()), 0, 0),
                LayerSpec::Fc { out_dim, bias } => {
                    if out_dim == 0 {
                        return Err(bad("fc with zero outputs".into()));
                    }
                    (
                        Shape::Flat(out_dim),
                        out_dim * shape.len(),
                        if bias { out_dim } else { 0 },
                    )
                }
            };
            plans.push(LayerPlan {
                input: shape,
                n_weights,
                n_bias,
            });
            shape = out;
        }
        if shape.len() != self.feature_dim {
            return Err(Error::len_mismatch(
                "backbone output length",
                self.feature_dim,
                shape.len(),
            ));
        }
        Ok(plans)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    fn len(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerPlan {
    input: Shape,
    n_weights: usize,
    n_bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// A backbone spec with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    plans: Vec<LayerPlan>,
    params: Vec<LayerParams>,
}

impl PartialEq for LayerPlan {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input
    }
}

const BACKBONE_MAGIC: &[u8; 4] = b"SBKB";

impl Backbone {
    /// Weights drawn uniformly from `[-a, a]`, `a = sqrt(6 / fan_in)`, from a
    /// ChaCha stream seeded with `spec.seed`; biases start at zero.
    pub fn seeded(spec: BackboneSpec) -> Result<Self> {
        let plans = spec.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let params = spec
            .layers
            .iter()
            .zip(&plans)
            .map(|(layer, plan)| {
                let fan_in = match *layer {
                    LayerSpec::Conv { kernel, .. } => match plan.input {
                        Shape::Spatial { c, .. } => c * kernel * kernel,
                        Shape::Flat(_) => unreachable!("validated by plan"),
                    },
                    LayerSpec::Fc { .. } => plan.input.len(),
                    _ => 1,
                };
                let a = (6.0 / fan_in as f64).sqrt();
                LayerParams {
                    weights: (0..plan.n_weights).map(|_| rng.gen_range(-a..=a)).collect(),
                    bias: vec![0.0; plan.n_bias],
                }
            })
            .collect();
        Ok(Backbone {
            spec,
            plans,
            params,
        })
    }

    /// Builds a backbone from explicit parameters laid out in layer order
    /// (weights then bias, per layer).
    pub fn from_flat(spec: BackboneSpec, flat: &[f64]) -> Result<Self> {
        let plans = spec.plan()?;
        let expected: usize = plans.iter().map(|p| p.n_weights + p.n_bias).sum();
        if flat.len() != expected {
            return Err(Error::len_mismatch("backbone weights", expected, flat.len()));
        }
        let mut offset = 0;
        let params = plans
            .iter()
            .map(|p| {
                let weights = flat[offset..offset + p.n_weights].to_vec();
                offset += p.n_weights;
                let bias = flat[offset..offset + p.n_bias].to_vec();
                offset += p.n_bias;
                LayerParams { weights, bias }
            })
            .collect();
        Ok(Backbone {
            spec,
            plans,
            params,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.weights.iter().chain(&p.bias).copied())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        container::push_f64s(&mut payload, &self.flat_params());
        container::encode(BACKBONE_MAGIC, &self.spec, &payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = container::read_file(path)?;
        let (spec, payload): (BackboneSpec, _) = container::decode(path, BACKBONE_MAGIC, &bytes)?;
        if payload.len() % 8 != 0 {
            return Err(Error::malformed(path, "weight blob is not a whole number of f64"));
        }
        let mut reader = Reader::new(path, payload);
        let flat = reader.f64s(payload.len() / 8)?;
        reader.finish()?;
        Backbone::from_flat(spec, &flat)
    }

    /// Mean-subtracted, `/255`-scaled forward pass.
    pub fn forward(&self, img: &RasterImage) -> Result<Vec<f64>> {
        let side = self.spec.input_side;
        if img.width() != side || img.height() != side {
            return Err(Error::size_mismatch(
                "backbone input",
                (side, side),
                (img.width(), img.height()),
            ));
        }
        let n = side * side;
        let mut x = vec![0.0; 3 * n];
        for (i, p) in img.pixels().iter().enumerate() {
            for c in 0..3 {
                x[c * n + i] = (p[c] as f64 - self.spec.mean_rgb[c]) / 255.0;
            }
        }
        for ((layer, plan), params) in self.spec.layers.iter().zip(&self.plans).zip(&self.params) {
            x = match (*layer, plan.input) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        ..
                    },
                    Shape::Spatial { c, h, w },
                ) => conv2d(&x, (c, h, w), out_channels, kernel, stride, pad, params),
                (LayerSpec::Relu, _) => {
                    for v in &mut x {
                        *v = v.max(0.0);
                    }
                    x
                }
                (LayerSpec::MaxPool { kernel, stride }, Shape::Spatial { c, h, w }) => {
                    max_pool(&x, (c, h, w), kernel, stride)
                }
                (LayerSpec::Flatten, _) => x,
                (LayerSpec::Fc { out_dim, .. }, input) => dense(&x, input.len(), out_dim, params),
                _ => unreachable!("layer chain validated by plan"),
            };
        }
        Ok(x)
    }
}

fn conv2d(
    input: &[f64],
    (c_in, h, w): (usize, usize, usize),
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    params: &LayerParams,
) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for oc in 0..c_out {
        let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        if let Some(&b) = params.bias.get(oc) {
            plane.fill(b);
        }
        for ic in 0..c_in {
            let src = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wt = params.weights[((oc * c_in + ic) * k + ky) * k + kx];
                    // Output columns whose tap lands inside the input row.
                    let ox_lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
                    let ox_hi = if w + pad > kx {
                        ((w + pad - kx - 1) / stride + 1).min(wo)
                    } else {
                        0
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let row = &src[(iy - pad) * w..(iy - pad + 1) * w];
                        let dst = &mut plane[oy * wo + ox_lo..oy * wo + ox_hi];
                        let ix0 = ox_lo * stride + kx - pad;
                        if stride == 1 {
                            let span = dst.len();
                            for (d, s) in dst.iter_mut().zip(&row[ix0..ix0 + span]) {
                                *d += wt * s;
                            }
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wt * row[ix0 + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_pool(input: &[f64], (c, h, w): (usize, usize, usize), k: usize, stride: usize) -> Vec<f64> {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(plane[(oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn dense(input: &[f64], n_in: usize, n_out: usize, params: &LayerParams) -> Vec<f64> {
    (0..n_out)
        .map(|o| {
            let row = &params.weights[o * n_in..(o + 1) * n_in];
            let acc: f64 = row.iter().zip(input).map(|(a, b)| a * b).sum();
            acc + params.bias.get(o).copied().unwrap_or(0.0)
        })
        .collect()
}

/// Pre-warp rectangles of the three windows, in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowBoxes {
    pub a: BoundingBox,
    pub b: BoundingBox,
    pub c: BoundingBox,
}

pub fn window_boxes(seg: &Segmentation, r: usize) -> WindowBoxes {
    let a = seg.region(r).bbox;
    let full = BoundingBox {
        x0: 0,
        y0: 0,
        x1: seg.width() - 1,
        y1: seg.height() - 1,
    };
    let nbrs = seg.neighbors(r);
    let b = if nbrs.is_empty() {
        full
    } else {
        nbrs.iter().fold(a, |acc, &n| acc.union(&seg.region(n).bbox))
    };
    WindowBoxes { a, b, c: full }
}

/// Window A before warping: the region's bounding box with every
/// non-region pixel set to `fill`.
pub fn masked_crop(img: &RasterImage, seg: &Segmentation, r: usize, fill: [u8; 3]) -> RasterImage {
    let bb = seg.region(r).bbox;
    RasterImage::from_fn(bb.width(), bb.height(), |x, y| {
        let (ix, iy) = (bb.x0 + x, bb.y0 + y);
        if seg.label(ix, iy) == r {
            img.get(ix, iy)
        } else {
            fill
        }
    })
    .expect("bounding box is non-empty")
}

/// Window C before warping: the whole image with region `r` set to `fill`.
pub fn masked_image(img: &RasterImage, seg: &Segmentation, r: usize, fill: [u8; 3]) -> RasterImage {
    let mut out = img.clone();
    for &p in &seg.region(r).pixels {
        out.pixels_mut()[p as usize] = fill;
    }
    out
}

fn check_region(img: &RasterImage, seg: &Segmentation, r: usize) -> Result<()> {
    if img.width() != seg.width() || img.height() != seg.height() {
        return Err(Error::size_mismatch(
            "segmentation vs image",
            (img.width(), img.height()),
            (seg.width(), seg.height()),
        ));
    }
    if r >= seg.num_regions() {
        return Err(Error::InvalidArgument(format!(
            "region {r} out of range ({} regions)",
            seg.num_regions()
        )));
    }
    Ok(())
}

pub fn window_a(
    img: &RasterImage,
    seg: &Segmentation,
    r: usize,
    fill: [u8; 3],
    side: usize,
) -> Result<RasterImage> {
    check_region(img, seg, r)?;
    warp_to_square(&masked_crop(img, seg, r, fill), side)
}

pub fn window_b(img: &RasterImage, seg: &Segmentation, r: usize, side: usize) -> Result<RasterImage> {
    check_region(img, seg, r)?;
    let b = window_boxes(seg, r).b;
    warp_to_square(&img.crop(b.x0, b.y0, b.x1, b.y1)?, side)
}

pub fn window_c(
    img: &RasterImage,
    seg: &Segmentation,
    r: usize,
    fill: [u8; 3],
    side: usize,
) -> Result<RasterImage> {
    check_region(img, seg, r)?;
    warp_to_square(&masked_image(img, seg, r, fill), side)
}

/// `[A | B | C]` feature concatenation for one region, length `3 * D`.
#[derive(Clone, Debug, PartialEq)]
pub struct S3cnnVector(pub Vec<f64>);

impl S3cnnVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Anything that maps a window image to a fixed-length feature vector.
pub trait WindowEncoder: Sync {
    fn input_side(&self) -> usize;
    fn mean_fill(&self) -> [u8; 3];
    fn encode(&self, window: &RasterImage) -> Result<Vec<f64>>;
}

impl WindowEncoder for Backbone {
    fn input_side(&self) -> usize {
        self.spec.input_side
    }

    fn mean_fill(&self) -> [u8; 3] {
        self.spec.mean_fill()
    }

    fn encode(&self, window: &RasterImage) -> Result<Vec<f64>> {
        self.forward(window)
    }
}

pub fn s3cnn_extract<E: WindowEncoder + ?Sized>(
    img: &RasterImage,
    seg: &Segmentation,
    r: usize,
    encoder: &E,
) -> Result<S3cnnVector> {
    let side = encoder.input_side();
    let fill = encoder.mean_fill();
    let mut out = encoder.encode(&window_a(img, seg, r, fill, side)?)?;
    out.extend(encoder.encode(&window_b(img, seg, r, side)?)?);
    out.extend(encoder.encode(&window_c(img, seg, r, fill, side)?)?);
    Ok(S3cnnVector(out))
}

/// Per-channel mean color over a set of images.
pub fn corpus_mean_rgb<'a>(images: impl IntoIterator<Item = &'a RasterImage>) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        for p in img.pixels() {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
        count += img.len();
    }
    if count == 0 {
        return [0.0; 3];
    }
    sum.map(|s| s / count as f64)
}

/// Lookup key for externally computed region features.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionKey {
    pub image_id: String,
    pub level: u8,
    pub region: u16,
}

impl RegionKey {
    pub fn new(image_id: impl Into<String>, level: u8, region: u16) -> Self {
        RegionKey {
            image_id: image_id.into(),
            level,
            region,
        }
    }
}

/// Precomputed feature vectors keyed by `(image id, level, region)`.
///
/// File layout: `b"SFPV"`, `u32` dim, `u64` record count, then per record a
/// `u16` id length, the UTF-8 id, `u8` level, `u16` region and `dim` f64
/// values, all little-endian. Records are written in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    records: BTreeMap<RegionKey, Vec<f64>>,
}

const STORE_MAGIC: &[u8; 4] = b"SFPV";

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert(&mut self, key: RegionKey, values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::len_mismatch("feature record", self.dim, values.len()));
        }
        if key.image_id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("image id longer than 65535 bytes".into()));
        }
        self.records.insert(key, values);
        Ok(())
    }

    pub fn get(&self, key: &RegionKey) -> Result<&[f64]> {
        self.records
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingFeature {
                image_id: key.image_id.clone(),
                level: key.level,
                region: key.region,
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (key, values) in &self.records {
            out.extend_from_slice(&(key.image_id.len() as u16).to_le_bytes());
            out.extend_from_slice(key.image_id.as_bytes());
            out.push(key.level);
            out.extend_from_slice(&key.region.to_le_bytes());
            container::push_f64s(&mut out, values);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = container::read_file(path)?;
        if bytes.len() < 16 || &bytes[..4] != STORE_MAGIC {
            return Err(Error::malformed(path, "not a feature-provider file"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let mut reader = Reader::new(path, &bytes[16..]);
        let mut store = FeatureStore::new(dim);
        for _ in 0..count {
            let id_len = reader.u16()? as usize;
            let id = std::str::from_utf8(reader.bytes(id_len)?)
                .map_err(|_| Error::malformed(path, "image id is not UTF-8"))?
                .to_owned();
            let level = reader.u8()?;
            let region = reader.u16()?;
            let values = reader.f64s(dim)?;
            store.records.insert(RegionKey::new(id, level, region), values);
        }
        reader.finish()?;
        Ok(store)
    }
}

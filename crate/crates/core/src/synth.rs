//! Seeded synthetic saliency dataset: one or two flat-colored shapes on a
//! noise-textured background.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{save_image, save_mask, BinaryMask, RasterImage};

pub const SIZE: usize = 96;
pub const MIN_SIDE: usize = 15;
pub const MAX_SIDE: usize = 45;
pub const MIN_FRACTION: f64 = 0.02;
pub const MAX_FRACTION: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub size: usize,
    /// Shapes get a color close to the background instead of a distinct one.
    pub low_contrast: bool,
    /// Half-width of the per-pixel uniform luminance noise on the background,
    /// added equally to all three channels.
    pub background_noise: f64,
    /// Same for the shapes.
    pub shape_noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: SIZE,
            low_contrast: false,
            background_noise: 24.0,
            shape_noise: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub image: RasterImage,
    pub gt: BinaryMask,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, size: usize) -> Shape {
    let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
    let h = rng.gen_range(MIN_SIDE..=MAX_SIDE);
    let x0 = rng.gen_range(0..=size - w);
    let y0 = rng.gen_range(0..=size - h);
    if rng.gen_bool(0.5) {
        Shape::Rect { x0, y0, w, h }
    } else {
        Shape::Ellipse {
            cx: x0 as f64 + w as f64 / 2.0,
            cy: y0 as f64 + h as f64 / 2.0,
            rx: w as f64 / 2.0,
            ry: h as f64 / 2.0,
        }
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

fn shape_color(rng: &mut ChaCha8Rng, bg: [f64; 3], low_contrast: bool) -> [f64; 3] {
    if low_contrast {
        return bg.map(|v| (v + rng.gen_range(-10.0..=10.0)).clamp(0.0, 255.0));
    }
    loop {
        let c = [0; 3].map(|_| rng.gen_range(0.0..=255.0));
        if dist2(c, bg) >= 150.0 * 150.0 {
            return c;
        }
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generates image `index` of the dataset seeded by `seed`. Each index draws
/// from its own random stream, so samples do not depend on each other.
pub fn synth_sample(seed: u64, index: u64, params: &SynthParams) -> Result<SynthSample> {
    let size = params.size;
    if size < MAX_SIDE {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need size >= {MAX_SIDE} (got {size})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let bg = [0; 3].map(|_| rng.gen_range(50.0..=205.0));
    // A soft diagonal shading keeps the background from being flat.
    let tilt = [0; 3].map(|_| rng.gen_range(-25.0..=25.0));
    let (shapes, colors, gt) = loop {
        let count = if rng.gen_bool(0.3) { 2 } else { 1 };
        let shapes: Vec<Shape> = (0..count).map(|_| random_shape(&mut rng, size)).collect();
        let colors: Vec<[f64; 3]> = (0..count)
            .map(|_| shape_color(&mut rng, bg, params.low_contrast))
            .collect();
        let gt = BinaryMask::from_fn(size, size, |x, y| shapes.iter().any(|s| s.contains(x, y)))?;
        let fraction = gt.count() as f64 / (size * size) as f64;
        if (MIN_FRACTION..=MAX_FRACTION).contains(&fraction) {
            break (shapes, colors, gt);
        }
    };

    let span = (2 * size) as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let top = shapes.iter().rposition(|s| s.contains(x, y));
            let px = match top {
                Some(k) => {
                    let n = rng.gen_range(-params.shape_noise..=params.shape_noise);
                    colors[k].map(|v| to_u8(v + n))
                }
                None => {
                    let t = (x + y) as f64 / span - 0.5;
                    let n = rng.gen_range(-params.background_noise..=params.background_noise);
                    [0, 1, 2].map(|c| to_u8(bg[c] + tilt[c] * t + n))
                }
            };
            pixels.push(px);
        }
    }
    let image = RasterImage::new(size, size, pixels)?;
    let fraction = gt.count() as f64 / (size * size) as f64;
    assert!(
        gt.count() > 0 && (MIN_FRACTION..=MAX_FRACTION).contains(&fraction),
        "salient fraction {fraction} out of range"
    );
    Ok(SynthSample {
        id: format!("{index:04}"),
        image,
        gt,
    })
}

pub fn synth_dataset(n: usize, seed: u64, params: &SynthParams) -> Result<Vec<SynthSample>> {
    (0..n as u64).map(|i| synth_sample(seed, i, params)).collect()
}

/// Writes `images/<id>.png` and `gt/<id>.png` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[SynthSample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "gt"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in samples {
        save_image(&s.image, dir.join("images").join(format!("{}.png", s.id)))?;
        save_mask(&s.gt, dir.join("gt").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

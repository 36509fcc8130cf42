//! Image containers, color-space conversions, resampling and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Empty(format!("image of size {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::len_mismatch("raster pixels", width * height, pixels.len()));
        }
        Ok(RasterImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![color; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[u8; 3]] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [u8; 3]) {
        self.pixels[y * self.width + x] = value;
    }

    /// Copy of the inclusive rectangle `[x0, x1] x [y0, y1]`.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<RasterImage> {
        if x1 < x0 || y1 < y0 || x1 >= self.width || y1 >= self.height {
            return Err(Error::InvalidArgument(format!(
                "crop ({x0},{y0})-({x1},{y1}) outside {}x{}",
                self.width, self.height
            )));
        }
        RasterImage::from_fn(x1 - x0 + 1, y1 - y0 + 1, |x, y| self.get(x0 + x, y0 + y))
    }
}

/// A stack of real-valued planes sharing one size.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarImage {
    width: usize,
    height: usize,
    planes: Vec<Vec<f64>>,
}

impl PlanarImage {
    pub fn new(width: usize, height: usize, planes: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(bad) = planes.iter().find(|p| p.len() != width * height) {
            return Err(Error::len_mismatch("planar image plane", width * height, bad.len()));
        }
        Ok(PlanarImage {
            width,
            height,
            planes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.planes[c]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.planes[c]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.planes[c][y * self.width + x]
    }

    /// All channel values at a flat pixel index.
    pub fn sample3(&self, idx: usize) -> [f64; 3] {
        [self.planes[0][idx], self.planes[1][idx], self.planes[2][idx]]
    }
}

/// Per-pixel saliency in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::len_mismatch("saliency map", width * height, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("saliency value {v} outside [0,1]")));
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
        })
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, values)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// 8-bit quantization `round(v * 255)` with halves rounded up.
    pub fn quantized(&self) -> Vec<u8> {
        self.values.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_mask(mask: &BinaryMask) -> SaliencyMap {
        SaliencyMap {
            width: mask.width,
            height: mask.height,
            values: mask
                .values
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::len_mismatch("binary mask", width * height, values.len()));
        }
        Ok(BinaryMask {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn same_size(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

// D65 reference white, XYZ scaled so that Y_n = 1.
const WHITE_D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

#[inline]
fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIE L*a*b* of one sRGB sample.
pub fn lab_of(rgb: [u8; 3]) -> [f64; 3] {
    let r = srgb_to_linear(rgb[0]);
    let g = srgb_to_linear(rgb[1]);
    let b = srgb_to_linear(rgb[2]);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / WHITE_D65[0]);
    let fy = lab_f(y / WHITE_D65[1]);
    let fz = lab_f(z / WHITE_D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Hexcone HSV of one sample, all channels in `[0, 1]`. Gray has hue 0.
pub fn hsv_of(rgb: [u8; 3]) -> [f64; 3] {
    let r = rgb[0] as f64 / 255.0;
    let g = rgb[1] as f64 / 255.0;
    let b = rgb[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let v = max;
    let s = if max > 0.0 { chroma / max } else { 0.0 };
    let h = if chroma == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / chroma).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / chroma + 2.0) / 6.0
    } else {
        ((r - g) / chroma + 4.0) / 6.0
    };
    [h, s, v]
}

/// BT.601 luma in `[0, 255]`.
#[inline]
pub fn luma_of(rgb: [u8; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

fn map_planes(img: &RasterImage, f: impl Fn([u8; 3]) -> [f64; 3]) -> PlanarImage {
    let n = img.len();
    let mut planes = vec![Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for &p in img.pixels() {
        let v = f(p);
        for c in 0..3 {
            planes[c].push(v[c]);
        }
    }
    PlanarImage {
        width: img.width(),
        height: img.height(),
        planes,
    }
}

/// CIE L*a*b* under D65 with sRGB gamma decoding.
pub fn rgb_to_lab(img: &RasterImage) -> PlanarImage {
    map_planes(img, lab_of)
}

pub fn rgb_to_hsv(img: &RasterImage) -> PlanarImage {
    map_planes(img, hsv_of)
}

/// Single-plane luma image with values in `[0, 255]`.
pub fn rgb_to_gray(img: &RasterImage) -> PlanarImage {
    PlanarImage {
        width: img.width(),
        height: img.height(),
        planes: vec![img.pixels().iter().map(|&p| luma_of(p)).collect()],
    }
}

/// Bilinear resampling to an arbitrary size using pixel-center alignment.
pub fn resize_bilinear(img: &RasterImage, width: usize, height: usize) -> Result<RasterImage> {
    if img.is_empty() {
        return Err(Error::Empty("source image for resampling".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "resample target {width}x{height}"
        )));
    }
    if width == img.width() && height == img.height() {
        return Ok(img.clone());
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, sx, img.width())).collect();
    RasterImage::from_fn(width, height, |x, y| {
        let (y0, y1, fy) = axis(y, sy, img.height());
        let (x0, x1, fx) = cols[x];
        let p00 = img.get(x0, y0);
        let p10 = img.get(x1, y0);
        let p01 = img.get(x0, y1);
        let p11 = img.get(x1, y1);
        let mut out = [0u8; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
            let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            out[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
        out
    })
}

/// Anisotropic bilinear warp to a `side x side` square.
pub fn warp_to_square(img: &RasterImage, side: usize) -> Result<RasterImage> {
    if side == 0 {
        return Err(Error::InvalidArgument("warp side must be >= 1".into()));
    }
    resize_bilinear(img, side, side)
}

fn open_dynamic(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png) => {}
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("expected PNG, found {other:?}"),
            })
        }
    }
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads an 8-bit RGB or grayscale PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    let dynamic = open_dynamic(path)?;
    let rgb = match dynamic {
        image::DynamicImage::ImageRgb8(buf) => buf,
        image::DynamicImage::ImageLuma8(buf) => image::DynamicImage::ImageLuma8(buf).to_rgb8(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("color type {:?} (need 8-bit RGB or gray)", other.color()),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.pixels().map(|p| p.0).collect();
    RasterImage::new(w, h, pixels)
}

pub fn save_image(img: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img.pixels().iter().flat_map(|p| p.iter().copied()).collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_write_error(path, e))
}

fn image_write_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

fn load_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let dynamic = open_dynamic(path)?;
    let gray = match dynamic {
        image::DynamicImage::ImageLuma8(buf) => buf,
        image::DynamicImage::ImageRgb8(buf) => image::DynamicImage::ImageRgb8(buf).to_luma8(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("color type {:?} (need 8-bit gray)", other.color()),
            })
        }
    };
    Ok((gray.width() as usize, gray.height() as usize, gray.into_raw()))
}

fn save_gray8(width: usize, height: usize, data: Vec<u8>, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(width as u32, height as u32, data)
        .expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_write_error(path, e))
}

/// Stores a saliency map as 8-bit grayscale (`round(v * 255)`).
pub fn save_map(map: &SaliencyMap, path: impl AsRef<Path>) -> Result<()> {
    save_gray8(map.width(), map.height(), map.quantized(), path.as_ref())
}

pub fn load_map(path: impl AsRef<Path>) -> Result<SaliencyMap> {
    let (w, h, data) = load_gray8(path.as_ref())?;
    SaliencyMap::new(w, h, data.into_iter().map(|b| b as f64 / 255.0).collect())
}

/// Masks are stored as 0/255 grayscale; any byte >= 128 reads back as set.
pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let data = mask.values().iter().map(|&b| if b { 255 } else { 0 }).collect();
    save_gray8(mask.width(), mask.height(), data, path.as_ref())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let (w, h, data) = load_gray8(path.as_ref())?;
    BinaryMask::new(w, h, data.into_iter().map(|b| b >= 128).collect())
}

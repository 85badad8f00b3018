//! Slide loading, tiling, entropy filtering and patch preparation.
//!
//! A slide is a plain 8-bit RGB raster. Tiling walks a fixed grid,
//! optionally restricted to an annotation mask (tumor-region mode) or
//! covering the whole slide (whole-slide mode), and every patch carries
//! the Shannon entropy of its grayscale histogram so uninformative
//! (blank-glass) tiles can be filtered out.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ITU-R 601 luma weights.
const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Row-major 8-bit RGB image, 3 samples per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation("image dimensions must be >= 1".into()));
        }
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Validation("image dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::Dimension {
                what: "rgb data".into(),
                expected,
                got: data.len(),
            });
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the sub-rectangle with top-left (x, y).
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> RgbImage {
        debug_assert!(x + w <= self.width && y + h <= self.height);
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbImage {
            width: w,
            height: h,
            data,
        }
    }
}

/// Binary per-pixel annotation; true marks a tumor-region pixel.
#[derive(Debug, Clone)]
pub struct AnnotationMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl AnnotationMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension {
                what: "mask data".into(),
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(AnnotationMask {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Fraction of pixels inside the rectangle that are marked.
    pub fn coverage(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let mut marked = 0usize;
        for yy in y..y + h {
            for xx in x..x + w {
                if self.get(xx, yy) {
                    marked += 1;
                }
            }
        }
        marked as f64 / (w * h) as f64
    }
}

/// One tile cut from a slide, with its provenance and entropy.
#[derive(Debug, Clone)]
pub struct Patch {
    pub slide_id: String,
    pub x: usize,
    pub y: usize,
    pub pixels: RgbImage,
    pub entropy_bits: f64,
}

/// Decode a slide raster. PNG (8-bit RGB or RGBA, alpha dropped) and
/// 8-bit RGB TIFF are accepted; everything else is an error.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") | Some("tif") | Some("tiff") => {}
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("extension {:?} (expected png or tiff)", other.unwrap_or("")),
            })
        }
    }
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let (w, h, data) = match decoded {
        image::DynamicImage::ImageRgb8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            (w, h, buf.into_raw())
        }
        image::DynamicImage::ImageRgba8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let mut rgb = Vec::with_capacity(w * h * 3);
            for px in buf.pixels() {
                rgb.extend_from_slice(&px.0[..3]);
            }
            (w, h, rgb)
        }
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("color type {:?} (expected 8-bit RGB or RGBA)", other.color()),
            })
        }
    };
    RgbImage::new(w, h, data)
}

/// Decode an annotation mask: any 8-bit PNG; a pixel is "tumor" when its
/// luma is >= 128.
pub fn load_mask(path: &Path) -> Result<AnnotationMask> {
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let rgb = decoded.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb
        .pixels()
        .map(|p| luma_f64(p.0[0], p.0[1], p.0[2]).round() >= 128.0)
        .collect();
    AnnotationMask::new(w, h, data)
}

#[inline]
fn luma_f64(r: u8, g: u8, b: u8) -> f64 {
    LUMA_R * f64::from(r) + LUMA_G * f64::from(g) + LUMA_B * f64::from(b)
}

/// ITU-R 601 grayscale, one 8-bit luma value per pixel.
pub fn to_grayscale(img: &RgbImage) -> Vec<u8> {
    img.data
        .chunks_exact(3)
        .map(|px| luma_f64(px[0], px[1], px[2]).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Shannon entropy (bits) of the 256-bin grayscale histogram.
/// 0 for a constant image, 8 for a uniform histogram.
pub fn shannon_entropy(img: &RgbImage) -> f64 {
    let gray = to_grayscale(img);
    let mut hist = [0u64; 256];
    for v in gray {
        hist[v as usize] += 1;
    }
    let total = (img.width * img.height) as f64;
    let mut h = 0.0;
    for count in hist {
        if count > 0 {
            let p = count as f64 / total;
            h -= p * p.log2();
        }
    }
    h
}

/// Cut a slide into tile_size x tile_size patches on a regular grid.
///
/// Only grid positions fully inside the image produce a patch (partial
/// edge tiles are discarded). With a mask, a patch is kept only when its
/// mask coverage reaches `mask_coverage_min`. Every returned patch
/// carries its entropy.
pub fn tile_slide(
    slide_id: &str,
    img: &RgbImage,
    tile_size: usize,
    stride: usize,
    mask: Option<&AnnotationMask>,
    mask_coverage_min: f64,
) -> Result<Vec<Patch>> {
    if tile_size == 0 || stride == 0 {
        return Err(Error::Validation("tile_size and stride must be >= 1".into()));
    }
    if let Some(m) = mask {
        if m.width() != img.width || m.height() != img.height {
            return Err(Error::Dimension {
                what: format!("mask for slide {slide_id}"),
                expected: img.width * img.height,
                got: m.width() * m.height(),
            });
        }
    }
    let mut patches = Vec::new();
    if tile_size > img.width || tile_size > img.height {
        return Ok(patches);
    }
    let mut y = 0;
    while y + tile_size <= img.height {
        let mut x = 0;
        while x + tile_size <= img.width {
            let keep = match mask {
                Some(m) => m.coverage(x, y, tile_size, tile_size) >= mask_coverage_min,
                None => true,
            };
            if keep {
                let pixels = img.crop(x, y, tile_size, tile_size);
                let entropy_bits = shannon_entropy(&pixels);
                patches.push(Patch {
                    slide_id: slide_id.to_string(),
                    x,
                    y,
                    pixels,
                    entropy_bits,
                });
            }
            x += stride;
        }
        y += stride;
    }
    Ok(patches)
}

/// Keep exactly the patches whose entropy reaches the threshold,
/// preserving order.
pub fn filter_patches(patches: Vec<Patch>, threshold_bits: f64) -> Vec<Patch> {
    debug_assert!((0.0..=8.0).contains(&threshold_bits));
    patches
        .into_iter()
        .filter(|p| p.entropy_bits >= threshold_bits)
        .collect()
}

/// Bilinear sample of one channel at a fractional position, using
/// half-pixel centers and edge clamping. Exact at integer positions.
fn bilinear_channel(img: &RgbImage, c: usize, sx: f64, sy: f64) -> f64 {
    let w = img.width as isize;
    let h = img.height as isize;
    let x0 = sx.floor();
    let y0 = sy.floor();
    let wx = sx - x0;
    let wy = sy - y0;
    let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let (x0i, x1i) = (clamp(x0 as isize, w), clamp(x0 as isize + 1, w));
    let (y0i, y1i) = (clamp(y0 as isize, h), clamp(y0 as isize + 1, h));
    let at = |x: usize, y: usize| f64::from(img.pixel(x, y)[c]);
    let top = at(x0i, y0i) * (1.0 - wx) + at(x1i, y0i) * wx;
    let bot = at(x0i, y1i) * (1.0 - wx) + at(x1i, y1i) * wx;
    top * (1.0 - wy) + bot * wy
}

/// Bilinear resize to out_w x out_h, returning f64 samples in [0, 255]
/// laid out channel-major [3, out_h, out_w]. Identity when dimensions
/// are unchanged.
pub fn resize_bilinear_f64(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx_scale = img.width as f64 / out_w as f64;
    let sy_scale = img.height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(3 * out_w * out_h);
    for c in 0..3 {
        for y in 0..out_h {
            let sy = (y as f64 + 0.5) * sy_scale - 0.5;
            for x in 0..out_w {
                let sx = (x as f64 + 0.5) * sx_scale - 0.5;
                out.push(bilinear_channel(img, c, sx, sy));
            }
        }
    }
    out
}

/// Bilinear resize rounded back to 8-bit RGB.
pub fn resize_bilinear_u8(img: &RgbImage, out_w: usize, out_h: usize) -> RgbImage {
    let planes = resize_bilinear_f64(img, out_w, out_h);
    let n = out_w * out_h;
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        for c in 0..3 {
            data.push(planes[c * n + i].round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage {
        width: out_w,
        height: out_h,
        data,
    }
}

/// Resize a patch to the model input size and normalize each channel:
/// (v/255 - mean_c) / std_c. Output tensor shape [3, out_size, out_size].
pub fn resize_normalize(
    patch: &Patch,
    out_size: usize,
    mean: [f64; 3],
    std: [f64; 3],
) -> Tensor {
    let planes = resize_bilinear_f64(&patch.pixels, out_size, out_size);
    let n = out_size * out_size;
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        for i in 0..n {
            data.push((planes[c * n + i] / 255.0 - mean[c]) / std[c]);
        }
    }
    Tensor::from_vec(&[3, out_size, out_size], data).expect("shape is consistent by construction")
}

//! Deterministic, seedable patch augmentation.
//!
//! Every transform is a pure function of (image, parameters); randomness
//! enters only through an explicit seeded generator, so a fixed seed
//! reproduces the augmented stream byte for byte. Identity parameters
//! reproduce the input bit-exactly. Geometric ops keep the image size.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagery::{resize_bilinear_u8, to_grayscale, RgbImage};

/// Default per-transform application probability when the spec string
/// does not give one.
pub const DEFAULT_PROBABILITY: f64 = 0.5;

/// Fill color for pixels an affine warp pulls from outside the image.
/// Histology background is white glass.
pub const DEFAULT_FILL: [u8; 3] = [255, 255, 255];

const ERASE_ASPECT_LO: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    HFlip,
    VFlip,
    Rotation { max_deg: f64 },
    Shear { max_deg: f64 },
    Scale { lo: f64, hi: f64 },
    Translate { frac: f64 },
    Brightness { lo: f64, hi: f64 },
    Contrast { lo: f64, hi: f64 },
    Saturation { lo: f64, hi: f64 },
    Hue { max_shift: f64 },
    Grayscale,
    Solarize { threshold: u8 },
    Posterize { bits: u8 },
    Erase { lo: f64, hi: f64 },
    Crop { frac: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub transform: Transform,
    pub probability: f64,
}

/// Ordered augmentation recipe plus the affine/erase fill color.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentSpec {
    pub transforms: Vec<TransformSpec>,
    pub fill: [u8; 3],
}

impl AugmentSpec {
    pub fn empty() -> Self {
        AugmentSpec {
            transforms: Vec::new(),
            fill: DEFAULT_FILL,
        }
    }

    /// Parse the configuration form, e.g. `["rotation(10)", "vflip(0.5)"]`.
    ///
    /// Grammar per entry: `name` or `name(arg1[,arg2[,p]])`. Transforms
    /// with a value range take `(lo,hi[,p])`; single-parameter transforms
    /// take `(value[,p])`; flips and grayscale take `([p])`.
    pub fn parse(entries: &[String], fill: [u8; 3]) -> Result<Self> {
        let mut transforms = Vec::with_capacity(entries.len());
        for entry in entries {
            transforms.push(parse_entry(entry)?);
        }
        let spec = AugmentSpec { transforms, fill };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for ts in &self.transforms {
            if !(0.0..=1.0).contains(&ts.probability) {
                return Err(Error::Validation(format!(
                    "augment probability {} out of [0,1]",
                    ts.probability
                )));
            }
            match &ts.transform {
                Transform::Rotation { max_deg } | Transform::Shear { max_deg } => {
                    if !(0.0..=180.0).contains(max_deg) {
                        return Err(Error::Validation(format!(
                            "angle bound {max_deg} out of [0,180]"
                        )));
                    }
                }
                Transform::Scale { lo, hi } => {
                    if !(*lo > 0.0 && lo <= hi) {
                        return Err(Error::Validation(format!(
                            "scale range ({lo},{hi}) must be positive and ordered"
                        )));
                    }
                }
                Transform::Translate { frac } | Transform::Crop { frac } => {
                    if !(*frac > 0.0 && *frac <= 1.0) {
                        return Err(Error::Validation(format!("fraction {frac} out of (0,1]")));
                    }
                }
                Transform::Brightness { lo, hi }
                | Transform::Contrast { lo, hi }
                | Transform::Saturation { lo, hi } => {
                    if !(*lo >= 0.0 && lo <= hi) {
                        return Err(Error::Validation(format!(
                            "factor range ({lo},{hi}) must be non-negative and ordered"
                        )));
                    }
                }
                Transform::Hue { max_shift } => {
                    if !(0.0..=0.5).contains(max_shift) {
                        return Err(Error::Validation(format!(
                            "hue shift bound {max_shift} out of [0,0.5]"
                        )));
                    }
                }
                Transform::Posterize { bits } => {
                    if !(1..=8).contains(bits) {
                        return Err(Error::Validation(format!("posterize bits {bits} out of [1,8]")));
                    }
                }
                Transform::Erase { lo, hi } => {
                    if !(*lo >= 0.0 && lo <= hi && *hi <= 1.0) {
                        return Err(Error::Validation(format!(
                            "erase area range ({lo},{hi}) must lie in [0,1] and be ordered"
                        )));
                    }
                }
                Transform::HFlip
                | Transform::VFlip
                | Transform::Grayscale
                | Transform::Solarize { .. } => {}
            }
        }
        Ok(())
    }
}

fn parse_entry(entry: &str) -> Result<TransformSpec> {
    let entry = entry.trim();
    let bad = |msg: &str| Error::Config(format!("augment entry '{entry}': {msg}"));
    let (name, args): (&str, Vec<f64>) = match entry.find('(') {
        None => (entry, Vec::new()),
        Some(open) => {
            let close = entry
                .rfind(')')
                .ok_or_else(|| bad("missing closing parenthesis"))?;
            let name = &entry[..open];
            let inner = &entry[open + 1..close];
            let args = inner
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| bad(&format!("bad number '{}'", s.trim())))
                })
                .collect::<Result<Vec<f64>>>()?;
            (name, args)
        }
    };
    let p_or = |idx: usize| args.get(idx).copied().unwrap_or(DEFAULT_PROBABILITY);
    let need = |n: usize| -> Result<()> {
        if args.len() < n {
            Err(bad(&format!("expected at least {n} argument(s)")))
        } else {
            Ok(())
        }
    };
    let (transform, probability) = match name {
        "hflip" => (Transform::HFlip, p_or(0)),
        "vflip" => (Transform::VFlip, p_or(0)),
        "grayscale" => (Transform::Grayscale, p_or(0)),
        "rotation" => {
            // bare "rotation" defaults to the +/-10 degree range
            let max_deg = args.first().copied().unwrap_or(10.0);
            (Transform::Rotation { max_deg }, p_or(1))
        }
        "shear" => {
            need(1)?;
            (Transform::Shear { max_deg: args[0] }, p_or(1))
        }
        "translate" => {
            need(1)?;
            (Transform::Translate { frac: args[0] }, p_or(1))
        }
        "hue" => {
            need(1)?;
            (Transform::Hue { max_shift: args[0] }, p_or(1))
        }
        "crop" => {
            need(1)?;
            (Transform::Crop { frac: args[0] }, p_or(1))
        }
        "solarize" => {
            need(1)?;
            if !(0.0..=255.0).contains(&args[0]) {
                return Err(bad("threshold out of [0,255]"));
            }
            (
                Transform::Solarize {
                    threshold: args[0] as u8,
                },
                p_or(1),
            )
        }
        "posterize" => {
            need(1)?;
            (
                Transform::Posterize {
                    bits: args[0] as u8,
                },
                p_or(1),
            )
        }
        "scale" => {
            need(2)?;
            (
                Transform::Scale {
                    lo: args[0],
                    hi: args[1],
                },
                p_or(2),
            )
        }
        "brightness" => {
            need(2)?;
            (
                Transform::Brightness {
                    lo: args[0],
                    hi: args[1],
                },
                p_or(2),
            )
        }
        "contrast" => {
            need(2)?;
            (
                Transform::Contrast {
                    lo: args[0],
                    hi: args[1],
                },
                p_or(2),
            )
        }
        "saturation" => {
            need(2)?;
            (
                Transform::Saturation {
                    lo: args[0],
                    hi: args[1],
                },
                p_or(2),
            )
        }
        "erase" => {
            need(2)?;
            (
                Transform::Erase {
                    lo: args[0],
                    hi: args[1],
                },
                p_or(2),
            )
        }
        _ => return Err(bad("unknown transform name")),
    };
    Ok(TransformSpec {
        transform,
        probability,
    })
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(w - 1 - x, y, img.pixel(x, y));
        }
    }
    out
}

pub fn vflip(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, h - 1 - y, img.pixel(x, y));
        }
    }
    out
}

/// Bilinear tap that returns the fill value for positions outside the
/// pixel grid.
fn bilinear_fill(img: &RgbImage, c: usize, sx: f64, sy: f64, fill: f64) -> f64 {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let x0 = sx.floor() as isize;
    let y0 = sy.floor() as isize;
    let wx = sx - sx.floor();
    let wy = sy - sy.floor();
    let tap = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            fill
        } else {
            f64::from(img.pixel(x as usize, y as usize)[c])
        }
    };
    let top = tap(x0, y0) * (1.0 - wx) + tap(x0 + 1, y0) * wx;
    let bot = tap(x0, y0 + 1) * (1.0 - wx) + tap(x0 + 1, y0 + 1) * wx;
    top * (1.0 - wy) + bot * wy
}

/// Inverse-mapped affine warp about the image center: rotation, x-shear,
/// isotropic scale, then translation. Bilinear sampling with `fill` for
/// out-of-bounds taps. Identity parameters reproduce the input exactly.
pub fn affine(
    img: &RgbImage,
    rotate_deg: f64,
    shear_deg: f64,
    scale: f64,
    translate_px: (f64, f64),
    fill: [u8; 3],
) -> Result<RgbImage> {
    for v in [rotate_deg, shear_deg, scale, translate_px.0, translate_px.1] {
        if !v.is_finite() {
            return Err(Error::Validation("non-finite affine parameter".into()));
        }
    }
    if rotate_deg.abs() > 180.0 {
        return Err(Error::Validation(format!(
            "rotation {rotate_deg} out of [-180,180]"
        )));
    }
    if scale <= 0.0 {
        return Err(Error::Validation(format!("scale {scale} must be > 0")));
    }
    let theta = rotate_deg.to_radians();
    let phi = shear_deg.to_radians();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let tan_p = phi.tan();
    // M = R(theta) * Shear_x(phi) * scale
    let m00 = cos_t * scale;
    let m01 = (cos_t * tan_p - sin_t) * scale;
    let m10 = sin_t * scale;
    let m11 = (sin_t * tan_p + cos_t) * scale;
    let det = m00 * m11 - m01 * m10;
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Validation("degenerate affine matrix".into()));
    }
    let (i00, i01, i10, i11) = (m11 / det, -m01 / det, -m10 / det, m00 / det);
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let cy = (img.height() as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let dx = x as f64 - cx - translate_px.0;
            let dy = y as f64 - cy - translate_px.1;
            let sx = cx + i00 * dx + i01 * dy;
            let sy = cy + i10 * dx + i11 * dy;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = bilinear_fill(img, c, sx, sy, f64::from(fill[c]));
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.set_pixel(x, y, px);
        }
    }
    Ok(out)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness/contrast/saturation scaling and hue rotation, applied in
/// that order. Factor 1 (hue 0) stages are skipped, so an all-identity
/// call is bit-exact. All arithmetic in f64, one rounding at the end.
pub fn color_jitter(
    img: &RgbImage,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue_turns: f64,
) -> RgbImage {
    if brightness == 1.0 && contrast == 1.0 && saturation == 1.0 && hue_turns == 0.0 {
        return img.clone();
    }
    let n = img.width() * img.height();
    // Work on float channel triples.
    let mut px: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let p = img.pixel(i % img.width(), i / img.width());
            [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]
        })
        .collect();
    let clamp = |v: f64| v.clamp(0.0, 255.0);
    if brightness != 1.0 {
        for p in &mut px {
            for v in p.iter_mut() {
                *v = clamp(*v * brightness);
            }
        }
    }
    if contrast != 1.0 {
        let mean: f64 = px
            .iter()
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .sum::<f64>()
            / n as f64;
        for p in &mut px {
            for v in p.iter_mut() {
                *v = clamp(mean + (*v - mean) * contrast);
            }
        }
    }
    if saturation != 1.0 {
        for p in &mut px {
            let luma = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            for v in p.iter_mut() {
                *v = clamp(luma + (*v - luma) * saturation);
            }
        }
    }
    if hue_turns != 0.0 {
        for p in &mut px {
            let (h, s, v) = rgb_to_hsv(p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
            let (r, g, b) = hsv_to_rgb(h + hue_turns, s, v);
            *p = [clamp(r * 255.0), clamp(g * 255.0), clamp(b * 255.0)];
        }
    }
    let mut out = img.clone();
    for (i, p) in px.iter().enumerate() {
        out.set_pixel(
            i % img.width(),
            i / img.width(),
            [
                p[0].round() as u8,
                p[1].round() as u8,
                p[2].round() as u8,
            ],
        );
    }
    out
}

/// Invert every sample at or above the threshold.
pub fn solarize(img: &RgbImage, threshold: u8) -> RgbImage {
    let data = img
        .data()
        .iter()
        .map(|&v| if v >= threshold { 255 - v } else { v })
        .collect();
    RgbImage::new(img.width(), img.height(), data).expect("same dimensions")
}

/// Keep only the top `bits` bits of every sample.
pub fn posterize(img: &RgbImage, bits: u8) -> RgbImage {
    debug_assert!((1..=8).contains(&bits));
    let mask = 0xffu8 << (8 - bits);
    let data = img.data().iter().map(|&v| v & mask).collect();
    RgbImage::new(img.width(), img.height(), data).expect("same dimensions")
}

/// Replicate the luma into all three channels.
pub fn grayscale_aug(img: &RgbImage) -> RgbImage {
    let gray = to_grayscale(img);
    let mut data = Vec::with_capacity(gray.len() * 3);
    for v in gray {
        data.extend_from_slice(&[v, v, v]);
    }
    RgbImage::new(img.width(), img.height(), data).expect("same dimensions")
}

/// Replace one axis-aligned rectangle of sampled area fraction by the
/// fill color. A sampled fraction of 0 is the identity; a fraction >= 1
/// fills the whole image.
pub fn random_erase(
    img: &RgbImage,
    rng: &mut ChaCha8Rng,
    area_frac_range: (f64, f64),
    fill: [u8; 3],
) -> RgbImage {
    let (lo, hi) = area_frac_range;
    let frac = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    if frac <= 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    if frac >= 1.0 {
        return RgbImage::filled(w, h, fill);
    }
    let area = frac * (w * h) as f64;
    let aspect = rng.gen_range(ERASE_ASPECT_LO..=1.0 / ERASE_ASPECT_LO);
    let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let x0 = rng.gen_range(0..=w - ew);
    let y0 = rng.gen_range(0..=h - eh);
    let mut out = img.clone();
    for y in y0..y0 + eh {
        for x in x0..x0 + ew {
            out.set_pixel(x, y, fill);
        }
    }
    out
}

/// Crop a random sub-rectangle of side fraction `crop_frac` and resize
/// it back to the original size. Fraction 1 is the identity.
pub fn random_crop(img: &RgbImage, rng: &mut ChaCha8Rng, crop_frac: f64) -> RgbImage {
    debug_assert!(crop_frac > 0.0 && crop_frac <= 1.0);
    let (w, h) = (img.width(), img.height());
    let cw = ((w as f64 * crop_frac).round() as usize).clamp(1, w);
    let ch = ((h as f64 * crop_frac).round() as usize).clamp(1, h);
    let x0 = rng.gen_range(0..=w - cw);
    let y0 = rng.gen_range(0..=h - ch);
    if (cw, ch) == (w, h) {
        return img.clone();
    }
    let cropped = img.crop(x0, y0, cw, ch);
    resize_bilinear_u8(&cropped, w, h)
}

/// Apply the spec's transforms in order. Each transform fires with its
/// configured probability; parameters are then sampled from the same
/// generator, so a fixed seed gives a byte-identical output.
pub fn compose(spec: &AugmentSpec, rng: &mut ChaCha8Rng, img: &RgbImage) -> Result<RgbImage> {
    let mut out = img.clone();
    for ts in &spec.transforms {
        let gate: f64 = rng.gen();
        if gate >= ts.probability {
            continue;
        }
        out = match &ts.transform {
            Transform::HFlip => hflip(&out),
            Transform::VFlip => vflip(&out),
            Transform::Rotation { max_deg } => {
                let deg = rng.gen_range(-max_deg..=*max_deg);
                affine(&out, deg, 0.0, 1.0, (0.0, 0.0), spec.fill)?
            }
            Transform::Shear { max_deg } => {
                let deg = rng.gen_range(-max_deg..=*max_deg);
                affine(&out, 0.0, deg, 1.0, (0.0, 0.0), spec.fill)?
            }
            Transform::Scale { lo, hi } => {
                let s = rng.gen_range(*lo..=*hi);
                affine(&out, 0.0, 0.0, s, (0.0, 0.0), spec.fill)?
            }
            Transform::Translate { frac } => {
                let fx = frac * out.width() as f64;
                let fy = frac * out.height() as f64;
                let tx = rng.gen_range(-fx..=fx);
                let ty = rng.gen_range(-fy..=fy);
                affine(&out, 0.0, 0.0, 1.0, (tx, ty), spec.fill)?
            }
            Transform::Brightness { lo, hi } => {
                let f = rng.gen_range(*lo..=*hi);
                color_jitter(&out, f, 1.0, 1.0, 0.0)
            }
            Transform::Contrast { lo, hi } => {
                let f = rng.gen_range(*lo..=*hi);
                color_jitter(&out, 1.0, f, 1.0, 0.0)
            }
            Transform::Saturation { lo, hi } => {
                let f = rng.gen_range(*lo..=*hi);
                color_jitter(&out, 1.0, 1.0, f, 0.0)
            }
            Transform::Hue { max_shift } => {
                let shift = rng.gen_range(-max_shift..=*max_shift);
                color_jitter(&out, 1.0, 1.0, 1.0, shift)
            }
            Transform::Grayscale => grayscale_aug(&out),
            Transform::Solarize { threshold } => solarize(&out, *threshold),
            Transform::Posterize { bits } => posterize(&out, *bits),
            Transform::Erase { lo, hi } => random_erase(&out, rng, (*lo, *hi), spec.fill),
            Transform::Crop { frac } => random_crop(&out, rng, *frac),
        };
    }
    Ok(out)
}

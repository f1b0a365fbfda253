//! Pure image augmentation kernels.
//!
//! Every kernel is a pure function of its inputs and an explicit [`RngStream`]:
//! the same stream key always yields a bitwise-identical output, and no kernel
//! touches global state. Stochastic kernels are split into a deterministic
//! core (taking the sampled box / lambda / offsets explicitly, used directly
//! by tests) and a thin sampling wrapper.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::datastore::{ImageTensor, ValueDomain};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Class mass over the episode's N ways.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(pub Vec<f64>);

impl SoftLabel {
    pub fn one_hot(ways: usize, class: usize) -> Self {
        let mut w = vec![0.0; ways];
        w[class] = 1.0;
        Self(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `lambda * a + (1 - lambda) * b`, elementwise.
    pub fn mix(a: &SoftLabel, b: &SoftLabel, lambda: f64) -> Self {
        assert_eq!(a.len(), b.len(), "label lengths must match");
        Self(
            a.0.iter()
                .zip(&b.0)
                .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
                .collect(),
        )
    }

    /// Nonnegative and summing to 1 within 1e-9.
    pub fn is_simplex(&self) -> bool {
        let sum: f64 = self.0.iter().sum();
        self.0.iter().all(|&w| w >= 0.0) && (sum - 1.0).abs() <= 1e-9
    }
}

/// Result of a label-mixing kernel.
#[derive(Debug, Clone)]
pub struct MixOutcome {
    pub image: ImageTensor,
    /// Fraction attributed to the first input, in [0, 1].
    pub lambda: f64,
    pub label: SoftLabel,
}

/// Half-open pixel rectangle rows `y0..y1`, columns `x0..x1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn is_empty(&self) -> bool {
        self.y1 <= self.y0 || self.x1 <= self.x0
    }
}

fn ensure_same_geometry(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.geometry != b.geometry {
        return Err(Error::Geometry(format!(
            "paired kernel inputs disagree: {:?} vs {:?}",
            a.geometry, b.geometry
        )));
    }
    Ok(())
}

fn domain_max(domain: ValueDomain) -> f32 {
    match domain {
        ValueDomain::Raw => 255.0,
        ValueDomain::Normalized => 1.0,
    }
}

// ---------------------------------------------------------------------------
// CutMix
// ---------------------------------------------------------------------------

/// Replace `rect` of `img_a` with the same coordinates of `img_b`.
/// Lambda is computed from the actual number of replaced pixels.
pub fn cutmix_with_box(
    img_a: &ImageTensor,
    label_a: &SoftLabel,
    img_b: &ImageTensor,
    label_b: &SoftLabel,
    rect: Rect,
) -> Result<MixOutcome> {
    ensure_same_geometry(img_a, img_b)?;
    let geom = img_a.geometry;
    let mut image = img_a.clone();
    if !rect.is_empty() {
        for c in 0..geom.channels {
            for y in rect.y0..rect.y1.min(geom.height) {
                for x in rect.x0..rect.x1.min(geom.width) {
                    image.set(c, y, x, img_b.get(c, y, x));
                }
            }
        }
    }
    let replaced = if rect.is_empty() {
        0
    } else {
        (rect.y1.min(geom.height) - rect.y0) * (rect.x1.min(geom.width) - rect.x0)
    };
    let lambda = 1.0 - replaced as f64 / geom.plane() as f64;
    Ok(MixOutcome {
        image,
        lambda,
        label: SoftLabel::mix(label_a, label_b, lambda),
    })
}

/// Sample a box from the CutMix recipe: lambda ~ Beta(alpha, alpha), box side
/// fractions sqrt(1 - lambda), uniform center, clipped to the image.
pub fn sample_cutmix_box(
    height: usize,
    width: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Rect {
    let beta = Beta::new(alpha, alpha).expect("alpha must be positive");
    let lambda: f64 = beta.sample(rng);
    let ratio = (1.0 - lambda).sqrt();
    let cut_h = (height as f64 * ratio) as i64;
    let cut_w = (width as f64 * ratio) as i64;
    let cy = rng.random_range(0..height) as i64;
    let cx = rng.random_range(0..width) as i64;
    let y0 = (cy - cut_h / 2).clamp(0, height as i64) as usize;
    let y1 = (cy + (cut_h + 1) / 2).clamp(0, height as i64) as usize;
    let x0 = (cx - cut_w / 2).clamp(0, width as i64) as usize;
    let x1 = (cx + (cut_w + 1) / 2).clamp(0, width as i64) as usize;
    Rect { y0, x0, y1, x1 }
}

pub fn cutmix(
    img_a: &ImageTensor,
    label_a: &SoftLabel,
    img_b: &ImageTensor,
    label_b: &SoftLabel,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<MixOutcome> {
    ensure_same_geometry(img_a, img_b)?;
    let rect = sample_cutmix_box(img_a.geometry.height, img_a.geometry.width, alpha, rng);
    cutmix_with_box(img_a, label_a, img_b, label_b, rect)
}

// ---------------------------------------------------------------------------
// MixUp
// ---------------------------------------------------------------------------

/// `lambda * img_a + (1 - lambda) * img_b`, labels mixed with the same lambda.
pub fn mixup_with_lambda(
    img_a: &ImageTensor,
    label_a: &SoftLabel,
    img_b: &ImageTensor,
    label_b: &SoftLabel,
    lambda: f64,
) -> Result<MixOutcome> {
    ensure_same_geometry(img_a, img_b)?;
    let lam = lambda as f32;
    let data: Vec<f32> = img_a
        .data
        .iter()
        .zip(&img_b.data)
        .map(|(&a, &b)| lam * a + (1.0 - lam) * b)
        .collect();
    Ok(MixOutcome {
        image: ImageTensor::new(img_a.geometry, img_a.domain, data),
        lambda,
        label: SoftLabel::mix(label_a, label_b, lambda),
    })
}

pub fn mixup(
    img_a: &ImageTensor,
    label_a: &SoftLabel,
    img_b: &ImageTensor,
    label_b: &SoftLabel,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<MixOutcome> {
    let beta = Beta::new(alpha, alpha).expect("alpha must be positive");
    let lambda: f64 = beta.sample(rng);
    mixup_with_lambda(img_a, label_a, img_b, label_b, lambda)
}

// ---------------------------------------------------------------------------
// Self-Mix
// ---------------------------------------------------------------------------

/// Copy the patch at (src_y, src_x) over the patch at (dst_y, dst_x).
pub fn self_mix_with_patches(
    img: &ImageTensor,
    src: (usize, usize),
    dst: (usize, usize),
    patch: (usize, usize),
) -> ImageTensor {
    let geom = img.geometry;
    let (ph, pw) = patch;
    debug_assert!(src.0 + ph <= geom.height && src.1 + pw <= geom.width);
    debug_assert!(dst.0 + ph <= geom.height && dst.1 + pw <= geom.width);
    let mut out = img.clone();
    for c in 0..geom.channels {
        for dy in 0..ph {
            for dx in 0..pw {
                let v = img.get(c, src.0 + dy, src.1 + dx);
                out.set(c, dst.0 + dy, dst.1 + dx, v);
            }
        }
    }
    out
}

/// Patch side is ceil(side/2); source and destination are placed uniformly.
pub fn self_mix(img: &ImageTensor, rng: &mut RngStream) -> Result<ImageTensor> {
    let geom = img.geometry;
    if geom.height < 2 || geom.width < 2 {
        return Err(Error::Geometry(format!(
            "self-mix needs at least 2x2 pixels, got {}x{}",
            geom.height, geom.width
        )));
    }
    let ph = geom.height.div_ceil(2);
    let pw = geom.width.div_ceil(2);
    let src = (
        rng.random_range(0..=geom.height - ph),
        rng.random_range(0..=geom.width - pw),
    );
    let dst = (
        rng.random_range(0..=geom.height - ph),
        rng.random_range(0..=geom.width - pw),
    );
    Ok(self_mix_with_patches(img, src, dst, (ph, pw)))
}

// ---------------------------------------------------------------------------
// Random erase
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EraseParams {
    /// Erased-area fraction range.
    pub area: (f64, f64),
    /// Height/width aspect-ratio range.
    pub aspect: (f64, f64),
}

impl Default for EraseParams {
    fn default() -> Self {
        Self {
            area: (0.02, 0.33),
            aspect: (0.3, 3.3),
        }
    }
}

/// Fill `rect` with i.i.d. uniform noise over the value domain; everything
/// outside the rectangle is untouched. An empty rectangle is the identity
/// and consumes no randomness.
pub fn erase_rect(img: &ImageTensor, rect: Rect, rng: &mut RngStream) -> ImageTensor {
    if rect.is_empty() {
        return img.clone();
    }
    let geom = img.geometry;
    let hi = domain_max(img.domain);
    let lo = match img.domain {
        ValueDomain::Raw => 0.0f32,
        ValueDomain::Normalized => -1.0,
    };
    let mut out = img.clone();
    for c in 0..geom.channels {
        for y in rect.y0..rect.y1.min(geom.height) {
            for x in rect.x0..rect.x1.min(geom.width) {
                out.set(c, y, x, rng.random_range(lo..hi));
            }
        }
    }
    out
}

/// Sample an erase rectangle whose pixel-count fraction stays inside the
/// configured area range. Draws are rejected until the rounded rectangle
/// fits and its integer area respects the bounds; if no draw fits the
/// kernel degenerates to the identity.
pub fn sample_erase_rect(
    height: usize,
    width: usize,
    params: &EraseParams,
    rng: &mut RngStream,
) -> Option<Rect> {
    let plane = (height * width) as f64;
    for _ in 0..50 {
        let frac = rng.random_range(params.area.0..params.area.1);
        let aspect = rng.random_range(params.aspect.0..params.aspect.1);
        let target = frac * plane;
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > height || ew > width {
            continue;
        }
        let got = (eh * ew) as f64 / plane;
        if got < params.area.0 || got > params.area.1 {
            continue;
        }
        let y0 = rng.random_range(0..=height - eh);
        let x0 = rng.random_range(0..=width - ew);
        return Some(Rect {
            y0,
            x0,
            y1: y0 + eh,
            x1: x0 + ew,
        });
    }
    None
}

pub fn random_erase(img: &ImageTensor, params: &EraseParams, rng: &mut RngStream) -> ImageTensor {
    match sample_erase_rect(img.geometry.height, img.geometry.width, params, rng) {
        Some(rect) => erase_rect(img, rect, rng),
        None => img.clone(),
    }
}

// ---------------------------------------------------------------------------
// Rotation and flips
// ---------------------------------------------------------------------------

/// Exact rotation by `k` quarter turns clockwise. Odd `k` on non-square
/// images is rejected so output geometry always equals input geometry.
pub fn rotate90(img: &ImageTensor, k: u8) -> Result<ImageTensor> {
    let k = k % 4;
    let geom = img.geometry;
    if k % 2 == 1 && geom.height != geom.width {
        return Err(Error::Geometry(format!(
            "odd quarter-turn on non-square image {}x{}",
            geom.height, geom.width
        )));
    }
    if k == 0 {
        return Ok(img.clone());
    }
    let mut out = ImageTensor::zeros(geom, img.domain);
    for c in 0..geom.channels {
        for y in 0..geom.height {
            for x in 0..geom.width {
                let v = img.get(c, y, x);
                let (ny, nx) = match k {
                    1 => (x, geom.height - 1 - y),
                    2 => (geom.height - 1 - y, geom.width - 1 - x),
                    _ => (geom.width - 1 - x, y),
                };
                out.set(c, ny, nx, v);
            }
        }
    }
    Ok(out)
}

/// Reverse column order per row per channel.
pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let geom = img.geometry;
    let mut out = ImageTensor::zeros(geom, img.domain);
    for c in 0..geom.channels {
        for y in 0..geom.height {
            for x in 0..geom.width {
                out.set(c, y, geom.width - 1 - x, img.get(c, y, x));
            }
        }
    }
    out
}

/// Uniform quarter-turn draw with `k` in `min_k..=3`. Support/query rotation
/// uses `min_k = 0`; shot-level copies use `min_k = 1` so copies differ.
pub fn random_rotate90(img: &ImageTensor, min_k: u8, rng: &mut RngStream) -> Result<ImageTensor> {
    let k = rng.random_range(min_k..4u8);
    rotate90(img, k)
}

/// Flip with probability 1/2.
pub fn random_hflip(img: &ImageTensor, rng: &mut RngStream) -> ImageTensor {
    if rng.random_range(0.0..1.0f64) < 0.5 {
        hflip(img)
    } else {
        img.clone()
    }
}

// ---------------------------------------------------------------------------
// Random crop
// ---------------------------------------------------------------------------

/// Zero-pad `pad` pixels on every side, then crop the original-size window
/// whose top-left corner in padded coordinates is (dy, dx).
pub fn crop_with_offset(img: &ImageTensor, pad: usize, dy: usize, dx: usize) -> ImageTensor {
    let geom = img.geometry;
    debug_assert!(dy <= 2 * pad && dx <= 2 * pad);
    let mut out = ImageTensor::zeros(geom, img.domain);
    for c in 0..geom.channels {
        for y in 0..geom.height {
            for x in 0..geom.width {
                // Source pixel in original coordinates.
                let sy = y as i64 + dy as i64 - pad as i64;
                let sx = x as i64 + dx as i64 - pad as i64;
                if sy >= 0 && sy < geom.height as i64 && sx >= 0 && sx < geom.width as i64 {
                    out.set(c, y, x, img.get(c, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

pub fn random_crop(img: &ImageTensor, pad: usize, rng: &mut RngStream) -> ImageTensor {
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    crop_with_offset(img, pad, dy, dx)
}

// ---------------------------------------------------------------------------
// Color jitter
// ---------------------------------------------------------------------------

/// Brightness, contrast, and saturation scaling with explicit factors.
/// A factor of exactly 1 skips its stage, so all-ones is a bitwise identity.
pub fn color_jitter_with_factors(
    img: &ImageTensor,
    brightness: f32,
    contrast: f32,
    saturation: f32,
) -> ImageTensor {
    let geom = img.geometry;
    let hi = domain_max(img.domain);
    let mut out = img.clone();
    if brightness != 1.0 {
        for v in out.data.iter_mut() {
            *v *= brightness;
        }
    }
    if contrast != 1.0 {
        let mean = out.data.iter().sum::<f32>() / out.data.len() as f32;
        for v in out.data.iter_mut() {
            *v = mean + (*v - mean) * contrast;
        }
    }
    if saturation != 1.0 && geom.channels > 1 {
        let plane = geom.plane();
        for p in 0..plane {
            let mut gray = 0.0f32;
            for c in 0..geom.channels {
                gray += out.data[c * plane + p];
            }
            gray /= geom.channels as f32;
            for c in 0..geom.channels {
                let v = &mut out.data[c * plane + p];
                *v = gray + (*v - gray) * saturation;
            }
        }
    }
    if brightness != 1.0 || contrast != 1.0 || (saturation != 1.0 && geom.channels > 1) {
        for v in out.data.iter_mut() {
            *v = v.clamp(0.0, hi);
        }
    }
    out
}

/// Each factor drawn independently from U(1 - strength, 1 + strength).
pub fn color_jitter(img: &ImageTensor, strength: f64, rng: &mut RngStream) -> ImageTensor {
    let mut draw = || rng.random_range((1.0 - strength) as f32..(1.0 + strength) as f32);
    let b = draw();
    let c = draw();
    let s = draw();
    color_jitter_with_factors(img, b, c, s)
}

// ---------------------------------------------------------------------------
// Solarize and drop-channel
// ---------------------------------------------------------------------------

/// Raw domain: values strictly above the threshold are inverted (255 - x).
pub fn solarize(img: &ImageTensor, threshold: f32) -> ImageTensor {
    debug_assert_eq!(img.domain, ValueDomain::Raw, "solarize expects raw domain");
    let data = img
        .data
        .iter()
        .map(|&v| if v > threshold { 255.0 - v } else { v })
        .collect();
    ImageTensor::new(img.geometry, img.domain, data)
}

/// Zero out one channel, leaving others bit-identical.
pub fn drop_channel_at(img: &ImageTensor, channel: usize) -> ImageTensor {
    let geom = img.geometry;
    debug_assert!(channel < geom.channels);
    let mut out = img.clone();
    let plane = geom.plane();
    for v in &mut out.data[channel * plane..(channel + 1) * plane] {
        *v = 0.0;
    }
    out
}

pub fn drop_channel(img: &ImageTensor, rng: &mut RngStream) -> Result<ImageTensor> {
    let geom = img.geometry;
    if geom.channels < 2 {
        return Err(Error::Geometry(format!(
            "drop-channel needs at least 2 channels, got {}",
            geom.channels
        )));
    }
    let channel = rng.random_range(0..geom.channels);
    Ok(drop_channel_at(img, channel))
}

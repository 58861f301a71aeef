//! Stochastic augmentation: horizontal/vertical flips, colour jitter and HSV
//! shifts.
//!
//! Geometric ops move image and mask together; photometric ops touch the
//! image only. Every op is a pure function of its inputs and a seed.
//! Photometric order is fixed: brightness, contrast, saturation, HSV shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagery::{ImageTile, MaskTile};
use crate::rng::{derive, tag, SplitMix64};

#[derive(Debug, Error)]
#[error("invalid augmentation policy: {0}")]
pub struct PolicyError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for JitterStrength {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HsvShift {
    /// Maximum hue shift in degrees.
    pub max_dh: f64,
    pub max_ds: f64,
    pub max_dv: f64,
}

impl Default for HsvShift {
    fn default() -> Self {
        Self {
            max_dh: 18.0,
            max_ds: 0.1,
            max_dv: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub p_jitter: f64,
    pub jitter_strength: JitterStrength,
    pub hsv_shift: HsvShift,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            p_jitter: 0.5,
            jitter_strength: JitterStrength::default(),
            hsv_shift: HsvShift::default(),
        }
    }
}

impl AugmentPolicy {
    /// A policy that leaves every input untouched.
    pub fn identity() -> Self {
        Self {
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            p_jitter: 0.0,
            jitter_strength: JitterStrength {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
            },
            hsv_shift: HsvShift {
                max_dh: 0.0,
                max_ds: 0.0,
                max_dv: 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        for (name, p) in [
            ("p_flip_h", self.p_flip_h),
            ("p_flip_v", self.p_flip_v),
            ("p_jitter", self.p_jitter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PolicyError(format!("{name} = {p} is not a probability")));
            }
        }
        let j = &self.jitter_strength;
        let h = &self.hsv_shift;
        for (name, v) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
            ("max_ds", h.max_ds),
            ("max_dv", h.max_dv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PolicyError(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..=180.0).contains(&h.max_dh) {
            return Err(PolicyError(format!(
                "max_dh = {} outside [0, 180]",
                h.max_dh
            )));
        }
        Ok(())
    }
}

/// Two independently augmented views of one source tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: ImageTile,
    pub view_b: ImageTile,
    pub source_id: String,
}

fn flip_with(
    image: &ImageTile,
    mask: Option<&MaskTile>,
    map: impl Fn(usize, usize, usize, usize) -> (usize, usize),
) -> (ImageTile, Option<MaskTile>) {
    let (w, h) = (image.width(), image.height());
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x, y, w, h);
            pixels.push(image.pixel(sx, sy));
        }
    }
    let mask = mask.map(|m| {
        let mut labels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = map(x, y, w, h);
                labels.push(m.get(sx, sy));
            }
        }
        MaskTile::from_raw_unchecked(w, h, labels)
    });
    (ImageTile::from_raw_unchecked(w, h, pixels), mask)
}

/// Mirror about the vertical axis.
pub fn flip_h(image: &ImageTile, mask: Option<&MaskTile>) -> (ImageTile, Option<MaskTile>) {
    flip_with(image, mask, |x, y, w, _| (w - 1 - x, y))
}

/// Mirror about the horizontal axis.
pub fn flip_v(image: &ImageTile, mask: Option<&MaskTile>) -> (ImageTile, Option<MaskTile>) {
    flip_with(image, mask, |x, y, _, h| (x, h - 1 - y))
}

/// Hexcone RGB to HSV; hue in degrees `[0, 360)`, hue of greys is 0.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = h.rem_euclid(360.0);
    (if h >= 360.0 { 0.0 } else { h }, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn map_hsv(image: &ImageTile, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) -> ImageTile {
    image.map_clamped(|[r, g, b]| {
        let (h, s, v) = rgb_to_hsv(r as f64, g as f64, b as f64);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        [r as f32, g as f32, b as f32]
    })
}

fn luminance(p: [f32; 3]) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

/// Draw `1 + strength * U[-1, 1)`, which is exactly 1 at zero strength.
fn draw_scale(rng: &mut SplitMix64, strength: f64) -> f64 {
    1.0 + strength * rng.uniform(-1.0, 1.0)
}

/// With probability `p_jitter`: brightness scale, contrast scale about the
/// mean luminance, then saturation scale in HSV. Scales equal to one are
/// skipped so a zero-strength jitter is an exact no-op.
pub fn color_jitter(image: &ImageTile, policy: &AugmentPolicy, seed: u64) -> ImageTile {
    let mut rng = SplitMix64::new(seed);
    if !rng.bernoulli(policy.p_jitter) {
        return image.clone();
    }
    let strength = &policy.jitter_strength;
    let b = draw_scale(&mut rng, strength.brightness);
    let c = draw_scale(&mut rng, strength.contrast);
    let s = draw_scale(&mut rng, strength.saturation);

    let mut out = image.clone();
    if b != 1.0 {
        out = out.map_clamped(|p| p.map(|v| (v as f64 * b) as f32));
    }
    if c != 1.0 {
        let n = out.pixels().len() as f64;
        let mean = out.pixels().iter().map(|&p| luminance(p)).sum::<f64>() / n;
        out = out.map_clamped(|p| p.map(|v| ((v as f64 - mean) * c + mean) as f32));
    }
    if s != 1.0 {
        out = map_hsv(&out, |h, sat, v| (h, (sat * s).clamp(0.0, 1.0), v));
    }
    out
}

/// Shift hue (mod 360), saturation and value by explicit amounts.
pub fn shift_hsv(image: &ImageTile, dh: f64, ds: f64, dv: f64) -> ImageTile {
    if dh == 0.0 && ds == 0.0 && dv == 0.0 {
        return image.clone();
    }
    map_hsv(image, |h, s, v| {
        (
            (h + dh).rem_euclid(360.0),
            (s + ds).clamp(0.0, 1.0),
            (v + dv).clamp(0.0, 1.0),
        )
    })
}

/// Draw one `(dh, ds, dv)` per image uniformly within the policy maxima and
/// apply it.
pub fn hsv_shift(image: &ImageTile, policy: &AugmentPolicy, seed: u64) -> ImageTile {
    let mut rng = SplitMix64::new(seed);
    let m = &policy.hsv_shift;
    let dh = m.max_dh * rng.uniform(-1.0, 1.0);
    let ds = m.max_ds * rng.uniform(-1.0, 1.0);
    let dv = m.max_dv * rng.uniform(-1.0, 1.0);
    shift_hsv(image, dh, ds, dv)
}

/// Sub-stream indices within one augmentation chain.
const FLIP_H: u64 = 0;
const FLIP_V: u64 = 1;
const JITTER: u64 = 2;
const HSV: u64 = 3;

fn chain(
    image: &ImageTile,
    mask: Option<&MaskTile>,
    policy: &AugmentPolicy,
    seed: u64,
) -> (ImageTile, Option<MaskTile>) {
    let mut image = image.clone();
    let mut mask = mask.cloned();
    if SplitMix64::new(derive(seed, &[FLIP_H])).bernoulli(policy.p_flip_h) {
        (image, mask) = flip_h(&image, mask.as_ref());
    }
    if SplitMix64::new(derive(seed, &[FLIP_V])).bernoulli(policy.p_flip_v) {
        (image, mask) = flip_v(&image, mask.as_ref());
    }
    image = color_jitter(&image, policy, derive(seed, &[JITTER]));
    image = hsv_shift(&image, policy, derive(seed, &[HSV]));
    (image, mask)
}

/// Seed of view `k` (0 or 1) of a pair; each view's chain only reads its own
/// stream.
pub fn view_seed(seed: u64, k: u64) -> u64 {
    derive(seed, &[tag::VIEWS, k])
}

/// Run the full chain twice with independent streams.
pub fn make_view_pair(
    image: &ImageTile,
    policy: &AugmentPolicy,
    seed: u64,
    source_id: &str,
) -> ViewPair {
    ViewPair {
        view_a: chain(image, None, policy, view_seed(seed, 0)).0,
        view_b: chain(image, None, policy, view_seed(seed, 1)).0,
        source_id: source_id.to_string(),
    }
}

/// Flips shared by image and mask; photometric ops on the image only.
pub fn augment_labeled(
    image: &ImageTile,
    mask: &MaskTile,
    policy: &AugmentPolicy,
    seed: u64,
) -> (ImageTile, MaskTile) {
    let (image, mask) = chain(image, Some(mask), policy, derive(seed, &[tag::AUGMENT]));
    (image, mask.expect("mask threaded through chain"))
}

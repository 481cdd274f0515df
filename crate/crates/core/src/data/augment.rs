use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Augmentation strengths. Jitter factors are drawn from `[1−s, 1+s]`, the
/// hue rotation fraction from `[−hue, hue]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Minimum area fraction kept by a random crop, in `(0, 1]`.
    pub crop_scale: f64,
    /// Keeps the image's own aspect ratio instead of sampling `[3/4, 4/3]`.
    pub lock_aspect: bool,
    pub shift_max: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            crop_scale: 1.0,
            lock_aspect: false,
            shift_max: 0,
        }
    }
}

impl AugmentSpec {
    /// The color-jitter magnitudes 0.4 / 0.4 / 0.4 / 0.2.
    pub fn color_jitter() -> Self {
        AugmentSpec {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Parameter(format!("{name} strength must be >= 0, got {v}")));
            }
        }
        if !(self.crop_scale > 0.0 && self.crop_scale <= 1.0) {
            return Err(Error::Parameter(format!(
                "crop_scale must be in (0, 1], got {}",
                self.crop_scale
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Jitter,
    Crop,
    Shift,
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jitter" => Ok(AugmentMode::Jitter),
            "crop" => Ok(AugmentMode::Crop),
            "shift" => Ok(AugmentMode::Shift),
            other => Err(Error::Parameter(format!(
                "unknown augmentation mode `{other}` (expected jitter, crop or shift)"
            ))),
        }
    }
}

/// Concrete jitter draw. Factors of 1 and a hue of 0 leave a channel alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Rotation as a fraction of a full turn.
    pub hue: f32,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    fn sample(spec: &AugmentSpec, rng: &mut Rng) -> Self {
        let mut factor = |s: f64| {
            if s > 0.0 {
                rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32
            } else {
                1.0
            }
        };
        let (brightness, contrast, saturation) = (
            factor(spec.brightness),
            factor(spec.contrast),
            factor(spec.saturation),
        );
        let hue = if spec.hue > 0.0 {
            rng.random_range(-spec.hue..=spec.hue) as f32
        } else {
            0.0
        };
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn clip(v: &mut [f32]) {
    for x in v {
        *x = x.clamp(0.0, 1.0);
    }
}

fn rgb_planes(image: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] => Ok((h, w)),
        [c, _, _] => Err(Error::dim(op, "0 (channels)", 3, c)),
        ref s => Err(Error::dim(op, "rank", 3, s.len())),
    }
}

/// Applies brightness, contrast, saturation and hue in that order, clipping
/// to `[0,1]` after each step.
pub fn jitter_with(image: &Tensor<f32>, f: JitterFactors) -> Result<Tensor<f32>> {
    let (h, w) = rgb_planes(image, "jitter")?;
    let plane = h * w;
    let mut x = image.data().to_vec();
    if f.brightness != 1.0 {
        for v in x.iter_mut() {
            *v *= f.brightness;
        }
        clip(&mut x);
    }
    if f.contrast != 1.0 {
        let mean = (0..plane)
            .map(|p| luma(x[p], x[plane + p], x[2 * plane + p]))
            .sum::<f32>()
            / plane as f32;
        for v in x.iter_mut() {
            *v = mean + f.contrast * (*v - mean);
        }
        clip(&mut x);
    }
    if f.saturation != 1.0 {
        for p in 0..plane {
            let l = luma(x[p], x[plane + p], x[2 * plane + p]);
            for c in 0..3 {
                let v = &mut x[c * plane + p];
                *v = l + f.saturation * (*v - l);
            }
        }
        clip(&mut x);
    }
    if f.hue != 0.0 {
        let (sin, cos) = (std::f32::consts::TAU * f.hue).sin_cos();
        for p in 0..plane {
            let (r, g, b) = (x[p], x[plane + p], x[2 * plane + p]);
            let y = luma(r, g, b);
            let i = 0.596 * r - 0.274 * g - 0.322 * b;
            let q = 0.211 * r - 0.523 * g + 0.312 * b;
            let (i, q) = (cos * i - sin * q, sin * i + cos * q);
            x[p] = y + 0.956 * i + 0.621 * q;
            x[plane + p] = y - 0.272 * i - 0.647 * q;
            x[2 * plane + p] = y - 1.106 * i + 1.703 * q;
        }
        clip(&mut x);
    }
    Tensor::new([3, h, w], x)
}

/// Bilinear resize of one `C×h×w` region (top-left `(y0, x0)`) to `out_h×out_w`
/// with half-pixel centers; sampling is clamped to the region.
#[allow(clippy::too_many_arguments)]
fn resize_region(
    src: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    (y0, x0, rh, rw): (usize, usize, usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f32> {
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    let sy = rh as f32 / out_h as f32;
    let sx = rw as f32 / out_w as f32;
    let axis = |o: usize, s: f32, len: usize| {
        let pos = ((o as f32 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f32)
    };
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..out_h {
            let (ya, yb, ty) = axis(oy, sy, rh);
            for ox in 0..out_w {
                let (xa, xb, tx) = axis(ox, sx, rw);
                let at = |yy: usize, xx: usize| src[base + (y0 + yy) * w + x0 + xx];
                let top = at(ya, xa) * (1.0 - tx) + at(ya, xb) * tx;
                let bottom = at(yb, xa) * (1.0 - tx) + at(yb, xb) * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}

fn crop(image: &Tensor<f32>, spec: &AugmentSpec, rng: &mut Rng) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("crop", "rank", 3, image.ndim()));
    };
    let area = (h * w) as f64;
    let mut region = (0, 0, h, w);
    for _ in 0..10 {
        let frac = if spec.crop_scale < 1.0 {
            rng.random_range(spec.crop_scale..=1.0)
        } else {
            1.0
        };
        let aspect = if spec.lock_aspect {
            w as f64 / h as f64
        } else {
            rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp()
        };
        let rw = (frac * area * aspect).sqrt().round() as usize;
        let rh = (frac * area / aspect).sqrt().round() as usize;
        if (1..=w).contains(&rw) && (1..=h).contains(&rh) {
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            region = (y0, x0, rh, rw);
            break;
        }
    }
    let data = resize_region(image.data(), c, (h, w), region, (h, w));
    Tensor::new([c, h, w], data)
}

fn shift(image: &Tensor<f32>, spec: &AugmentSpec, rng: &mut Rng) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("shift", "rank", 3, image.ndim()));
    };
    let m = spec.shift_max as i64;
    let dy = rng.random_range(-m..=m) as isize;
    let dx = rng.random_range(-m..=m) as isize;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in 0..h as isize {
            let sy = (y - dy).clamp(0, h as isize - 1) as usize;
            for x in 0..w as isize {
                let sx = (x - dx).clamp(0, w as isize - 1) as usize;
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// One random augmentation of a `C×H×W` image. Jitter needs 3 channels.
pub fn augment(image: &Tensor<f32>, spec: &AugmentSpec, mode: AugmentMode, rng: &mut Rng) -> Result<Tensor<f32>> {
    spec.validate()?;
    match mode {
        AugmentMode::Jitter => jitter_with(image, JitterFactors::sample(spec, rng)),
        AugmentMode::Crop => crop(image, spec, rng),
        AugmentMode::Shift => shift(image, spec, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn random_rgb(seed: u64) -> Tensor<f32> {
        let mut rng = rng_for(seed, &[]);
        Tensor::new([3, 6, 5], (0..90).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn zero_strengths_are_identity() {
        let img = random_rgb(1);
        let mut rng = rng_for(0, &[]);
        for mode in [AugmentMode::Jitter, AugmentMode::Crop, AugmentMode::Shift] {
            let out = augment(&img, &AugmentSpec::default(), mode, &mut rng).unwrap();
            assert_eq!(out, img, "{mode:?}");
        }
    }

    #[test]
    fn brightness_scales_pixels() {
        let img = Tensor::full([3, 1, 1], 0.5f32);
        let f = JitterFactors {
            brightness: 1.4,
            ..JitterFactors::IDENTITY
        };
        let out = jitter_with(&img, f).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn saturation_zero_gives_gray_and_hue_keeps_gray() {
        let img = random_rgb(2);
        let f = JitterFactors {
            saturation: 0.0,
            ..JitterFactors::IDENTITY
        };
        let out = jitter_with(&img, f).unwrap();
        let plane = 30;
        for p in 0..plane {
            assert!((out.data()[p] - out.data()[plane + p]).abs() < 1e-6);
        }
        let rotated = jitter_with(&out, JitterFactors { hue: 0.3, ..JitterFactors::IDENTITY }).unwrap();
        assert!(rotated.max_abs_diff(&out) < 1e-4);
    }

    #[test]
    fn full_turn_hue_is_identity() {
        let img = Tensor::new([3, 1, 2], vec![0.6, 0.2, 0.4, 0.5, 0.3, 0.3]).unwrap();
        let out = jitter_with(&img, JitterFactors { hue: 1.0, ..JitterFactors::IDENTITY }).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-3);
    }

    #[test]
    fn jitter_requires_three_channels() {
        let gray = Tensor::<f32>::zeros([1, 4, 4]);
        let mut rng = rng_for(0, &[]);
        assert!(augment(&gray, &AugmentSpec::color_jitter(), AugmentMode::Jitter, &mut rng).is_err());
        assert!("rotate".parse::<AugmentMode>().is_err());
        assert_eq!("crop".parse::<AugmentMode>().unwrap(), AugmentMode::Crop);
    }

    #[test]
    fn locked_full_crop_is_identity() {
        let img = random_rgb(3);
        let spec = AugmentSpec {
            lock_aspect: true,
            ..AugmentSpec::default()
        };
        let mut rng = rng_for(4, &[]);
        assert_eq!(crop(&img, &spec, &mut rng).unwrap(), img);
    }

    #[test]
    fn shift_pads_with_edges() {
        let img = Tensor::new([1, 1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let spec = AugmentSpec {
            shift_max: 2,
            ..AugmentSpec::default()
        };
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..40 {
            let out = shift(&img, &spec, &mut rng_for(s, &[])).unwrap();
            seen.insert(format!("{:?}", out.data()));
            for v in out.data() {
                assert!(img.data().contains(v));
            }
        }
        assert!(seen.len() > 1);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let img = random_rgb(0);
        let mut rng = rng_for(0, &[]);
        let bad = AugmentSpec {
            crop_scale: 0.0,
            ..AugmentSpec::default()
        };
        assert!(augment(&img, &bad, AugmentMode::Crop, &mut rng).is_err());
    }
}

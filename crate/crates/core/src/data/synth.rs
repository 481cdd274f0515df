//! Synthetic domains rendered from grayscale digits. Every item draws from
//! its own stream `(seed, item index)`, so outputs do not depend on the
//! order items are produced in.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, Rng};
use crate::tensor::Tensor;

/// Brightness ceiling for random backgrounds, keeping white digits legible.
const MAX_BACKGROUND_LUMA: f32 = 0.7;
const BANK_SIZE: usize = 48;
const BANK_SIDE: usize = 96;

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn background_color(rng: &mut Rng) -> [f32; 3] {
    loop {
        let c = random_color(rng);
        if luma(c) <= MAX_BACKGROUND_LUMA {
            return c;
        }
    }
}

fn require_gray(src: &LabeledDataset, op: &'static str) -> Result<()> {
    if src.channels() != 1 {
        return Err(Error::dim(op, "1 (channels)", 1, src.channels()));
    }
    Ok(())
}

/// Where MNIST-M-style backgrounds come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSource {
    /// Smoothed multi-octave colored noise.
    Procedural,
    /// PNG or binary PPM (P6) images, each at least as large as the digits.
    Directory(PathBuf),
}

/// RGB planes (`3×h×w`) to crop backgrounds from.
struct PatchBank {
    images: Vec<(usize, usize, Vec<f32>)>,
}

impl PatchBank {
    fn build(source: &PatchSource, seed: u64, min_side: usize) -> Result<Self> {
        let images = match source {
            PatchSource::Procedural => {
                let mut rng = rng_for(seed, &[stream::SYNTH, u64::MAX]);
                (0..BANK_SIZE)
                    .map(|_| (BANK_SIDE, BANK_SIDE, procedural_texture(BANK_SIDE, &mut rng)))
                    .collect()
            }
            PatchSource::Directory(dir) => load_patch_dir(dir)?,
        };
        if let Some((h, w, _)) = images.iter().find(|(h, w, _)| *h < min_side || *w < min_side) {
            return Err(Error::Input(format!(
                "patch image {w}×{h} is smaller than the {min_side}×{min_side} digits"
            )));
        }
        Ok(PatchBank { images })
    }

    /// A random `3×h×w` crop.
    fn crop(&self, h: usize, w: usize, rng: &mut Rng) -> Vec<f32> {
        let (ph, pw, img) = &self.images[rng.random_range(0..self.images.len())];
        let y0 = rng.random_range(0..=ph - h);
        let x0 = rng.random_range(0..=pw - w);
        let mut out = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                let row = (c * ph + y0 + y) * pw + x0;
                out.extend_from_slice(&img[row..row + w]);
            }
        }
        out
    }
}

/// Value noise summed over octaves: a shared luminance field plus weaker
/// per-channel chroma fields around a random base color.
fn procedural_texture(side: usize, rng: &mut Rng) -> Vec<f32> {
    let base = random_color(rng);
    let octaves: [(usize, f32); 4] = [(3, 0.35), (6, 0.25), (12, 0.18), (24, 0.12)];
    let mut lum = vec![0.0f32; side * side];
    let mut chroma = vec![vec![0.0f32; side * side]; 3];
    for &(cells, amp) in &octaves {
        add_value_noise(&mut lum, side, cells, amp, rng);
        for ch in chroma.iter_mut() {
            add_value_noise(ch, side, cells, amp * 0.5, rng);
        }
    }
    let mut out = Vec::with_capacity(3 * side * side);
    for (c, ch) in chroma.iter().enumerate() {
        out.extend(
            lum.iter()
                .zip(ch)
                .map(|(&l, &k)| (base[c] + l + k).clamp(0.0, 1.0)),
        );
    }
    out
}

fn add_value_noise(field: &mut [f32], side: usize, cells: usize, amp: f32, rng: &mut Rng) {
    let grid: Vec<f32> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let scale = cells as f32 / side as f32;
    for y in 0..side {
        let gy = y as f32 * scale;
        let (y0, ty) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..side {
            let gx = x as f32 * scale;
            let (x0, tx) = (gx.floor() as usize, smooth(gx.fract()));
            let at = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            field[y * side + x] += amp * (top * (1.0 - ty) + bottom * ty);
        }
    }
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn load_patch_dir(dir: &Path) -> Result<Vec<(usize, usize, Vec<f32>)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("ppm" | "png")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!(
            "patch directory {} contains no .ppm or .png images",
            dir.display()
        )));
    }
    paths.iter().map(|p| load_rgb(p)).collect()
}

fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P6") {
        return parse_ppm(&bytes, path);
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, planar(h, w, img.as_raw(), 255.0, 1)))
}

/// Interleaved RGB samples to `3×h×w` planes in `[0,1]`.
fn planar(h: usize, w: usize, samples: &[u8], maxval: f32, bytes_per: usize) -> Vec<f32> {
    let sample = |i: usize| {
        if bytes_per == 1 {
            samples[i] as f32
        } else {
            u16::from_be_bytes([samples[2 * i], samples[2 * i + 1]]) as f32
        }
    };
    let mut out = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            out[c * h * w + p] = (sample(3 * p + c) / maxval).min(1.0);
        }
    }
    out
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "malformed PPM header"))?;
    }
    let [w, h, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) || maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, "malformed PPM header"));
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let body = &bytes[pos + 1..];
    if body.len() < 3 * w * h * bytes_per {
        return Err(Error::format(path, "truncated PPM pixel data"));
    }
    Ok((h, w, planar(h, w, body, maxval as f32, bytes_per)))
}

/// Visual domains for the grouped fairness dataset, in group-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Gray,
    ColorBackground,
    MnistM,
    Inverted,
    ColorForeground,
    Noisy,
    TwoTone,
}

pub const GROUPED_DOMAINS: [Domain; 7] = [
    Domain::Gray,
    Domain::ColorBackground,
    Domain::MnistM,
    Domain::Inverted,
    Domain::ColorForeground,
    Domain::Noisy,
    Domain::TwoTone,
];

fn render(domain: Domain, g: &[f32], h: usize, w: usize, bank: &PatchBank, rng: &mut Rng) -> Vec<f32> {
    let plane = g.len();
    let mut out = Vec::with_capacity(3 * plane);
    let tint = |out: &mut Vec<f32>, f: &dyn Fn(usize, f32) -> f32| {
        for c in 0..3 {
            out.extend(g.iter().map(|&v| f(c, v)));
        }
    };
    match domain {
        Domain::Gray => tint(&mut out, &|_, v| v),
        Domain::Inverted => tint(&mut out, &|_, v| 1.0 - v),
        Domain::ColorBackground => {
            let bg = background_color(rng);
            tint(&mut out, &|c, v| v + (1.0 - v) * bg[c]);
        }
        Domain::ColorForeground => {
            let fg = loop {
                let c = random_color(rng);
                if luma(c) >= 0.4 {
                    break c;
                }
            };
            tint(&mut out, &|c, v| v * fg[c]);
        }
        Domain::TwoTone => {
            let (fg, bg) = loop {
                let (a, b) = (random_color(rng), random_color(rng));
                if (luma(a) - luma(b)).abs() >= 0.3 {
                    break (a, b);
                }
            };
            tint(&mut out, &|c, v| v * fg[c] + (1.0 - v) * bg[c]);
        }
        Domain::Noisy => {
            let normal = Normal::new(0.0f32, 0.25).unwrap();
            let noisy: Vec<f32> = g
                .iter()
                .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect();
            for _ in 0..3 {
                out.extend_from_slice(&noisy);
            }
        }
        Domain::MnistM => {
            let patch = bank.crop(h, w, rng);
            for c in 0..3 {
                out.extend(
                    g.iter()
                        .zip(&patch[c * plane..(c + 1) * plane])
                        .map(|(&v, &p)| (p - v).abs()),
                );
            }
        }
    }
    out
}

fn synthesize(
    src: &LabeledDataset,
    seed: u64,
    patches: Option<&PatchSource>,
    domain_of: impl Fn(usize) -> Domain,
    op: &'static str,
) -> Result<LabeledDataset> {
    require_gray(src, op)?;
    let [_, h, w] = src.item_shape();
    let bank = match patches {
        Some(source) => PatchBank::build(source, seed, h.max(w))?,
        None => PatchBank { images: Vec::new() },
    };
    let mut data = Vec::with_capacity(src.len() * 3 * h * w);
    for i in 0..src.len() {
        let mut rng = rng_for(seed, &[stream::SYNTH, i as u64]);
        data.extend(render(domain_of(i), src.image(i), h, w, &bank, &mut rng));
    }
    let images = Tensor::new([src.len(), 3, h, w], data)?;
    let mut out = LabeledDataset::new(images, src.labels().to_vec(), src.num_classes())?;
    if let Some(s) = src.secondary_labels() {
        out = out.with_secondary_labels(s.to_vec())?;
    }
    Ok(out)
}

/// White digits over a random per-image background color `c` (luma at most
/// 0.7): `pixel = g + (1 − g)·c`.
pub fn synth_mnist_color(src: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let out = synthesize(src, seed, None, |_| Domain::ColorBackground, "synth_mnist_color")?;
    keep_groups(src, out)
}

/// Digits blended into random background crops by per-channel absolute
/// difference: `out_c = |p_c − g|`.
pub fn synth_mnist_m(src: &LabeledDataset, patches: &PatchSource, seed: u64) -> Result<LabeledDataset> {
    let out = synthesize(src, seed, Some(patches), |_| Domain::MnistM, "synth_mnist_m")?;
    keep_groups(src, out)
}

fn keep_groups(src: &LabeledDataset, out: LabeledDataset) -> Result<LabeledDataset> {
    match src.groups() {
        Some(g) => out.with_groups(g.to_vec()),
        None => Ok(out),
    }
}

/// Renders item `i` in domain `GROUPED_DOMAINS[i % 7]` and uses the domain
/// index as its group id.
pub fn synth_grouped_domains(
    src: &LabeledDataset,
    patches: &PatchSource,
    seed: u64,
) -> Result<LabeledDataset> {
    let k = GROUPED_DOMAINS.len();
    let out = synthesize(src, seed, Some(patches), |i| GROUPED_DOMAINS[i % k], "synth_grouped_domains")?;
    out.with_groups((0..src.len()).map(|i| i % k).collect())
}

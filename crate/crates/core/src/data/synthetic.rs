//! Deterministic synthetic defect dataset: smooth sinusoidal gratings with
//! additive noise as the normal appearance, plus localized high-contrast
//! defects (elliptic blobs, thin scratches) with exact masks on the
//! anomalous test images.
//!
//! Every image derives from counter-based streams keyed by (seed, purpose,
//! index), so a given seed reproduces the dataset exactly and the same
//! image can be re-rendered with or without its defect.

use super::{Dataset, Label, Sample};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    Blob,
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub defect_kinds: Vec<DefectKind>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 64,
            width: 64,
            channels: 1,
            n_train: 96,
            n_test_normal: 50,
            n_test_anomalous: 100,
            defect_kinds: vec![DefectKind::Blob, DefectKind::Scratch],
            seed: 0,
        }
    }
}

const NOISE_STD: f64 = 0.05;
const MIN_REGION_PIXELS: usize = 16;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream per (seed, purpose, index).
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(purpose) ^ splitmix64(index.wrapping_mul(0x9e37)));
    ChaCha8Rng::seed_from_u64(mixed)
}

const PURPOSE_TRAIN: u64 = 1;
const PURPOSE_TEST_NORMAL: u64 = 2;
const PURPOSE_TEST_ANOMALOUS: u64 = 3;
const PURPOSE_DEFECT: u64 = 4;

/// Renders the defect-free image for a stream.
fn render_base(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let n_gratings = rng.gen_range(2..=4usize);
    let scale = h.max(w) as f64;
    let mut components = Vec::with_capacity(n_gratings);
    for _ in 0..n_gratings {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let freq: f64 = rng.gen_range(0.5..2.5);
        let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        let amp: f64 = rng.gen_range(0.3..0.7);
        components.push((theta.cos(), theta.sin(), freq, phase, amp));
    }
    let noise = Normal::new(0.0, NOISE_STD).unwrap();
    let mut data = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0f64;
            for &(ct, st, freq, phase, amp) in &components {
                let u = (x as f64 * ct + y as f64 * st) / scale;
                v += amp * (2.0 * std::f64::consts::PI * freq * u + phase).sin();
            }
            v /= n_gratings as f64;
            let v = (v + noise.sample(rng)).clamp(-1.0, 1.0) as f32;
            for ch in 0..c {
                data[(y * w + x) * c + ch] = v;
            }
        }
    }
    data
}

struct Defect {
    pixels: Vec<usize>,
    magnitude: f32,
}

fn ellipse_pixels(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (h, w) = (cfg.height, cfg.width);
    let r1: f64 = rng.gen_range(3.0..7.0);
    let r2: f64 = rng.gen_range(3.0..7.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let margin = (r1.max(r2)).ceil() as usize + 1;
    let cy = rng.gen_range(margin..h - margin) as f64;
    let cx = rng.gen_range(margin..w - margin) as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut pixels = Vec::new();
    let reach = r1.max(r2).ceil() as i64;
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let fy = dy as f64;
            let fx = dx as f64;
            let u = fx * ca + fy * sa;
            let v = -fx * sa + fy * ca;
            if (u / r1) * (u / r1) + (v / r2) * (v / r2) <= 1.0 {
                let py = (cy as i64 + dy) as usize;
                let px = (cx as i64 + dx) as usize;
                pixels.push(py * w + px);
            }
        }
    }
    pixels
}

fn scratch_pixels(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (h, w) = (cfg.height, cfg.width);
    let margin = 4usize;
    let mut y = rng.gen_range(margin..h - margin) as f64;
    let mut x = rng.gen_range(margin..w - margin) as f64;
    let mut angle: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let target_len = rng.gen_range(20..=30usize);
    let mut pixels = Vec::new();
    let mut steps = 0usize;
    while pixels.len() < MIN_REGION_PIXELS + 4 || steps < target_len {
        angle += rng.gen_range(-0.25..0.25);
        y = (y + angle.sin()).clamp(margin as f64, (h - margin - 1) as f64);
        x = (x + angle.cos()).clamp(margin as f64, (w - margin - 1) as f64);
        let p = y.round() as usize * w + x.round() as usize;
        if pixels.last() != Some(&p) {
            pixels.push(p);
        }
        steps += 1;
        if steps > 200 {
            break;
        }
    }
    pixels.sort_unstable();
    pixels.dedup();
    pixels
}

fn draw_defects(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<Defect> {
    let n = rng.gen_range(1..=3usize);
    (0..n)
        .map(|_| {
            let kind = cfg.defect_kinds[rng.gen_range(0..cfg.defect_kinds.len())];
            let pixels = match kind {
                DefectKind::Blob => ellipse_pixels(cfg, rng),
                DefectKind::Scratch => scratch_pixels(cfg, rng),
            };
            Defect {
                pixels,
                magnitude: rng.gen_range(0.4..0.9) as f32,
            }
        })
        .collect()
}

/// Shifts defect pixels away from their current sign so the result stays in
/// [-1, 1] while differing from the clean rendering by the full magnitude.
fn apply_defects(cfg: &SyntheticConfig, data: &mut [f32], defects: &[Defect]) -> BinaryMask {
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut mask = vec![false; h * w];
    for defect in defects {
        for &p in &defect.pixels {
            // overlapping defects shift a pixel once, or the shifts could
            // cancel back toward the clean value
            if mask[p] {
                continue;
            }
            mask[p] = true;
            for ch in 0..c {
                let idx = p * c + ch;
                let dir = if data[idx] >= 0.0 { -1.0 } else { 1.0 };
                data[idx] += dir * defect.magnitude;
            }
        }
    }
    BinaryMask::new(h, w, mask).unwrap()
}

fn sample_normal(cfg: &SyntheticConfig, purpose: u64, index: u64, seed: u64) -> Sample {
    let mut rng = stream(seed, purpose, index);
    let data = render_base(cfg, &mut rng);
    Sample {
        image: Tensor::new(vec![cfg.height, cfg.width, cfg.channels], data).unwrap(),
        label: Label::Normal,
        mask: None,
    }
}

/// Renders anomalous test image `index`; with `with_defects` false the
/// clean counterpart comes back (same base pattern and noise).
pub fn render_anomalous(
    cfg: &SyntheticConfig,
    seed: u64,
    index: u64,
    with_defects: bool,
) -> (Tensor<f32>, Option<BinaryMask>) {
    let mut base_rng = stream(seed, PURPOSE_TEST_ANOMALOUS, index);
    let mut data = render_base(cfg, &mut base_rng);
    if !with_defects {
        return (
            Tensor::new(vec![cfg.height, cfg.width, cfg.channels], data).unwrap(),
            None,
        );
    }
    let mut defect_rng = stream(seed, PURPOSE_DEFECT, index);
    let defects = draw_defects(cfg, &mut defect_rng);
    let mask = apply_defects(cfg, &mut data, &defects);
    (
        Tensor::new(vec![cfg.height, cfg.width, cfg.channels], data).unwrap(),
        Some(mask),
    )
}

pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    if cfg.height == 0 || cfg.width == 0 || cfg.channels == 0 {
        return Err(Error::Config("synthetic image size must be positive".into()));
    }
    if cfg.defect_kinds.is_empty() {
        return Err(Error::Config("need at least one defect kind".into()));
    }
    if cfg.height < 24 || cfg.width < 24 {
        return Err(Error::Config(
            "synthetic images must be at least 24x24 to fit defects".into(),
        ));
    }
    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        train.push(sample_normal(cfg, PURPOSE_TRAIN, i as u64, seed));
    }
    let mut test = Vec::with_capacity(cfg.n_test_normal + cfg.n_test_anomalous);
    for i in 0..cfg.n_test_normal {
        test.push(sample_normal(cfg, PURPOSE_TEST_NORMAL, i as u64, seed));
    }
    for i in 0..cfg.n_test_anomalous {
        let (image, mask) = render_anomalous(cfg, seed, i as u64, true);
        test.push(Sample {
            image,
            label: Label::Anomalous,
            mask,
        });
    }
    Ok(Dataset { train, test })
}

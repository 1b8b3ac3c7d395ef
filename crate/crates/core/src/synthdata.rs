//! Deterministic multi-domain synthetic segmentation data.
//!
//! Every domain draws label geometry from the same distribution: an outer
//! "disc" ellipse with a nested inner "cup" ellipse. Domains differ only in
//! appearance (intensity bias, contrast, sinusoidal texture, noise and a
//! global intensity ramp), so any domain gap is a style gap.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{domain_letter, DomainData, Label, Sample};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::spectral::Image;

/// Region intensities before styling: background, disc, cup.
const BASE_LEVELS: [f64; 3] = [0.0, 0.5, 1.0];
/// Allowed area of each class mask as a fraction of the frame.
pub const AREA_RANGE: (f64, f64) = (0.02, 0.40);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub intensity_bias: f64,
    pub contrast_gain: f64,
    /// Texture frequency in cycles per image side.
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub noise_sigma: f64,
    /// Intensity change across the full frame along x and y.
    pub background_gradient: (f64, f64),
}

impl DomainStyle {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.intensity_bias,
            self.contrast_gain,
            self.texture_freq,
            self.texture_amp,
            self.noise_sigma,
            self.background_gradient.0,
            self.background_gradient.1,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("domain style"));
        }
        if self.contrast_gain <= 0.0 {
            return Err(Error::OutOfRange {
                name: "contrast_gain",
                value: self.contrast_gain,
                range: "(0, inf)",
            });
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::OutOfRange {
                name: "noise_sigma",
                value: self.noise_sigma,
                range: "[0, inf)",
            });
        }
        Ok(())
    }
}

/// Preset styles, one per domain letter. The first four span distinct
/// corners of (bias, contrast, texture, noise); the rest fill in between.
pub const PRESETS: [DomainStyle; 8] = [
    DomainStyle {
        intensity_bias: 0.0,
        contrast_gain: 1.0,
        texture_freq: 2.0,
        texture_amp: 0.1,
        noise_sigma: 0.05,
        background_gradient: (0.0, 0.0),
    },
    DomainStyle {
        intensity_bias: 0.6,
        contrast_gain: 0.7,
        texture_freq: 12.0,
        texture_amp: 0.15,
        noise_sigma: 0.1,
        background_gradient: (0.8, 0.0),
    },
    DomainStyle {
        intensity_bias: -0.5,
        contrast_gain: 1.3,
        texture_freq: 6.0,
        texture_amp: 0.1,
        noise_sigma: 0.08,
        background_gradient: (0.0, -0.8),
    },
    DomainStyle {
        intensity_bias: 0.3,
        contrast_gain: 0.5,
        texture_freq: 4.0,
        texture_amp: 0.2,
        noise_sigma: 0.15,
        background_gradient: (-0.5, 0.5),
    },
    DomainStyle {
        intensity_bias: -0.2,
        contrast_gain: 0.8,
        texture_freq: 8.0,
        texture_amp: 0.12,
        noise_sigma: 0.06,
        background_gradient: (0.4, 0.4),
    },
    DomainStyle {
        intensity_bias: 0.45,
        contrast_gain: 1.1,
        texture_freq: 3.0,
        texture_amp: 0.08,
        noise_sigma: 0.12,
        background_gradient: (-0.6, -0.2),
    },
    DomainStyle {
        intensity_bias: -0.35,
        contrast_gain: 0.6,
        texture_freq: 10.0,
        texture_amp: 0.18,
        noise_sigma: 0.04,
        background_gradient: (0.2, -0.6),
    },
    DomainStyle {
        intensity_bias: 0.15,
        contrast_gain: 1.4,
        texture_freq: 5.0,
        texture_amp: 0.05,
        noise_sigma: 0.1,
        background_gradient: (0.7, 0.3),
    },
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub domains: usize,
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            size: 64,
            n_train: 60,
            n_test: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn raster(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| self.contains(y as f64, x as f64))
    }
}

fn area_ok(m: &BinaryMask) -> bool {
    let frac = m.count() as f64 / (m.height() * m.width()) as f64;
    (AREA_RANGE.0..=AREA_RANGE.1).contains(&frac)
}

/// Nested disc/cup geometry. Draws are repeated until both masks satisfy
/// the area bounds; the cup is clipped to the disc so nesting always holds.
fn draw_geometry(rng: &mut impl Rng, h: usize, w: usize) -> (BinaryMask, BinaryMask) {
    let (hf, wf) = (h as f64, w as f64);
    loop {
        let outer = Ellipse {
            cy: hf * rng.random_range(0.4..0.6),
            cx: wf * rng.random_range(0.4..0.6),
            ry: hf * rng.random_range(0.17..0.3),
            rx: wf * rng.random_range(0.17..0.3),
            angle: rng.random_range(0.0..PI),
        };
        let ratio = rng.random_range(0.45..0.7);
        let shift = (1.0 - ratio) * 0.4;
        let inner = Ellipse {
            cy: outer.cy + outer.ry * rng.random_range(-shift..shift),
            cx: outer.cx + outer.rx * rng.random_range(-shift..shift),
            ry: outer.ry * ratio,
            rx: outer.rx * ratio * rng.random_range(0.85..1.15),
            angle: outer.angle + rng.random_range(-0.3..0.3),
        };
        let disc = outer.raster(h, w);
        let cup = inner.raster(h, w).and(&disc).expect("same frame");
        if area_ok(&disc) && area_ok(&cup) {
            return (disc, cup);
        }
    }
}

fn render(style: &DomainStyle, disc: &BinaryMask, cup: &BinaryMask, rng: &mut impl Rng) -> Result<Image> {
    let (h, w) = (disc.height(), disc.width());
    let orientation = rng.random_range(0.0..PI);
    let offset = rng.random_range(0.0..2.0 * PI);
    let (so, co) = orientation.sin_cos();
    let noise = Normal::new(0.0, style.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (gx, gy) = style.background_gradient;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let level = BASE_LEVELS[disc.get(y, x) as usize + cup.get(y, x) as usize];
            let texture = style.texture_amp * (2.0 * PI * style.texture_freq * (u * co + v * so) + offset).sin();
            let ramp = gx * (u - 0.5) + gy * (v - 0.5);
            let n = if style.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push(style.intensity_bias + style.contrast_gain * (level + texture) + ramp + n);
        }
    }
    Image::new(h, w, 1, data)
}

/// `n_samples` square grayscale samples of side `size`, deterministic per
/// `(domain_id, seed)`. Geometry and appearance draw from separate streams
/// of the same seed, one pair of streams per domain.
pub fn make_domain(domain_id: u32, style: &DomainStyle, n_samples: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    style.validate()?;
    if n_samples == 0 {
        return Err(Error::EmptyDataset(domain_id));
    }
    if size < 8 {
        return Err(Error::OutOfRange {
            name: "size",
            value: size as f64,
            range: "[8, inf)",
        });
    }
    let mut geometry = ChaCha8Rng::seed_from_u64(seed);
    geometry.set_stream(u64::from(domain_id));
    let mut appearance = ChaCha8Rng::seed_from_u64(seed);
    appearance.set_stream(1 << 32 | u64::from(domain_id));
    (0..n_samples)
        .map(|i| {
            let (disc, cup) = draw_geometry(&mut geometry, size, size);
            let image = render(style, &disc, &cup, &mut appearance)?;
            Ok(Sample {
                image,
                label: Arc::new(Label::new(vec![disc, cup])?),
                domain_id,
                sample_id: i as u32,
            })
        })
        .collect()
}

/// Preset style for a domain index.
pub fn preset(domain_id: u32) -> Result<DomainStyle> {
    PRESETS.get(domain_id as usize).copied().ok_or(Error::OutOfRange {
        name: "domain_id",
        value: domain_id as f64,
        range: "[0, 8)",
    })
}

/// `cfg.domains` preset domains, each split into `n_train` then `n_test`
/// samples by ascending sample id.
pub fn default_domain_suite(cfg: &SuiteConfig) -> Result<Vec<DomainData>> {
    if !(1..=PRESETS.len()).contains(&cfg.domains) {
        return Err(Error::Config(format!("suite supports 1 to {} domains, got {}", PRESETS.len(), cfg.domains)));
    }
    (0..cfg.domains as u32)
        .map(|id| {
            let mut samples = make_domain(id, &preset(id)?, cfg.n_train + cfg.n_test, cfg.size, cfg.seed)?;
            let test = samples.split_off(cfg.n_train);
            Ok(DomainData {
                domain_id: id,
                name: domain_letter(id),
                train: samples,
                test,
            })
        })
        .collect()
}

//! Synthetic multi-domain segmentation data.
//!
//! Every sample is a smooth background texture with one or more star-convex
//! "tumour" blobs. Geometry and texture phases depend only on `(seed, index)`;
//! the [`DomainStyle`] changes appearance alone, so two domains generated from
//! the same seed share masks exactly.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, Mask, Sample};
use crate::error::{Error, Result};
use crate::rng;

/// Appearance of one acquisition site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub gain: f64,
    pub bias: f64,
    /// Contrast exponent applied to the base intensity.
    pub gamma: f64,
    pub noise_sigma: f64,
    /// Box filter radius in pixels; 0 disables blurring.
    pub blur_radius: usize,
    /// Dominant background texture frequency, in cycles per image side.
    pub texture_freq: f64,
}

impl DomainStyle {
    pub fn identity() -> Self {
        DomainStyle {
            gain: 1.0,
            bias: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
            texture_freq: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gain, self.bias, self.gamma, self.noise_sigma, self.texture_freq]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("domain style fields must be finite"));
        }
        if !(0.3..=3.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma {} outside [0.3, 3]", self.gamma)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if self.texture_freq <= 0.0 {
            return Err(Error::invalid("texture_freq must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Dataset name; also used as the domain tag and id prefix.
    pub name: String,
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub style: DomainStyle,
    pub seed: u64,
    /// Inclusive range of blobs per sample.
    pub blob_count_range: (usize, usize),
    /// Base radius range in pixels.
    pub blob_radius_range: (f64, f64),
}

impl SynthConfig {
    pub fn new(name: impl Into<String>, n_samples: usize, side: usize, style: DomainStyle, seed: u64) -> Self {
        let scale = side as f64 / 64.0;
        SynthConfig {
            name: name.into(),
            n_samples,
            height: side,
            width: side,
            style,
            seed,
            blob_count_range: (1, 2),
            blob_radius_range: (7.0 * scale, 12.0 * scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.style.validate()?;
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be at least 1"));
        }
        let (cmin, cmax) = self.blob_count_range;
        if cmin == 0 || cmin > cmax {
            return Err(Error::invalid("blob_count_range must satisfy 1 <= min <= max"));
        }
        let (rmin, rmax) = self.blob_radius_range;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::invalid("blob_radius_range must satisfy 0 < min <= max"));
        }
        if rmax >= self.height.min(self.width) as f64 / 2.0 {
            return Err(Error::invalid("blob radius must stay below half the image side"));
        }
        Ok(())
    }
}

/// Star-convex region: r(φ) = r0·(1 + Σ a_k cos(kφ + φ_k)).
#[derive(Debug, Clone)]
struct Blob {
    cy: f64,
    cx: f64,
    r0: f64,
    harmonics: [(f64, f64); 4],
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, h: usize, w: usize, (rmin, rmax): (f64, f64)) -> Self {
        let r0 = if rmax > rmin { rng.gen_range(rmin..rmax) } else { rmin };
        let cy = rng.gen_range(r0..(h as f64 - r0));
        let cx = rng.gen_range(r0..(w as f64 - r0));
        let mut harmonics = [(0.0, 0.0); 4];
        for (k, hk) in harmonics.iter_mut().enumerate() {
            // amplitudes shrink with order; |a_k| <= 0.3 keeps r(φ) > 0
            let amp = rng.gen_range(-0.3..0.3) / (k + 1) as f64;
            *hk = (amp, rng.gen_range(0.0..TAU));
        }
        Blob { cy, cx, r0, harmonics }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let phi = dy.atan2(dx);
        let scale: f64 = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(k, (a, p))| a * ((k + 1) as f64 * phi + p).cos())
                .sum::<f64>();
        (dy * dy + dx * dx).sqrt() < self.r0 * scale
    }
}

const TEXTURE_COMPONENTS: usize = 3;
const BACKGROUND_LEVEL: f64 = 0.15;
const TEXTURE_AMPLITUDE: f64 = 0.4;
const BLOB_CONTRAST: f64 = 0.3;

/// Background texture in [0, 1]; phases from `rng`, frequency from the style.
fn texture<R: Rng>(rng: &mut R, h: usize, w: usize, freq: f64) -> Vec<f64> {
    let comps: Vec<(f64, f64, f64, f64)> = (0..TEXTURE_COMPONENTS)
        .map(|_| {
            let dir: f64 = rng.gen_range(0.0..TAU);
            let phase = rng.gen_range(0.0..TAU);
            let weight = rng.gen_range(0.5..1.0);
            let fscale = rng.gen_range(0.7..1.3);
            (dir, phase, weight, fscale)
        })
        .collect();
    let total: f64 = comps.iter().map(|c| c.2).sum();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let v: f64 = comps
                .iter()
                .map(|&(dir, phase, weight, fscale)| {
                    let u = dir.cos() * c as f64 / w as f64 + dir.sin() * r as f64 / h as f64;
                    weight * (TAU * freq * fscale * u + phase).sin()
                })
                .sum();
            out.push(0.5 * (v / total + 1.0));
        }
    }
    out
}

fn box_blur(px: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return px.to_vec();
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let r0 = r.saturating_sub(radius);
        let r1 = (r + radius).min(h - 1);
        for c in 0..w {
            let c0 = c.saturating_sub(radius);
            let c1 = (c + radius).min(w - 1);
            let mut acc = 0.0;
            for rr in r0..=r1 {
                acc += px[rr * w + c0..=rr * w + c1].iter().sum::<f64>();
            }
            out[r * w + c] = acc / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let idx = index as u64;
    let mut geo = rng::stream(cfg.seed, &[rng::label("geometry"), idx]);
    let mut tex = rng::stream(cfg.seed, &[rng::label("texture"), idx]);
    let mut noise = rng::stream(cfg.seed, &[rng::label("noise"), idx]);

    let (cmin, cmax) = cfg.blob_count_range;
    let count = geo.gen_range(cmin..=cmax);
    let blobs: Vec<Blob> = (0..count)
        .map(|_| Blob::random(&mut geo, h, w, cfg.blob_radius_range))
        .collect();
    let mask = Mask::from_fn(h, w, |r, c| {
        blobs.iter().any(|b| b.contains(r as f64, c as f64))
    })?;

    let style = &cfg.style;
    let background = texture(&mut tex, h, w, style.texture_freq);
    let styled: Vec<f64> = background
        .iter()
        .zip(mask.labels())
        .map(|(&t, &m)| {
            let base = BACKGROUND_LEVEL + TEXTURE_AMPLITUDE * t + BLOB_CONTRAST * m as f64;
            style.gain * base.powf(style.gamma) + style.bias
        })
        .collect();
    let mut pixels = box_blur(&styled, h, w, style.blur_radius);
    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).expect("validated sigma");
        for p in pixels.iter_mut() {
            *p += normal.sample(&mut noise);
        }
    }
    Sample::new(
        format!("{}-{index:04}", cfg.name),
        Image::new(h, w, pixels)?,
        Some(mask),
        cfg.name.clone(),
    )
}

/// Generate one domain. Samples are independent per index, so generation is
/// parallel without affecting the result.
pub fn generate_domain(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| generate_sample(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(cfg.name.clone(), samples)
}

pub const BENCHMARK_SIDE: usize = 64;

/// Style presets for the default benchmark: (name, size, style).
pub fn benchmark_presets() -> [(&'static str, usize, DomainStyle); 3] {
    [
        (
            "source",
            300,
            DomainStyle {
                gain: 1.0,
                bias: 0.0,
                gamma: 1.0,
                noise_sigma: 0.02,
                blur_radius: 0,
                texture_freq: 2.0,
            },
        ),
        (
            "targetA",
            200,
            DomainStyle {
                gain: 0.8,
                bias: 0.1,
                gamma: 1.8,
                noise_sigma: 0.06,
                blur_radius: 1,
                texture_freq: 3.0,
            },
        ),
        (
            "targetB",
            200,
            DomainStyle {
                gain: 1.1,
                bias: -0.05,
                gamma: 0.6,
                noise_sigma: 0.04,
                blur_radius: 0,
                texture_freq: 4.5,
            },
        ),
    ]
}

/// Source, targetA and targetB at 64×64 with shared geometry statistics.
pub fn default_benchmark(seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [s, a, b] = benchmark_presets().map(|(name, n, style)| {
        let cfg = SynthConfig::new(name, n, BENCHMARK_SIDE, style, rng::derive_seed(seed, &[rng::label(name)]));
        generate_domain(&cfg)
    });
    Ok((s?, a?, b?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(style: DomainStyle) -> SynthConfig {
        SynthConfig::new("t", 12, 64, style, 42)
    }

    #[test]
    fn deterministic() {
        let c = cfg(benchmark_presets()[1].2);
        assert_eq!(generate_domain(&c).unwrap(), generate_domain(&c).unwrap());
    }

    #[test]
    fn gain_scales_images_exactly_and_masks_are_style_invariant() {
        let one = generate_domain(&cfg(DomainStyle::identity())).unwrap();
        let two = generate_domain(&cfg(DomainStyle {
            gain: 2.0,
            ..DomainStyle::identity()
        }))
        .unwrap();
        for (a, b) in one.samples().iter().zip(two.samples()) {
            assert_eq!(a.truth, b.truth);
            for (x, y) in a.image.pixels().iter().zip(b.image.pixels()) {
                assert_eq!(2.0 * x, *y);
            }
        }
        let other = generate_domain(&cfg(benchmark_presets()[2].2)).unwrap();
        for (a, b) in one.samples().iter().zip(other.samples()) {
            assert_eq!(a.truth, b.truth);
        }
    }

    #[test]
    fn foreground_fraction_is_moderate() {
        let mut c = cfg(DomainStyle::identity());
        c.n_samples = 100;
        let ds = generate_domain(&c).unwrap();
        for s in ds.samples() {
            let f = s.truth.as_ref().unwrap().foreground_fraction();
            assert!(f > 0.0 && f < 0.5, "fraction {f}");
            assert!(s.image.pixels().iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(DomainStyle::identity());
        c.style.gamma = 5.0;
        assert!(generate_domain(&c).is_err());
        let mut c = cfg(DomainStyle::identity());
        c.blob_radius_range = (5.0, 40.0);
        assert!(generate_domain(&c).is_err());
        let mut c = cfg(DomainStyle::identity());
        c.n_samples = 0;
        assert!(generate_domain(&c).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let px = vec![0.25; 9 * 7];
        assert!(box_blur(&px, 9, 7, 2).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}

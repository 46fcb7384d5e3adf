//! Images, masks, datasets and the preprocessing shared by every stage.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: usize = 8;

/// Real-valued intensity grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image must be at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "pixel buffer has {} entries for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("image pixel {i}")));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Image::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

/// Binary label grid, row-major. Every element is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("mask must have positive shape"));
        }
        if labels.len() != height * width {
            return Err(Error::invalid(format!(
                "label buffer has {} entries for a {height}x{width} mask",
                labels.len()
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {v} is not binary")));
        }
        Ok(Mask {
            height,
            width,
            labels,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Mask::new(height, width, vec![0; height * width])
    }

    /// Build from a predicate over (row, col).
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut labels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                labels.push(f(r, c) as u8);
            }
        }
        Mask::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.labels[row * self.width + col] == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub truth: Option<Mask>,
    pub domain: String,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: Image,
        truth: Option<Mask>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        if let Some(m) = &truth {
            if m.shape() != image.shape() {
                return Err(Error::ShapeMismatch {
                    expected: image.shape(),
                    found: m.shape(),
                });
            }
        }
        Ok(Sample {
            id: id.into(),
            image,
            truth,
            domain: domain.into(),
        })
    }

    pub fn truth_or_err(&self) -> Result<&Mask> {
        self.truth
            .as_ref()
            .ok_or_else(|| Error::MissingTruth(self.id.clone()))
    }
}

/// Ordered, non-empty collection of equally shaped samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("dataset must not be empty"))?;
        let shape = first.image.shape();
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
            if s.image.shape() != shape {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    found: s.image.shape(),
                });
            }
        }
        Ok(Dataset {
            name: name.into(),
            samples,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples[0].image.shape()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn into_samples(self) -> Vec<Sample> {
        self.samples
    }

    /// Same samples with every ground-truth mask removed.
    pub fn without_truth(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    truth: None,
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Apply a per-sample transform, keeping name and order.
    pub fn map_samples(&self, f: impl Fn(&Sample) -> Result<Sample>) -> Result<Dataset> {
        let samples = self.samples.iter().map(f).collect::<Result<Vec<_>>>()?;
        Dataset::new(self.name.clone(), samples)
    }

    pub fn require_truth(&self) -> Result<()> {
        for s in &self.samples {
            s.truth_or_err()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// The 7:1:2 protocol.
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            train_fraction: 0.7,
            valid_fraction: 0.1,
            test_fraction: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::invalid("split fractions must be positive"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        Ok(())
    }

    /// (train, valid, test) sizes for `n` samples.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (n as f64 * self.train_fraction).floor() as usize;
        let valid = (n as f64 * self.valid_fraction).floor() as usize;
        (train, valid, n - train - valid)
    }
}

/// Seeded shuffle then contiguous train/valid/test partition.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let n = ds.len();
    if n < 10 {
        return Err(Error::invalid(format!("need at least 10 samples to split, got {n}")));
    }
    let (n_train, n_valid, n_test) = spec.sizes(n);
    if n_train == 0 || n_valid == 0 || n_test == 0 {
        return Err(Error::invalid(format!(
            "split of {n} samples leaves an empty part ({n_train}/{n_valid}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(spec.seed, &[rng::label("split")]));

    let part = |range: &[usize], suffix: &str| {
        Dataset::new(
            format!("{}-{suffix}", ds.name),
            range.iter().map(|&i| ds.samples[i].clone()).collect(),
        )
    };
    Ok((
        part(&order[..n_train], "train")?,
        part(&order[n_train..n_train + n_valid], "valid")?,
        part(&order[n_train + n_valid..], "test")?,
    ))
}

/// Zero-mean, unit (population) variance. Constant images map to all zeros.
pub fn normalize_image(img: &Image) -> Image {
    let n = img.pixels.len() as f64;
    let mean = img.pixels.iter().sum::<f64>() / n;
    let var = img.pixels.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let constant = img.pixels.iter().all(|&p| p == img.pixels[0]);
    let pixels = if constant || std <= 1e-12 * mean.abs().max(1.0) {
        vec![0.0; img.pixels.len()]
    } else {
        img.pixels.iter().map(|p| (p - mean) / std).collect()
    };
    Image {
        pixels,
        ..img.clone()
    }
}

/// Grids that can be resampled by nearest neighbour.
pub trait Resample: Sized {
    fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self>;
}

fn nearest_indices(input: usize, output: usize) -> Vec<usize> {
    (0..output).map(|o| o * input / output).collect()
}

fn resample<T: Copy>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let rows = nearest_indices(h, out_h);
    let cols = nearest_indices(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        out.extend(cols.iter().map(|&c| src[r * w + c]));
    }
    Ok(out)
}

impl Resample for Image {
    fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let px = resample(&self.pixels, self.height, self.width, out_h, out_w)?;
        Image::new(out_h, out_w, px)
    }
}

impl Resample for Mask {
    fn resize_nearest(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let labels = resample(&self.labels, self.height, self.width, out_h, out_w)?;
        Mask::new(out_h, out_w, labels)
    }
}

/// Resize to `resolution`² and normalize every image. Applied to every dataset
/// before it reaches the network.
pub fn prepare_dataset(ds: &Dataset, resolution: usize) -> Result<Dataset> {
    ds.map_samples(|s| {
        let image = normalize_image(&s.image.resize_nearest(resolution, resolution)?);
        let truth = s
            .truth
            .as_ref()
            .map(|m| m.resize_nearest(resolution, resolution))
            .transpose()?;
        Sample::new(s.id.clone(), image, truth, s.domain.clone())
    })
}

pub const ROTATION_RANGE_DEG: f64 = 15.0;
pub const AUGMENT_NOISE_SIGMA: f64 = 0.05;

/// One concrete set of augmentation choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub angle_deg: f64,
    pub noise_sigma: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            flip: false,
            angle_deg: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            flip: rng.gen_bool(0.5),
            angle_deg: rng.gen_range(-ROTATION_RANGE_DEG..=ROTATION_RANGE_DEG),
            noise_sigma: AUGMENT_NOISE_SIGMA,
        }
    }
}

/// Random flip, small rotation and additive image noise.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Result<Sample> {
    let draw = AugmentDraw::sample(rng);
    augment_with(sample, draw, rng)
}

/// Apply a fixed draw. `rng` only feeds the pixel noise.
pub fn augment_with<R: Rng + ?Sized>(sample: &Sample, draw: AugmentDraw, rng: &mut R) -> Result<Sample> {
    let truth = sample.truth_or_err()?;
    let (h, w) = sample.image.shape();
    let mut px = sample.image.pixels.clone();
    let mut labels = truth.labels.clone();

    if draw.flip {
        for r in 0..h {
            px[r * w..(r + 1) * w].reverse();
            labels[r * w..(r + 1) * w].reverse();
        }
    }
    if draw.angle_deg != 0.0 {
        let (p, l) = rotate(&px, &labels, h, w, draw.angle_deg.to_radians());
        px = p;
        labels = l;
    }
    if draw.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, draw.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise sigma: {e}")))?;
        for p in px.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    Sample::new(
        sample.id.clone(),
        Image::new(h, w, px)?,
        Some(Mask::new(h, w, labels)?),
        sample.domain.clone(),
    )
}

/// Rotate about the grid centre: bilinear for the image (fill = image minimum),
/// nearest for the mask (fill = 0).
fn rotate(px: &[f64], labels: &[u8], h: usize, w: usize, theta: f64) -> (Vec<f64>, Vec<u8>) {
    let fill = px.iter().copied().fold(f64::INFINITY, f64::min);
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out_px = vec![fill; h * w];
    let mut out_lab = vec![0u8; h * w];
    let inside = |y: f64, x: f64| y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64;
    for r in 0..h {
        for c in 0..w {
            // inverse map output -> source
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            let idx = r * w + c;
            if inside(sy, sx) {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                let top = px[y0 * w + x0] * (1.0 - fx) + px[y0 * w + x1] * fx;
                let bottom = px[y1 * w + x0] * (1.0 - fx) + px[y1 * w + x1] * fx;
                out_px[idx] = top * (1.0 - fy) + bottom * fy;
            }
            let ny = sy.round();
            let nx = sx.round();
            if inside(ny, nx) {
                out_lab[idx] = labels[ny as usize * w + nx as usize];
            }
        }
    }
    (out_px, out_lab)
}

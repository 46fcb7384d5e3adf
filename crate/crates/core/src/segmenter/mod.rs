//! Small encoder–decoder segmenter with exact reverse-mode gradients.
//!
//! Graph (per image, H and W divisible by 4):
//!
//! ```text
//! x ─ enc1 3×3 ─ ReLU ─ maxpool2 ─ enc2 3×3 ─ ReLU ─ maxpool2
//!   ─ up2 ─ dec1 3×3 ─ ReLU ─ up2 ─ dec2 3×3 ─ ReLU (penultimate) ─ head 1×1 ─ softmax
//! ```

pub mod checkpoint;
pub mod layers;
pub mod loss;
mod model;
pub mod train;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use layers::Tensor3;
pub use loss::{composite_loss, loss_and_logit_grad, DICE_EPS};
pub use model::{
    forward, forward_with_pattern, gradient, predict_dataset, predict_mask, predict_masks,
    sample_loss_and_gradient, ActivationPattern, Prediction,
};
pub use train::{lr_at, train, train_with_validation, TrainConfig, TrainOutput, Validation};

/// Number of output classes (background, foreground).
pub const CLASSES: usize = 2;

/// Output channels of the four 3×3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub enc1: usize,
    pub enc2: usize,
    pub dec1: usize,
    /// Also the penultimate feature width C.
    pub dec2: usize,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec {
            enc1: 8,
            enc2: 16,
            dec1: 8,
            dec2: 8,
        }
    }
}

/// Shape of one convolution in the fixed graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub const LAYER_NAMES: [&str; 5] = ["enc1", "enc2", "dec1", "dec2", "head"];

impl ChannelSpec {
    pub fn layers(&self) -> [ConvShape; 5] {
        let c = |in_c, out_c, k| ConvShape { in_c, out_c, k };
        [
            c(1, self.enc1, 3),
            c(self.enc1, self.enc2, 3),
            c(self.enc2, self.dec1, 3),
            c(self.dec1, self.dec2, 3),
            c(self.dec2, CLASSES, 1),
        ]
    }

    /// Start offset of each layer's block (weights then biases) in the flat layout.
    pub fn offsets(&self) -> [usize; 5] {
        let mut off = [0; 5];
        let mut acc = 0;
        for (o, l) in off.iter_mut().zip(self.layers()) {
            *o = acc;
            acc += l.len();
        }
        off
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if [self.enc1, self.enc2, self.dec1, self.dec2].contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }
}

/// All weights and biases, stored flat in the order enc1, enc2, dec1, dec2,
/// head; each layer as weights `[out][in][ky][kx]` followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterParams {
    spec: ChannelSpec,
    values: Vec<f64>,
}

impl SegmenterParams {
    pub fn from_flat(spec: ChannelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters for {spec:?}, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segmenter parameter".into()));
        }
        Ok(SegmenterParams { spec, values })
    }

    pub fn zeros(spec: ChannelSpec) -> Self {
        SegmenterParams {
            spec,
            values: vec![0.0; spec.param_count()],
        }
    }

    pub fn spec(&self) -> ChannelSpec {
        self.spec
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// (weights, biases) of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let shape = self.spec.layers()[i];
        let start = self.spec.offsets()[i];
        let block = &self.values[start..start + shape.len()];
        block.split_at(shape.weight_len())
    }

    /// θ ← θ − lr·g
    pub fn apply_step(&mut self, grad: &[f64], lr: f64) {
        for (p, g) in self.values.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

/// He-normal weights (variance 2/fan_in), zero biases. Each layer draws from
/// its own seeded stream.
pub fn init_params(seed: u64) -> SegmenterParams {
    init_params_with(ChannelSpec::default(), seed)
}

pub fn init_params_with(spec: ChannelSpec, seed: u64) -> SegmenterParams {
    let mut values = Vec::with_capacity(spec.param_count());
    for (li, shape) in spec.layers().iter().enumerate() {
        let fan_in = (shape.in_c * shape.k * shape.k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut r = rng::stream(seed, &[rng::label("init"), li as u64]);
        values.extend((0..shape.weight_len()).map(|_| normal.sample(&mut r)));
        values.extend(std::iter::repeat(0.0).take(shape.out_c));
    }
    SegmenterParams { spec, values }
}

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, Image, Mask};
use crate::error::{Error, Result};
use crate::metrics;
use crate::rng;

use super::model::{batch_loss_and_gradient, predict_masks};
use super::SegmenterParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Exponent of the polynomial decay `(1 - t/T)^p`.
    pub decay_power: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            lr0: 0.03,
            decay_power: 0.9,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::invalid("lr0 must be positive"));
        }
        if !(self.decay_power.is_finite() && self.decay_power >= 0.0) {
            return Err(Error::invalid("decay_power must be non-negative"));
        }
        Ok(())
    }
}

/// Learning rate for iteration `iter` (0-based).
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.iterations {
        return Err(Error::invalid(format!(
            "iteration {iter} outside schedule of {}",
            cfg.iterations
        )));
    }
    let progress = iter as f64 / cfg.iterations as f64;
    Ok(cfg.lr0 * (1.0 - progress).powf(cfg.decay_power))
}

/// Periodic validation used to keep the best checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub dataset: &'a Dataset,
    /// Evaluate after every `every` iterations (and after the last one).
    pub every: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Parameters after the final iteration.
    pub params: SegmenterParams,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    /// (iteration count, mean validation DSC) per evaluation.
    pub validation: Vec<(usize, f64)>,
    /// Highest-DSC checkpoint with its score; earliest wins ties.
    pub best: Option<(SegmenterParams, f64)>,
}

impl TrainOutput {
    /// Best validated parameters, or the final ones when no validation ran.
    pub fn selected(&self) -> &SegmenterParams {
        self.best.as_ref().map(|(p, _)| p).unwrap_or(&self.params)
    }
}

/// Plain SGD on seeded random batches.
pub fn train(params: &SegmenterParams, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_validation(params, ds, cfg, None)
}

pub fn train_with_validation(
    params: &SegmenterParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    validation: Option<Validation<'_>>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    ds.require_truth()?;
    if cfg.batch_size > ds.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            ds.len()
        )));
    }
    if let Some(v) = &validation {
        if v.every == 0 {
            return Err(Error::invalid("validation interval must be positive"));
        }
        v.dataset.require_truth()?;
    }

    let mut rng = rng::stream(cfg.seed, &[rng::label("train")]);
    let mut current = params.clone();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut val_trace = Vec::new();
    let mut best: Option<(SegmenterParams, f64)> = None;

    for t in 0..cfg.iterations {
        let picks = index::sample(&mut rng, ds.len(), cfg.batch_size);
        let batch = picks
            .iter()
            .map(|i| {
                let s = &ds.samples()[i];
                if cfg.augment {
                    let a = augment(s, &mut rng)?;
                    Ok((a.image, a.truth.expect("augment keeps truth")))
                } else {
                    Ok((s.image.clone(), s.truth_or_err()?.clone()))
                }
            })
            .collect::<Result<Vec<(Image, Mask)>>>()?;

        let (loss, grad) = batch_loss_and_gradient(&current, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("training loss at iteration {t}")));
        }
        current.apply_step(&grad, lr_at(t, cfg)?);
        losses.push(loss);

        if let Some(v) = &validation {
            let done = t + 1;
            if done % v.every == 0 || done == cfg.iterations {
                let dsc = mean_dsc(&current, v.dataset)?;
                log::debug!("iter {done}: val DSC {dsc:.4}");
                val_trace.push((done, dsc));
                if best.as_ref().map_or(true, |(_, b)| dsc > *b) {
                    best = Some((current.clone(), dsc));
                }
            }
        }
    }
    Ok(TrainOutput {
        params: current,
        losses,
        validation: val_trace,
        best,
    })
}

/// Mean DSC (fraction) of predictions against ground truth.
pub fn mean_dsc(params: &SegmenterParams, ds: &Dataset) -> Result<f64> {
    let preds = predict_masks(params, ds)?;
    let mut total = 0.0;
    for (p, s) in preds.iter().zip(ds.samples()) {
        total += metrics::dsc(p, s.truth_or_err()?)?;
    }
    Ok(total / ds.len() as f64)
}

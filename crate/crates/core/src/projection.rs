//! Mask-weighted latent projection of penultimate features.
//!
//! For one prediction: weight every feature channel by the predicted mask,
//! average over channels, max-pool with a `pool_k` window (stride `pool_k`),
//! flatten row-major and divide by the number of predicted foreground pixels.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::segmenter::{forward, Prediction, SegmenterParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub sample_id: String,
    pub values: Vec<f64>,
    /// False when the predicted foreground was empty; `values` are then zero.
    pub valid: bool,
}

pub fn latent_len(h: usize, w: usize, pool_k: usize) -> usize {
    (h / pool_k) * (w / pool_k)
}

pub fn project(pred: &Prediction, pool_k: usize, sample_id: &str) -> Result<LatentVector> {
    let feats = &pred.penultimate;
    let (h, w) = pred.mask.shape();
    if (feats.height, feats.width) != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: (h, w),
            found: (feats.height, feats.width),
        });
    }
    if pool_k == 0 || h % pool_k != 0 || w % pool_k != 0 {
        return Err(Error::invalid(format!(
            "pool_k {pool_k} must divide the {h}x{w} feature grid"
        )));
    }
    let (ph, pw) = (h / pool_k, w / pool_k);
    let n_fg = pred.mask.foreground_count();
    if n_fg == 0 {
        return Ok(LatentVector {
            sample_id: sample_id.to_string(),
            values: vec![0.0; ph * pw],
            valid: false,
        });
    }

    let labels = pred.mask.labels();
    let inv_c = 1.0 / feats.channels as f64;
    let mut avg = vec![0.0; h * w];
    for c in 0..feats.channels {
        for ((a, &f), &m) in avg.iter_mut().zip(feats.plane(c)).zip(labels) {
            if m == 1 {
                *a += f;
            }
        }
    }
    for a in avg.iter_mut() {
        *a *= inv_c;
    }

    let norm = n_fg as f64;
    let mut values = Vec::with_capacity(ph * pw);
    for by in 0..ph {
        for bx in 0..pw {
            let mut m = f64::NEG_INFINITY;
            for y in by * pool_k..(by + 1) * pool_k {
                for &v in &avg[y * w + bx * pool_k..y * w + (bx + 1) * pool_k] {
                    m = m.max(v);
                }
            }
            values.push(m / norm);
        }
    }
    Ok(LatentVector {
        sample_id: sample_id.to_string(),
        values,
        valid: true,
    })
}

/// One vector per sample, in dataset order. Parameters are only read.
pub fn project_dataset(params: &SegmenterParams, ds: &Dataset, pool_k: usize) -> Result<Vec<LatentVector>> {
    ds.samples()
        .par_iter()
        .map(|s| project(&forward(params, &s.image)?, pool_k, &s.id))
        .collect()
}

/// CSV: `sample_id,valid,v_0,…,v_{L-1}`.
pub fn write_latent_csv(vectors: &[LatentVector], path: &Path) -> Result<()> {
    let len = vectors.first().map_or(0, |v| v.values.len());
    let mut out = String::from("sample_id,valid");
    for i in 0..len {
        out.push_str(&format!(",v_{i}"));
    }
    out.push('\n');
    for v in vectors {
        out.push_str(&v.sample_id);
        out.push(',');
        out.push_str(if v.valid { "1" } else { "0" });
        for x in &v.values {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

//! Similarity to the source references and the active-selection strategies.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::LatentVector;
use crate::reference::{squared_distance, ReferenceSet};
use crate::rng;
use crate::segmenter::Prediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub sample_id: String,
    /// Smallest squared distance to any reference; `+inf` when invalid.
    pub distance: f64,
    pub valid: bool,
}

pub fn similarity_scores(vectors: &[LatentVector], refs: &ReferenceSet) -> Result<Vec<SimilarityScore>> {
    vectors
        .par_iter()
        .map(|v| {
            if !v.valid {
                return Ok(SimilarityScore {
                    sample_id: v.sample_id.clone(),
                    distance: f64::INFINITY,
                    valid: false,
                });
            }
            if v.values.len() != refs.dim() {
                return Err(Error::invalid(format!(
                    "latent `{}` has length {}, references have {}",
                    v.sample_id,
                    v.values.len(),
                    refs.dim()
                )));
            }
            let distance = refs
                .centroids
                .iter()
                .map(|c| squared_distance(&v.values, c))
                .fold(f64::INFINITY, f64::min);
            Ok(SimilarityScore {
                sample_id: v.sample_id.clone(),
                distance,
                valid: true,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Stdr,
    Alpha,
    Beta,
    Random,
    Entropy,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Stdr,
        Strategy::Alpha,
        Strategy::Beta,
        Strategy::Random,
        Strategy::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Stdr => "stdr",
            Strategy::Alpha => "alpha",
            Strategy::Beta => "beta",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
        }
    }

    /// Whether the strategy ranks by distance to the source references.
    pub fn uses_references(self) -> bool {
        matches!(self, Strategy::Stdr | Strategy::Alpha | Strategy::Beta)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown strategy `{s}` (expected stdr, alpha, beta, random or entropy)")))
    }
}

/// Ids chosen for annotation. `invariant_ids` are the source-like picks,
/// `specific_ids` the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub strategy: Strategy,
    pub budget_percent: f64,
    pub seed: u64,
    pub invariant_ids: Vec<String>,
    pub specific_ids: Vec<String>,
}

impl SelectionManifest {
    pub fn all_ids(&self) -> Vec<String> {
        self.invariant_ids.iter().chain(&self.specific_ids).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.invariant_ids.len() + self.specific_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SelectionManifest =
            serde_json::from_str(&text).map_err(|e| Error::format("selection manifest", e.to_string()))?;
        let mut seen = HashSet::new();
        if let Some(dup) = m.all_ids().into_iter().find(|id| !seen.insert(id.clone())) {
            return Err(Error::DuplicateId(dup));
        }
        Ok(m)
    }
}

fn check_percent(p: f64) -> Result<()> {
    if p.is_finite() && p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("budget percent {p} outside (0, 100]")))
    }
}

/// Samples labelled for `percent`% of `n`: round half up, at least `min`.
pub fn budget_count(n: usize, percent: f64, min: usize) -> Result<usize> {
    check_percent(percent)?;
    let m = ((percent * n as f64) / 100.0 + 0.5).floor() as usize;
    let m = m.max(min);
    if m > n {
        return Err(Error::invalid(format!("budget of {m} samples exceeds dataset of {n}")));
    }
    Ok(m)
}

/// Ascending by distance (invalid last), ties by id.
fn ascending(scores: &[SimilarityScore]) -> Vec<&SimilarityScore> {
    let key = |s: &SimilarityScore| if s.valid { s.distance } else { f64::INFINITY };
    let mut v: Vec<&SimilarityScore> = scores.iter().collect();
    v.sort_by(|a, b| key(a).total_cmp(&key(b)).then_with(|| a.sample_id.cmp(&b.sample_id)));
    v
}

/// Descending by distance (invalid first), ties by id.
fn descending(scores: &[SimilarityScore]) -> Vec<&SimilarityScore> {
    let key = |s: &SimilarityScore| if s.valid { s.distance } else { f64::INFINITY };
    let mut v: Vec<&SimilarityScore> = scores.iter().collect();
    v.sort_by(|a, b| key(b).total_cmp(&key(a)).then_with(|| a.sample_id.cmp(&b.sample_id)));
    v
}

fn check_scores(scores: &[SimilarityScore], min_valid: usize) -> Result<()> {
    let mut seen = HashSet::new();
    for s in scores {
        if !seen.insert(s.sample_id.as_str()) {
            return Err(Error::DuplicateId(s.sample_id.clone()));
        }
        if s.valid && !(s.distance.is_finite() && s.distance >= 0.0) {
            return Err(Error::NonFinite(format!("similarity of `{}`", s.sample_id)));
        }
    }
    let valid = scores.iter().filter(|s| s.valid).count();
    if valid < min_valid {
        return Err(Error::invalid(format!(
            "{valid} valid similarity scores, need at least {min_valid}"
        )));
    }
    Ok(())
}

/// Dual-reference selection: half the budget to the most source-like
/// samples, the rest (including any odd sample) to the least source-like.
pub fn select_stdr(scores: &[SimilarityScore], budget_percent: f64, seed: u64) -> Result<SelectionManifest> {
    check_scores(scores, 2)?;
    let m = budget_count(scores.len(), budget_percent, 2)?;
    let m_inv = m / 2;
    let invariant_ids: Vec<String> = ascending(scores)
        .into_iter()
        .filter(|s| s.valid)
        .take(m_inv)
        .map(|s| s.sample_id.clone())
        .collect();
    let taken: HashSet<&str> = invariant_ids.iter().map(String::as_str).collect();
    let specific_ids = descending(scores)
        .into_iter()
        .filter(|s| !taken.contains(s.sample_id.as_str()))
        .take(m - invariant_ids.len())
        .map(|s| s.sample_id.clone())
        .collect();
    Ok(SelectionManifest {
        strategy: Strategy::Stdr,
        budget_percent,
        seed,
        invariant_ids,
        specific_ids,
    })
}

/// Whole budget to the lowest distances.
pub fn select_alpha(scores: &[SimilarityScore], budget_percent: f64) -> Result<SelectionManifest> {
    check_scores(scores, 1)?;
    let m = budget_count(scores.len(), budget_percent, 1)?;
    Ok(SelectionManifest {
        strategy: Strategy::Alpha,
        budget_percent,
        seed: 0,
        invariant_ids: ascending(scores).into_iter().take(m).map(|s| s.sample_id.clone()).collect(),
        specific_ids: Vec::new(),
    })
}

/// Whole budget to the highest distances.
pub fn select_beta(scores: &[SimilarityScore], budget_percent: f64) -> Result<SelectionManifest> {
    check_scores(scores, 1)?;
    let m = budget_count(scores.len(), budget_percent, 1)?;
    Ok(SelectionManifest {
        strategy: Strategy::Beta,
        budget_percent,
        seed: 0,
        invariant_ids: Vec::new(),
        specific_ids: descending(scores).into_iter().take(m).map(|s| s.sample_id.clone()).collect(),
    })
}

/// Uniform sample without replacement, reported in input order.
pub fn select_random(ids: &[String], budget_percent: f64, seed: u64) -> Result<SelectionManifest> {
    if ids.is_empty() {
        return Err(Error::invalid("no ids to select from"));
    }
    let m = budget_count(ids.len(), budget_percent, 1)?;
    let mut rng = rng::stream(seed, &[rng::label("select-random")]);
    let mut picks = index::sample(&mut rng, ids.len(), m).into_vec();
    picks.sort_unstable();
    Ok(SelectionManifest {
        strategy: Strategy::Random,
        budget_percent,
        seed,
        invariant_ids: Vec::new(),
        specific_ids: picks.into_iter().map(|i| ids[i].clone()).collect(),
    })
}

/// Mean pixelwise Shannon entropy (natural log) of the class probabilities.
pub fn mean_entropy(pred: &Prediction) -> f64 {
    let probs = &pred.probs;
    let n = probs.plane_len();
    let total: f64 = probs
        .data
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum();
    total / n as f64
}

/// Highest mean entropy first, ties by id.
pub fn select_entropy(ids: &[String], preds: &[Prediction], budget_percent: f64) -> Result<SelectionManifest> {
    if ids.len() != preds.len() {
        return Err(Error::invalid(format!(
            "{} ids but {} predictions",
            ids.len(),
            preds.len()
        )));
    }
    let scores: Vec<f64> = preds.par_iter().map(mean_entropy).collect();
    select_by_entropy(ids, &scores, budget_percent)
}

/// Entropy selection from precomputed scores.
pub fn select_by_entropy(ids: &[String], entropies: &[f64], budget_percent: f64) -> Result<SelectionManifest> {
    if ids.is_empty() || ids.len() != entropies.len() {
        return Err(Error::invalid("entropy selection needs one score per id"));
    }
    if entropies.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("entropy score".into()));
    }
    let m = budget_count(ids.len(), budget_percent, 1)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| match entropies[b].total_cmp(&entropies[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    Ok(SelectionManifest {
        strategy: Strategy::Entropy,
        budget_percent,
        seed: 0,
        invariant_ids: Vec::new(),
        specific_ids: order.into_iter().take(m).map(|i| ids[i].clone()).collect(),
    })
}

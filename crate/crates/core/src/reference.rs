//! Source reference centroids: k-means over source latent vectors.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::LatentVector;
use crate::rng;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
    /// Sum of squared distances from each point to its nearest centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    /// Clustering objective after every Lloyd iteration.
    pub objective_trace: Vec<f64>,
}

impl ReferenceSet {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(v, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Index of the closest centroid; ties go to the lowest index.
pub fn assign(v: &LatentVector, refs: &ReferenceSet) -> Result<usize> {
    if !v.valid {
        return Err(Error::invalid(format!("latent vector `{}` is invalid", v.sample_id)));
    }
    if v.values.len() != refs.dim() {
        return Err(Error::invalid(format!(
            "latent length {} does not match reference length {}",
            v.values.len(),
            refs.dim()
        )));
    }
    Ok(nearest(&v.values, &refs.centroids).0)
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// Invalid vectors are dropped. The remaining points are put in a canonical
/// (value-sorted) order first, so the result does not depend on input order.
pub fn kmeans_fit(vectors: &[LatentVector], cfg: &KMeansConfig) -> Result<ReferenceSet> {
    if cfg.k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if cfg.max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    if !(cfg.tol >= 0.0) {
        return Err(Error::invalid("tol must be non-negative"));
    }
    let mut points: Vec<&LatentVector> = vectors.iter().filter(|v| v.valid).collect();
    if points.len() < cfg.k {
        return Err(Error::invalid(format!(
            "{} valid vectors for K = {}",
            points.len(),
            cfg.k
        )));
    }
    let dim = points[0].values.len();
    if let Some(bad) = points.iter().find(|v| v.values.len() != dim) {
        return Err(Error::invalid(format!(
            "latent vector `{}` has length {}, expected {dim}",
            bad.sample_id,
            bad.values.len()
        )));
    }
    if let Some(bad) = points.iter().find(|v| v.values.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("latent vector `{}`", bad.sample_id)));
    }
    points.sort_by(|a, b| lexicographic(&a.values, &b.values).then_with(|| a.sample_id.cmp(&b.sample_id)));
    let data: Vec<&[f64]> = points.iter().map(|v| v.values.as_slice()).collect();

    let mut centroids = seed_plus_plus(&data, cfg.k, cfg.seed);
    let mut trace = Vec::new();
    let mut iterations_run = 0;
    for _ in 0..cfg.max_iters {
        let assigned: Vec<(usize, f64)> = data.par_iter().map(|p| nearest(p, &centroids)).collect();
        let updated = update_centroids(&data, &assigned, &centroids);
        let objective: f64 = data
            .iter()
            .zip(&assigned)
            .map(|(p, &(k, _))| squared_distance(p, &updated[k]))
            .sum();
        let movement = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        trace.push(objective);
        iterations_run += 1;
        if movement < cfg.tol {
            break;
        }
    }
    let inertia = data.iter().map(|p| nearest(p, &centroids).1).sum();
    Ok(ReferenceSet {
        centroids,
        k: cfg.k,
        inertia,
        iterations_run,
        objective_trace: trace,
    })
}

fn seed_plus_plus(data: &[&[f64]], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[rng::label("kmeans++")]);
    let n = data.len();
    let mut centroids = vec![data[rng.gen_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = data.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    acc += d;
                    chosen = Some(i);
                    if acc > target {
                        break;
                    }
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            rng.gen_range(0..n)
        };
        let c = data[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(data) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Cluster means in fixed point order. An empty cluster takes the point
/// farthest from its currently assigned centroid.
fn update_centroids(data: &[&[f64]], assigned: &[(usize, f64)], old: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = old[0].len();
    let mut sums = vec![vec![0.0; dim]; old.len()];
    let mut counts = vec![0usize; old.len()];
    for (p, &(k, _)) in data.iter().zip(assigned) {
        counts[k] += 1;
        for (s, x) in sums[k].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    let mut taken = vec![false; data.len()];
    for (k, sum) in sums.iter_mut().enumerate() {
        if counts[k] > 0 {
            let n = counts[k] as f64;
            sum.iter_mut().for_each(|s| *s /= n);
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &(_, d)) in assigned.iter().enumerate() {
            if !taken[i] && far.map_or(true, |(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        match far {
            Some((i, _)) => {
                taken[i] = true;
                *sum = data[i].to_vec();
            }
            None => *sum = old[k].clone(),
        }
    }
    sums
}

/// Sidecar metadata stored next to the centroid CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeta {
    #[serde(rename = "K")]
    pub k: usize,
    pub pool_k: usize,
    pub inertia: f64,
    pub seed: u64,
    #[serde(default)]
    pub iterations_run: usize,
}

pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Writes K centroid rows to `csv_path` and the JSON sidecar beside it.
pub fn save_references(refs: &ReferenceSet, pool_k: usize, seed: u64, csv_path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(csv_path)
        .map_err(|e| csv_error(csv_path, e))?;
    for c in &refs.centroids {
        w.write_record(c.iter().map(|x| x.to_string()))
            .map_err(|e| csv_error(csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let meta = ReferenceMeta {
        k: refs.k,
        pool_k,
        inertia: refs.inertia,
        seed,
        iterations_run: refs.iterations_run,
    };
    let side = sidecar_path(csv_path);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_references(csv_path: &Path) -> Result<(ReferenceSet, ReferenceMeta)> {
    let side = sidecar_path(csv_path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: ReferenceMeta =
        serde_json::from_str(&text).map_err(|e| Error::format("reference sidecar", e.to_string()))?;
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(csv_path)
        .map_err(|e| csv_error(csv_path, e))?;
    let mut centroids = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(csv_path, e))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::format("reference csv", e.to_string()))?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::format("reference csv", "non-finite centroid coordinate"));
        }
        centroids.push(row);
    }
    if centroids.len() != meta.k || meta.k == 0 {
        return Err(Error::format(
            "reference csv",
            format!("{} rows but sidecar declares K = {}", centroids.len(), meta.k),
        ));
    }
    let dim = centroids[0].len();
    if centroids.iter().any(|c| c.len() != dim) {
        return Err(Error::format("reference csv", "ragged centroid rows"));
    }
    let refs = ReferenceSet {
        centroids,
        k: meta.k,
        inertia: meta.inertia,
        iterations_run: meta.iterations_run,
        objective_trace: Vec::new(),
    };
    Ok((refs, meta))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format("csv", format!("{}: {other:?}", path.display())),
    }
}

//! Overlap and surface-distance metrics for binary masks.
//!
//! Surface distances are computed through an exact squared Euclidean distance
//! transform of the other mask's surface, so each directed set costs
//! O(H·W) rather than O(|A|·|B|).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// A foreground pixel is on the surface if any 4-neighbour is background.
    #[default]
    Four,
    Eight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceOptions {
    pub connectivity: Connectivity,
    /// Physical size of one pixel; distances are multiplied by it.
    pub spacing: f64,
}

impl Default for SurfaceOptions {
    fn default() -> Self {
        SurfaceOptions {
            connectivity: Connectivity::Four,
            spacing: 1.0,
        }
    }
}

/// Surface pixels as (row, col).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfacePointSet {
    pub points: Vec<(usize, usize)>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_shapes(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            found: b.shape(),
        });
    }
    Ok(())
}

/// 2|A∩B| / (|A|+|B|); two empty masks score 1.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

pub fn extract_surface(m: &Mask) -> SurfacePointSet {
    extract_surface_with(m, Connectivity::Four)
}

/// Foreground pixels with at least one background neighbour; outside the grid
/// counts as background.
pub fn extract_surface_with(m: &Mask, conn: Connectivity) -> SurfacePointSet {
    let (h, w) = m.shape();
    let fg = |r: isize, c: isize| {
        r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && m.get(r as usize, c as usize)
    };
    const FOUR: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    const EIGHT: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    let offsets: &[(isize, isize)] = match conn {
        Connectivity::Four => &FOUR,
        Connectivity::Eight => &EIGHT,
    };
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if m.get(r, c)
                && offsets
                    .iter()
                    .any(|(dr, dc)| !fg(r as isize + dr, c as isize + dc))
            {
                points.push((r, c));
            }
        }
    }
    SurfacePointSet { points }
}

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher). Infinite
/// entries are not seeds.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let Some(first) = f.iter().position(|v| v.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut v = vec![first; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in first + 1..n {
        if f[q].is_infinite() {
            continue;
        }
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Squared distance from every pixel to the nearest seed pixel.
fn squared_edt(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(r, c) in seeds {
        grid[r * w + c] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, &mut col_out);
        for r in 0..h {
            grid[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        edt_1d(&grid[r * w..(r + 1) * w], &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Distances from every point of `from` to the nearest point of `to`.
fn directed_distances(from: &SurfacePointSet, to: &SurfacePointSet, h: usize, w: usize, spacing: f64) -> Vec<f64> {
    let field = squared_edt(&to.points, h, w);
    from.points
        .iter()
        .map(|&(r, c)| field[r * w + c].sqrt() * spacing)
        .collect()
}

/// Nearest-rank percentile: element ceil(q·n) (1-based) of the sorted values.
pub fn nearest_rank(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[rank - 1]
}

/// Both directed distance sets, or None when exactly one surface is empty.
/// Both empty yields two empty sets.
fn surface_sets(a: &Mask, b: &Mask, opts: &SurfaceOptions) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    check_shapes(a, b)?;
    let (h, w) = a.shape();
    let sa = extract_surface_with(a, opts.connectivity);
    let sb = extract_surface_with(b, opts.connectivity);
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => Ok(Some((vec![], vec![]))),
        (false, false) => Ok(Some((
            directed_distances(&sa, &sb, h, w, opts.spacing),
            directed_distances(&sb, &sa, h, w, opts.spacing),
        ))),
        _ => Ok(None),
    }
}

/// Max over the two directions of the 95th nearest-rank percentile.
pub fn hd95(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    hd95_with(a, b, &SurfaceOptions::default())
}

pub fn hd95_with(a: &Mask, b: &Mask, opts: &SurfaceOptions) -> Result<Option<f64>> {
    Ok(surface_sets(a, b, opts)?.map(|(mut ab, mut ba)| {
        if ab.is_empty() {
            0.0
        } else {
            nearest_rank(&mut ab, 0.95).max(nearest_rank(&mut ba, 0.95))
        }
    }))
}

/// Mean of both directed distance sets pooled together.
pub fn asd(a: &Mask, b: &Mask) -> Result<Option<f64>> {
    asd_with(a, b, &SurfaceOptions::default())
}

pub fn asd_with(a: &Mask, b: &Mask, opts: &SurfaceOptions) -> Result<Option<f64>> {
    Ok(surface_sets(a, b, opts)?.map(|(ab, ba)| {
        let n = ab.len() + ba.len();
        if n == 0 {
            0.0
        } else {
            (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / n as f64
        }
    }))
}

/// Per-sample metrics. `None` marks an undefined surface distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

pub fn evaluate_pair(pred: &Mask, truth: &Mask, opts: &SurfaceOptions) -> Result<MetricResult> {
    let sets = surface_sets(pred, truth, opts)?;
    let (hd, ad) = match sets {
        None => (None, None),
        Some((mut ab, mut ba)) => {
            let n = ab.len() + ba.len();
            if n == 0 {
                (Some(0.0), Some(0.0))
            } else {
                let asd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / n as f64;
                let hd = nearest_rank(&mut ab, 0.95).max(nearest_rank(&mut ba, 0.95));
                (Some(hd), Some(asd))
            }
        }
    };
    Ok(MetricResult {
        dsc: dsc(pred, truth)?,
        hd95: hd,
        asd: ad,
    })
}

/// Mean and population standard deviation over the defined entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub undefined: usize,
}

impl Stat {
    pub fn from_options(values: impl IntoIterator<Item = Option<f64>>) -> Stat {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => undefined += 1,
            }
        }
        let n = defined.len();
        if n == 0 {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
                undefined,
            };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let var = defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Stat {
            mean,
            std: var.sqrt(),
            count: n,
            undefined,
        }
    }
}

/// Table-style summary. DSC is in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_sample: Vec<MetricResult>,
    pub dsc: Stat,
    pub hd95: Stat,
    pub asd: Stat,
}

pub fn evaluate_dataset(preds: &[Mask], truths: &[Mask]) -> Result<EvalSummary> {
    evaluate_dataset_with(preds, truths, &SurfaceOptions::default())
}

pub fn evaluate_dataset_with(preds: &[Mask], truths: &[Mask], opts: &SurfaceOptions) -> Result<EvalSummary> {
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            truths.len()
        )));
    }
    let per_sample = preds
        .par_iter()
        .zip(truths.par_iter())
        .map(|(p, t)| evaluate_pair(p, t, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_sample))
}

pub fn summarize(per_sample: Vec<MetricResult>) -> EvalSummary {
    EvalSummary {
        dsc: Stat::from_options(per_sample.iter().map(|m| Some(100.0 * m.dsc))),
        hd95: Stat::from_options(per_sample.iter().map(|m| m.hd95)),
        asd: Stat::from_options(per_sample.iter().map(|m| m.asd)),
        per_sample,
    }
}

//! Library routines against brute-force reimplementations on random instances.

use super::*;
use rand::Rng;
use sfada_core::data::Mask;
use sfada_core::metrics::{asd, hd95};
use sfada_core::projection::{project, LatentVector};
use sfada_core::reference::{kmeans_fit, KMeansConfig, ReferenceSet};
use sfada_core::segmenter::Tensor3;
use sfada_core::selection::{select_alpha, select_beta, select_stdr, similarity_scores, SimilarityScore};

const INSTANCES: u64 = 100;

/// Explicit loops: mask the features, average channels, max over each
/// block, divide by the foreground count.
fn projection_oracle(feats: &Tensor3, mask: &Mask, k: usize) -> (Vec<f64>, bool) {
    let (c, h, w) = (feats.channels, feats.height, feats.width);
    let mut fg = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                fg += 1;
            }
        }
    }
    let mut out = Vec::new();
    for by in 0..h / k {
        for bx in 0..w / k {
            let mut best = f64::NEG_INFINITY;
            for y in by * k..(by + 1) * k {
                for x in bx * k..(bx + 1) * k {
                    let m = if mask.get(y, x) { 1.0 } else { 0.0 };
                    let mut sum = 0.0;
                    for ch in 0..c {
                        sum += feats.at(ch, y, x) * m;
                    }
                    best = best.max(sum / c as f64);
                }
            }
            out.push(if fg == 0 { 0.0 } else { best / fg as f64 });
        }
    }
    (out, fg > 0)
}

pub fn projection_matches_loop_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let k = [1, 2, 4, 8, 16][r.gen_range(0..5)];
        let c = r.gen_range(1..=8);
        let mask = if seed % 10 == 0 {
            Mask::new(16, 16, vec![0; 256]).unwrap()
        } else {
            random_mask(&mut r, 16, 0)
        };
        let feats = random_features(&mut r, c, 16, 16);
        let v = project(&prediction(&mask, feats.clone()), k, "x").unwrap();
        let (expect, valid) = projection_oracle(&feats, &mask, k);
        assert_eq!(v.valid, valid, "seed {seed}");
        assert_eq!(v.values.len(), expect.len());
        for (a, b) in v.values.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10, "seed {seed}: {a} vs {b}");
        }
    }
}

fn similarity_oracle(v: &LatentVector, refs: &ReferenceSet) -> f64 {
    let mut best = f64::INFINITY;
    for c in &refs.centroids {
        let mut d = 0.0;
        for i in 0..c.len() {
            d += (v.values[i] - c[i]).powi(2);
        }
        if d < best {
            best = d;
        }
    }
    best
}

fn random_refs(r: &mut rand_chacha::ChaCha8Rng, k: usize, dim: usize) -> ReferenceSet {
    ReferenceSet {
        centroids: (0..k).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect(),
        k,
        inertia: 0.0,
        iterations_run: 0,
        objective_trace: Vec::new(),
    }
}

pub fn similarity_matches_exhaustive_scan() {
    for seed in 0..INSTANCES {
        let mut r = rng(1000 + seed);
        let (k, dim) = (r.gen_range(1..8), r.gen_range(1..20));
        let refs = random_refs(&mut r, k, dim);
        let mut vectors: Vec<LatentVector> = (0..20)
            .map(|i| latent(i, (0..dim).map(|_| r.gen_range(-1.5..1.5)).collect()))
            .collect();
        vectors[3].valid = false;
        let scores = similarity_scores(&vectors, &refs).unwrap();
        for (s, v) in scores.iter().zip(&vectors) {
            assert_eq!(s.sample_id, v.sample_id);
            if v.valid {
                assert!((s.distance - similarity_oracle(v, &refs)).abs() <= 1e-10);
            } else {
                assert!(!s.valid && s.distance == f64::INFINITY);
            }
        }
    }
}

fn key(s: &SimilarityScore) -> f64 {
    if s.valid {
        s.distance
    } else {
        f64::INFINITY
    }
}

/// Number of entries of `pool` that come before `s` in ascending
/// (distance, id) order, by pairwise comparison.
fn rank_asc(s: &SimilarityScore, pool: &[&SimilarityScore]) -> usize {
    pool.iter()
        .filter(|o| key(o) < key(s) || (key(o) == key(s) && o.sample_id < s.sample_id))
        .count()
}

fn rank_desc(s: &SimilarityScore, pool: &[&SimilarityScore]) -> usize {
    pool.iter()
        .filter(|o| key(o) > key(s) || (key(o) == key(s) && o.sample_id < s.sample_id))
        .count()
}

fn take_ranked(pool: &[&SimilarityScore], m: usize, asc: bool) -> Vec<String> {
    let rank = |s: &SimilarityScore| if asc { rank_asc(s, pool) } else { rank_desc(s, pool) };
    let mut picked: Vec<(usize, String)> = pool
        .iter()
        .map(|s| (rank(s), s.sample_id.clone()))
        .filter(|(rk, _)| *rk < m)
        .collect();
    picked.sort();
    picked.into_iter().map(|(_, id)| id).collect()
}

pub fn selection_matches_sort_oracle() {
    for seed in 0..INSTANCES {
        let mut r = rng(2000 + seed);
        let scores = random_scores(&mut r);
        let pct = [5.0, 10.0, 20.0, 33.0, 50.0, 75.0, 100.0][r.gen_range(0..7)];
        let n = scores.len();
        let all: Vec<&SimilarityScore> = scores.iter().collect();
        let valid: Vec<&SimilarityScore> = scores.iter().filter(|s| s.valid).collect();

        let m = budget(n, pct, 1);
        let a = select_alpha(&scores, pct).unwrap();
        assert_eq!(a.invariant_ids, take_ranked(&all, m, true), "alpha seed {seed}");
        assert!(a.specific_ids.is_empty());
        let b = select_beta(&scores, pct).unwrap();
        assert_eq!(b.specific_ids, take_ranked(&all, m, false), "beta seed {seed}");
        assert!(b.invariant_ids.is_empty());

        let m = budget(n, pct, 2);
        let s = select_stdr(&scores, pct, seed).unwrap();
        let inv = take_ranked(&valid, m / 2, true);
        let rest: Vec<&SimilarityScore> = scores.iter().filter(|x| !inv.contains(&x.sample_id)).collect();
        let spec = take_ranked(&rest, m - inv.len(), false);
        assert_eq!(s.invariant_ids, inv, "stdr seed {seed}");
        assert_eq!(s.specific_ids, spec, "stdr seed {seed}");
        assert_eq!(s.len(), m);
    }
}

pub fn kmeans_single_cluster_is_the_mean() {
    for seed in 0..INSTANCES {
        let mut r = rng(3000 + seed);
        let (n, dim) = (r.gen_range(1..30), r.gen_range(1..10));
        let vectors: Vec<LatentVector> = (0..n)
            .map(|i| latent(i, (0..dim).map(|_| r.gen_range(-5.0..5.0)).collect()))
            .collect();
        let refs = kmeans_fit(&vectors, &KMeansConfig::new(1, seed)).unwrap();
        for d in 0..dim {
            let mean = vectors.iter().map(|v| v.values[d]).sum::<f64>() / n as f64;
            assert!((refs.centroids[0][d] - mean).abs() <= 1e-10, "seed {seed}");
        }
    }
}

fn sse(points: &[Vec<f64>]) -> f64 {
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|d| points.iter().map(|p| p[d]).sum::<f64>() / points.len() as f64)
        .collect();
    points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum()
}

pub fn kmeans_two_clusters_find_the_optimal_partition() {
    for seed in 0..INSTANCES {
        let mut r = rng(4000 + seed);
        let dim = r.gen_range(1..5);
        let centre: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let far: Vec<f64> = centre.iter().map(|c| c + 20.0).collect();
        let mut pts: Vec<Vec<f64>> = Vec::new();
        for base in [&centre, &centre, &far, &far] {
            pts.push(base.iter().map(|b| b + r.gen_range(-1.0..1.0)).collect());
        }
        let order: Vec<usize> = {
            let mut o = vec![0, 1, 2, 3];
            rand::seq::SliceRandom::shuffle(o.as_mut_slice(), &mut r);
            o
        };
        let vectors: Vec<LatentVector> = order.iter().map(|&i| latent(i, pts[i].clone())).collect();

        // point 3 always in the second group: the 7 two-way splits of four points
        let mut best = (f64::INFINITY, 0u8);
        for bits in 1u8..8 {
            let (a, b): (Vec<_>, Vec<_>) = (0..4).partition(|i| bits >> i & 1 == 1);
            let a: Vec<Vec<f64>> = a.iter().map(|&i| pts[i].clone()).collect();
            let b: Vec<Vec<f64>> = b.iter().map(|&i| pts[i].clone()).collect();
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let cost = sse(&a) + sse(&b);
            if cost < best.0 {
                best = (cost, bits);
            }
        }

        let refs = kmeans_fit(&vectors, &KMeansConfig::new(2, seed)).unwrap();
        let label = |p: &Vec<f64>| {
            let d: Vec<f64> = refs
                .centroids
                .iter()
                .map(|c| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            (d[1] < d[0]) as u8
        };
        for i in 0..4 {
            for j in 0..4 {
                let same_opt = (best.1 >> i & 1) == (best.1 >> j & 1);
                assert_eq!(label(&pts[i]) == label(&pts[j]), same_opt, "seed {seed}");
            }
        }
        assert!((refs.inertia - best.0).abs() <= 1e-9 * best.0.max(1.0));
    }
}

fn surface(m: &Mask) -> Vec<(f64, f64)> {
    let (h, w) = m.shape();
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m.get(y as usize, x as usize);
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !fg(y + dy, x + dx)) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn directed(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<f64> {
    a.iter()
        .map(|p| b.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = (0.95 * v.len() as f64).ceil() as usize;
    v[rank.max(1) - 1]
}

pub fn surface_distances_match_all_pairs() {
    for seed in 0..INSTANCES {
        let mut r = rng(5000 + seed);
        let (a, b) = (random_mask(&mut r, 16, 0), random_mask(&mut r, 16, 0));
        let (sa, sb) = (surface(&a), surface(&b));
        if sa.is_empty() || sb.is_empty() {
            assert_eq!(hd95(&a, &b).unwrap().is_none(), sa.is_empty() != sb.is_empty());
            continue;
        }
        let (ab, ba) = (directed(&sa, &sb), directed(&sb, &sa));
        let want_asd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        let want_hd = percentile95(ab).max(percentile95(ba));
        assert!((hd95(&a, &b).unwrap().unwrap() - want_hd).abs() <= 1e-9, "seed {seed}");
        assert!((asd(&a, &b).unwrap().unwrap() - want_asd).abs() <= 1e-9, "seed {seed}");
    }
}

use super::*;
use rand::Rng;
use sfada_core::data::Mask;
use sfada_core::metrics::{asd, dsc, hd95};
use sfada_core::projection::LatentVector;
use sfada_core::reference::{kmeans_fit, KMeansConfig};
use sfada_core::segmenter::{Prediction, Tensor3};
use sfada_core::selection::{
    mean_entropy, select_alpha, select_beta, select_by_entropy, select_random, select_stdr, SimilarityScore,
};

fn translate(m: &Mask, dy: isize, dx: isize) -> Mask {
    let (h, w) = m.shape();
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                assert!(ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w);
                labels[ny as usize * w + nx as usize] = 1;
            }
        }
    }
    Mask::new(h, w, labels).unwrap()
}

/// Plain Hausdorff distance over whole masks' surface points.
fn hausdorff(a: &Mask, b: &Mask) -> f64 {
    let pts = |m: &Mask| {
        let (h, w) = m.shape();
        let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.get(y as usize, x as usize);
        let mut v = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !fg(y + dy, x + dx)) {
                    v.push((y as f64, x as f64));
                }
            }
        }
        v
    };
    let (pa, pb) = (pts(a), pts(b));
    let dir = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|s| q.iter().map(|t| (s.0 - t.0).hypot(s.1 - t.1)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    dir(&pa, &pb).max(dir(&pb, &pa))
}

pub fn metric_invariants_hold_on_random_pairs() {
    let mut violations = Vec::new();
    for seed in 0..100u64 {
        let mut r = rng(10_000 + seed);
        let (a, b) = (random_mask(&mut r, 24, 4), random_mask(&mut r, 24, 4));
        let (d, h, s) = (dsc(&a, &b).unwrap(), hd95(&a, &b).unwrap(), asd(&a, &b).unwrap());
        if d != dsc(&b, &a).unwrap() || h != hd95(&b, &a).unwrap() || s != asd(&b, &a).unwrap() {
            violations.push(format!("{seed}: symmetry"));
        }
        if dsc(&a, &a).unwrap() != 1.0 || hd95(&a, &a).unwrap() != Some(0.0) || asd(&a, &a).unwrap() != Some(0.0) {
            violations.push(format!("{seed}: identity"));
        }
        if !(0.0..=1.0).contains(&d) {
            violations.push(format!("{seed}: dsc range"));
        }
        let (dy, dx) = (r.gen_range(-3..=3), r.gen_range(-3..=3));
        let (ta, tb) = (translate(&a, dy, dx), translate(&b, dy, dx));
        if dsc(&ta, &tb).unwrap() != d || hd95(&ta, &tb).unwrap() != h || asd(&ta, &tb).unwrap() != s {
            violations.push(format!("{seed}: translation"));
        }
        if let Some(h) = h {
            if h > hausdorff(&a, &b) + 1e-12 {
                violations.push(format!("{seed}: hd95 above hausdorff"));
            }
        }
    }
    assert!(violations.is_empty(), "{violations:?}");
}

pub fn kmeans_objective_never_increases() {
    let mut violations = 0;
    for run in 0..20u64 {
        let mut r = rng(20_000 + run);
        let (n, dim, k) = (r.gen_range(20..80), r.gen_range(2..10), r.gen_range(2..7));
        let vectors: Vec<LatentVector> = (0..n)
            .map(|i| latent(i, (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()))
            .collect();
        let refs = kmeans_fit(&vectors, &KMeansConfig::new(k, run)).unwrap();
        violations += refs.objective_trace.windows(2).filter(|w| w[1] > w[0]).count();
        let last = *refs.objective_trace.last().unwrap();
        assert!((last - refs.inertia).abs() <= 1e-9 * last.max(1.0));
    }
    assert_eq!(violations, 0);
}

pub fn kmeans_centroids_lie_in_bounding_box_and_ignore_order() {
    for run in 0..20u64 {
        let mut r = rng(21_000 + run);
        let dim = r.gen_range(1..6);
        let mut vectors: Vec<LatentVector> = (0..30)
            .map(|i| latent(i, (0..dim).map(|_| r.gen_range(-3.0..3.0)).collect()))
            .collect();
        let a = kmeans_fit(&vectors, &KMeansConfig::new(4, run)).unwrap();
        for d in 0..dim {
            let lo = vectors.iter().map(|v| v.values[d]).fold(f64::INFINITY, f64::min);
            let hi = vectors.iter().map(|v| v.values[d]).fold(f64::NEG_INFINITY, f64::max);
            assert!(a.centroids.iter().all(|c| c[d] >= lo - 1e-12 && c[d] <= hi + 1e-12));
        }
        rand::seq::SliceRandom::shuffle(vectors.as_mut_slice(), &mut r);
        let b = kmeans_fit(&vectors, &KMeansConfig::new(4, run)).unwrap();
        assert!((a.inertia - b.inertia).abs() <= 1e-12 * a.inertia.max(1.0));
    }
}

fn transformed(scores: &[SimilarityScore], f: impl Fn(f64) -> f64) -> Vec<SimilarityScore> {
    scores
        .iter()
        .map(|s| SimilarityScore {
            distance: if s.valid { f(s.distance) } else { s.distance },
            ..s.clone()
        })
        .collect()
}

pub fn selection_depends_only_on_rank() {
    let transforms: [fn(f64) -> f64; 4] = [|x| x + 7.5, |x| 3.0 * x, |x| (x / 10.0).exp(), |x| x.sqrt()];
    for set in 0..50u64 {
        let mut r = rng(30_000 + set);
        let scores = random_scores(&mut r);
        let pct = [10.0, 20.0, 50.0][set as usize % 3];
        let base = (
            select_stdr(&scores, pct, 1).unwrap(),
            select_alpha(&scores, pct).unwrap(),
            select_beta(&scores, pct).unwrap(),
        );
        for f in transforms {
            let t = transformed(&scores, f);
            assert_eq!(select_stdr(&t, pct, 1).unwrap(), base.0, "set {set}");
            assert_eq!(select_alpha(&t, pct).unwrap(), base.1, "set {set}");
            assert_eq!(select_beta(&t, pct).unwrap(), base.2, "set {set}");
        }
    }
}

pub fn random_selection_is_uniform() {
    let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
    let mut counts = [0usize; 10];
    let trials = 10_000;
    for seed in 0..trials {
        for id in select_random(&ids, 20.0, seed).unwrap().all_ids() {
            counts[ids.iter().position(|x| *x == id).unwrap()] += 1;
        }
    }
    let (p, n) = (0.2, trials as f64);
    let sigma = (n * p * (1.0 - p)).sqrt();
    for (i, c) in counts.iter().enumerate() {
        assert!((*c as f64 - n * p).abs() <= 3.0 * sigma, "id{i} picked {c} times");
    }
}

pub fn halves_union_equals_dual_selection() {
    for n in [10usize, 20, 30, 50] {
        let mut r = rng(n as u64);
        let mut d: Vec<f64> = (0..n).map(|i| i as f64 + r.gen_range(0.0..0.5)).collect();
        rand::seq::SliceRandom::shuffle(d.as_mut_slice(), &mut r);
        let scores: Vec<SimilarityScore> = d.iter().enumerate().map(|(i, &x)| score(i, x, true)).collect();
        let s = select_stdr(&scores, 20.0, 0).unwrap();
        assert_eq!(s.invariant_ids, select_alpha(&scores, 10.0).unwrap().invariant_ids);
        assert_eq!(s.specific_ids, select_beta(&scores, 10.0).unwrap().specific_ids);
    }
}

fn prob_map(r: &mut rand_chacha::ChaCha8Rng, side: usize) -> Prediction {
    let n = side * side;
    let mut logits = Tensor3::zeros(2, side, side);
    for i in 0..n {
        logits.data[n + i] = r.gen_range(-4.0..4.0);
    }
    Prediction::from_logits(logits, Tensor3::zeros(1, side, side)).unwrap()
}

pub fn entropy_ranking_matches_pixel_sum() {
    for set in 0..20u64 {
        let mut r = rng(40_000 + set);
        let preds: Vec<Prediction> = (0..12).map(|_| prob_map(&mut r, 8)).collect();
        let ids: Vec<String> = (0..12).map(|i| format!("p{i:02}")).collect();
        let direct: Vec<f64> = preds
            .iter()
            .map(|p| {
                let mut s = 0.0;
                for i in 0..64 {
                    for c in 0..2 {
                        let q = p.probs.data[c * 64 + i];
                        s -= q * q.ln();
                    }
                }
                s / 64.0
            })
            .collect();
        for (p, e) in preds.iter().zip(&direct) {
            assert!((mean_entropy(p) - e).abs() < 1e-12);
        }
        let mut order: Vec<usize> = (0..12).collect();
        order.sort_by(|&a, &b| direct[b].total_cmp(&direct[a]));
        let m = select_by_entropy(&ids, &direct, 25.0).unwrap();
        let want: Vec<String> = order.iter().take(3).map(|&i| ids[i].clone()).collect();
        assert_eq!(m.specific_ids, want);
    }
}


#![allow(dead_code)]

pub mod gradient_checks;
pub mod oracle_checks;
pub mod property_checks;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sfada_core::data::Mask;
use sfada_core::projection::LatentVector;
use sfada_core::segmenter::{Prediction, Tensor3};
use sfada_core::selection::SimilarityScore;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Union of a few random rectangles, kept `margin` pixels off the border.
pub fn random_mask(r: &mut ChaCha8Rng, side: usize, margin: usize) -> Mask {
    let mut labels = vec![0u8; side * side];
    let hi = side - margin;
    for _ in 0..r.gen_range(1..=3) {
        let (y0, x0) = (r.gen_range(margin..hi), r.gen_range(margin..hi));
        let (y1, x1) = (r.gen_range(y0..hi), r.gen_range(x0..hi));
        for y in y0..=y1.min(hi - 1) {
            for x in x0..=x1.min(hi - 1) {
                labels[y * side + x] = 1;
            }
        }
    }
    // sprinkle to get ragged surfaces
    for _ in 0..side {
        let (y, x) = (r.gen_range(margin..hi), r.gen_range(margin..hi));
        labels[y * side + x] ^= 1;
    }
    Mask::new(side, side, labels).unwrap()
}

/// Prediction whose argmax equals `mask`, with arbitrary features.
pub fn prediction(mask: &Mask, features: Tensor3) -> Prediction {
    let (h, w) = mask.shape();
    let mut logits = Tensor3::zeros(2, h, w);
    for (i, &l) in mask.labels().iter().enumerate() {
        logits.data[h * w + i] = if l == 1 { 1.0 } else { -1.0 };
    }
    let p = Prediction::from_logits(logits, features).unwrap();
    assert_eq!(&p.mask, mask);
    p
}

pub fn random_features(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen_range(0.0..2.0)).collect())
}

pub fn latent(id: usize, values: Vec<f64>) -> LatentVector {
    LatentVector {
        sample_id: format!("s{id:03}"),
        values,
        valid: true,
    }
}

pub fn score(id: usize, distance: f64, valid: bool) -> SimilarityScore {
    SimilarityScore {
        sample_id: format!("s{id:03}"),
        distance: if valid { distance } else { f64::INFINITY },
        valid,
    }
}

/// Random score set, sometimes with ties and invalid entries.
pub fn random_scores(r: &mut ChaCha8Rng) -> Vec<SimilarityScore> {
    let n = r.gen_range(4..40);
    let tied = r.gen_bool(0.3);
    (0..n)
        .map(|i| {
            let d = if tied { r.gen_range(0..5) as f64 } else { r.gen_range(0.0..100.0) };
            score(i, d, !r.gen_bool(0.1) || i < 2)
        })
        .collect()
}

/// Round half up, then the minimum.
pub fn budget(n: usize, percent: f64, min: usize) -> usize {
    let exact = percent * n as f64 / 100.0;
    let m = if exact.fract() >= 0.5 { exact.ceil() } else { exact.floor() } as usize;
    m.max(min)
}

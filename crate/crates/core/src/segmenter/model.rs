use rayon::prelude::*;

use crate::data::{Dataset, Image, Mask};
use crate::error::{Error, Result};

use super::layers::{
    conv_backward, conv_forward, maxpool2_backward, maxpool2_forward, maxpool2_gather, relu_backward,
    relu_pattern, relu_with, upsample2_backward, upsample2_forward, Tensor3,
};
use super::loss::loss_and_logit_grad;
use super::SegmenterParams;

/// Network output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// (2, H, W): background, foreground.
    pub logits: Tensor3,
    /// Softmax of `logits` along the channel axis.
    pub probs: Tensor3,
    /// Pixelwise argmax of `probs`; ties resolve to background.
    pub mask: Mask,
    /// (C, H, W) output of the last hidden layer.
    pub penultimate: Tensor3,
}

impl Prediction {
    pub fn from_logits(logits: Tensor3, penultimate: Tensor3) -> Result<Self> {
        if logits.channels != 2 {
            return Err(Error::invalid("prediction needs exactly two logit planes"));
        }
        let probs = softmax2(&logits);
        Ok(Prediction::assemble(logits, probs, penultimate))
    }

    fn assemble(logits: Tensor3, probs: Tensor3, penultimate: Tensor3) -> Self {
        let n = probs.plane_len();
        let labels = (0..n)
            .map(|i| (probs.data[n + i] > probs.data[i]) as u8)
            .collect();
        let mask = Mask::new(probs.height, probs.width, labels).expect("argmax mask is binary");
        Prediction {
            logits,
            probs,
            mask,
            penultimate,
        }
    }

    #[cfg(test)]
    pub(crate) fn from_probs_for_test(probs: Tensor3) -> Self {
        let logits = Tensor3::zeros(2, probs.height, probs.width);
        let pen = Tensor3::zeros(1, probs.height, probs.width);
        Prediction::assemble(logits, probs, pen)
    }
}

fn softmax2(logits: &Tensor3) -> Tensor3 {
    let n = logits.plane_len();
    let mut probs = Tensor3::zeros(2, logits.height, logits.width);
    for i in 0..n {
        let (a, b) = (logits.data[i], logits.data[n + i]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        probs.data[i] = ea / s;
        probs.data[n + i] = eb / s;
    }
    probs
}

/// The piecewise-linear region the network is in for one input: which ReLU
/// units are active and which input won each max-pool window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPattern {
    pub relu: [Vec<bool>; 4],
    pub pool: [Vec<usize>; 2],
}

/// Everything the backward pass needs.
struct Cache {
    x0: Tensor3,
    pattern: ActivationPattern,
    a1_shape: (usize, usize),
    p1: Tensor3,
    a2_shape: (usize, usize),
    u1: Tensor3,
    u2: Tensor3,
    a4: Tensor3,
}

fn image_tensor(img: &Image) -> Result<Tensor3> {
    let (h, w) = img.shape();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(format!(
            "image shape {h}x{w} must be divisible by 4"
        )));
    }
    Ok(Tensor3::from_vec(1, h, w, img.pixels().to_vec()))
}

fn run(
    params: &SegmenterParams,
    img: &Image,
    fixed: Option<&ActivationPattern>,
) -> Result<(Prediction, Cache)> {
    let x0 = image_tensor(img)?;
    let layers = params.spec().layers();
    let conv = |x: &Tensor3, li: usize| {
        let (w, b) = params.layer(li);
        conv_forward(x, w, b, layers[li].out_c, layers[li].k)
    };
    let relu = |z: &Tensor3, slot: usize| {
        let active = match fixed {
            Some(p) => p.relu[slot].clone(),
            None => relu_pattern(z),
        };
        (relu_with(z, &active), active)
    };
    let pool = |a: &Tensor3, slot: usize| match fixed {
        Some(p) => (maxpool2_gather(a, &p.pool[slot]), p.pool[slot].clone()),
        None => maxpool2_forward(a),
    };

    let z1 = conv(&x0, 0);
    let (a1, r1) = relu(&z1, 0);
    let (p1, i1) = pool(&a1, 0);
    let z2 = conv(&p1, 1);
    let (a2, r2) = relu(&z2, 1);
    let (p2, i2) = pool(&a2, 1);
    let u1 = upsample2_forward(&p2);
    let z3 = conv(&u1, 2);
    let (a3, r3) = relu(&z3, 2);
    let u2 = upsample2_forward(&a3);
    let z4 = conv(&u2, 3);
    let (a4, r4) = relu(&z4, 3);
    let logits = conv(&a4, 4);

    let probs = softmax2(&logits);
    let pred = Prediction::assemble(logits, probs, a4.clone());
    let cache = Cache {
        x0,
        pattern: ActivationPattern {
            relu: [r1, r2, r3, r4],
            pool: [i1, i2],
        },
        a1_shape: (a1.height, a1.width),
        p1,
        a2_shape: (a2.height, a2.width),
        u1,
        u2,
        a4,
    };
    Ok((pred, cache))
}

/// Deterministic forward pass.
pub fn forward(params: &SegmenterParams, img: &Image) -> Result<Prediction> {
    run(params, img, None).map(|(p, _)| p)
}

/// Forward pass with ReLU states and pool winners pinned to `pattern` (when
/// given); also returns the pattern actually used. With the pattern pinned
/// the logits are affine in any single parameter.
pub fn forward_with_pattern(
    params: &SegmenterParams,
    img: &Image,
    pattern: Option<&ActivationPattern>,
) -> Result<(Prediction, ActivationPattern)> {
    run(params, img, pattern).map(|(p, c)| (p, c.pattern))
}

/// Inference entry point; same numbers as [`forward`].
pub fn predict_mask(params: &SegmenterParams, img: &Image) -> Result<Prediction> {
    forward(params, img)
}

/// Predictions for every sample, in dataset order.
pub fn predict_dataset(params: &SegmenterParams, ds: &Dataset) -> Result<Vec<Prediction>> {
    ds.samples()
        .par_iter()
        .map(|s| forward(params, &s.image))
        .collect()
}

/// Argmax masks only, in dataset order.
pub fn predict_masks(params: &SegmenterParams, ds: &Dataset) -> Result<Vec<Mask>> {
    ds.samples()
        .par_iter()
        .map(|s| forward(params, &s.image).map(|p| p.mask))
        .collect()
}

fn backward(params: &SegmenterParams, cache: &Cache, dlogits: &Tensor3) -> Vec<f64> {
    let spec = params.spec();
    let layers = spec.layers();
    let offsets = spec.offsets();
    let mut grad = vec![0.0; spec.param_count()];

    let mut layer_grad = |li: usize, x: &Tensor3, dout: &Tensor3, need_dx: bool| {
        let (w, _) = params.layer(li);
        let start = offsets[li];
        let block = &mut grad[start..start + layers[li].len()];
        let (dw, db) = block.split_at_mut(layers[li].weight_len());
        conv_backward(x, w, dout, layers[li].k, dw, db, need_dx)
    };
    let p = &cache.pattern;

    let mut da4 = layer_grad(4, &cache.a4, dlogits, true).expect("dx requested");
    relu_backward(&mut da4, &p.relu[3]);
    let du2 = layer_grad(3, &cache.u2, &da4, true).expect("dx requested");
    let mut da3 = upsample2_backward(&du2);
    relu_backward(&mut da3, &p.relu[2]);
    let du1 = layer_grad(2, &cache.u1, &da3, true).expect("dx requested");
    let dp2 = upsample2_backward(&du1);
    let mut da2 = maxpool2_backward(&dp2, &p.pool[1], cache.a2_shape.0, cache.a2_shape.1);
    relu_backward(&mut da2, &p.relu[1]);
    let dp1 = layer_grad(1, &cache.p1, &da2, true).expect("dx requested");
    let mut da1 = maxpool2_backward(&dp1, &p.pool[0], cache.a1_shape.0, cache.a1_shape.1);
    relu_backward(&mut da1, &p.relu[0]);
    layer_grad(0, &cache.x0, &da1, false);
    grad
}

/// Composite loss of one sample and its exact parameter gradient.
pub fn sample_loss_and_gradient(
    params: &SegmenterParams,
    img: &Image,
    truth: &Mask,
) -> Result<(f64, Vec<f64>)> {
    let (pred, cache) = run(params, img, None)?;
    let (loss, dlogits) = loss_and_logit_grad(&pred.probs, truth)?;
    Ok((loss, backward(params, &cache, &dlogits)))
}

/// Mean loss and mean gradient over a batch. Per-sample work runs in
/// parallel; the reduction is a fixed-order sequential sum.
pub(crate) fn batch_loss_and_gradient(
    params: &SegmenterParams,
    batch: &[(Image, Mask)],
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient needs a non-empty batch"));
    }
    let shape = batch[0].0.shape();
    for (img, m) in batch {
        if img.shape() != shape || m.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: if img.shape() != shape { img.shape() } else { m.shape() },
            });
        }
    }
    let parts = batch
        .par_iter()
        .map(|(img, m)| sample_loss_and_gradient(params, img, m))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

/// Exact gradient of the mean composite loss over `batch`, in parameter layout.
pub fn gradient(params: &SegmenterParams, batch: &[(Image, Mask)]) -> Result<Vec<f64>> {
    batch_loss_and_gradient(params, batch).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{init_params, ChannelSpec};
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, side: usize) -> Image {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(side, side, (0..side * side).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_give_uniform_probs_and_background() {
        let params = SegmenterParams::zeros(ChannelSpec::default());
        let pred = forward(&params, &random_image(1, 16)).unwrap();
        assert!(pred.logits.data.iter().all(|&v| v == 0.0));
        assert!(pred.probs.data.iter().all(|&v| v == 0.5));
        assert_eq!(pred.mask.foreground_count(), 0);
        assert_eq!(predict_mask(&params, &random_image(2, 16)).unwrap().mask.foreground_count(), 0);
    }

    #[test]
    fn probabilities_normalize_and_mask_is_argmax() {
        let params = init_params(5);
        let pred = forward(&params, &random_image(3, 16)).unwrap();
        let n = pred.probs.plane_len();
        for i in 0..n {
            let (a, b) = (pred.probs.data[i], pred.probs.data[n + i]);
            assert!(a >= 0.0 && b >= 0.0);
            assert!((a + b - 1.0).abs() < 1e-6);
            assert_eq!(pred.mask.labels()[i] == 1, b > a);
        }
        assert_eq!(pred.penultimate.channels, 8);
        assert_eq!((pred.penultimate.height, pred.penultimate.width), (16, 16));
    }

    #[test]
    fn rejects_non_divisible_shape() {
        let img = Image::filled(10, 12, 0.0).unwrap();
        assert!(forward(&init_params(0), &img).is_err());
    }

    #[test]
    fn shifting_input_by_four_shifts_interior_logits() {
        let params = init_params(9);
        let side = 32;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        // content confined to the centre, zero border
        let mut base = vec![0.0; side * side];
        for y in 8..20 {
            for x in 8..20 {
                base[y * side + x] = r.gen_range(-1.0..1.0);
            }
        }
        let mut shifted = vec![0.0; side * side];
        for y in 0..side - 4 {
            for x in 0..side - 4 {
                shifted[(y + 4) * side + x + 4] = base[y * side + x];
            }
        }
        let a = forward(&params, &Image::new(side, side, base).unwrap()).unwrap();
        let b = forward(&params, &Image::new(side, side, shifted).unwrap()).unwrap();
        for c in 0..2 {
            for y in 8..side - 12 {
                for x in 8..side - 12 {
                    let va = a.logits.at(c, y, x);
                    let vb = b.logits.at(c, y + 4, x + 4);
                    assert!((va - vb).abs() < 1e-12, "({c},{y},{x}): {va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn pinned_pattern_reproduces_free_forward() {
        let params = init_params(2);
        let img = random_image(8, 16);
        let (free, pattern) = forward_with_pattern(&params, &img, None).unwrap();
        let (pinned, same) = forward_with_pattern(&params, &img, Some(&pattern)).unwrap();
        assert_eq!(free, pinned);
        assert_eq!(pattern, same);
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let params = init_params(1);
        let mk = |s| {
            let img = random_image(s, 16);
            let m = Mask::from_fn(16, 16, |r, c| (r + c + s as usize) % 5 < 2).unwrap();
            (img, m)
        };
        let batch = vec![mk(10), mk(11)];
        let g = gradient(&params, &batch).unwrap();
        let g0 = gradient(&params, &batch[..1]).unwrap();
        let g1 = gradient(&params, &batch[1..]).unwrap();
        for i in 0..g.len() {
            assert!((g[i] - 0.5 * (g0[i] + g1[i])).abs() < 1e-10);
        }
        assert!(gradient(&params, &[]).is_err());
    }
}

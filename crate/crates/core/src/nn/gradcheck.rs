//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each check draws a random instance, contracts the layer output with a
//! random cotangent `r` so the objective is the scalar `⟨r, f(x)⟩`, and
//! compares the analytic gradient against `(L(x + h) − L(x − h)) / 2h`
//! for every input and parameter entry. The reported error is
//! `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over all entries.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::ops::{self, Mode};
use super::tensor::Tensor;
use super::unet::{UNet, UNetConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Layers covered by [`check_layer`].
pub const LAYERS: [&str; 7] = ["conv2d", "maxpool2", "transposed_conv2", "leaky_relu", "batchnorm", "weighted_ce", "l2"];

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Numeric gradient of `f` at `x` by central differences.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe)?;
        probe[i] = x[i] - STEP;
        let down = f(&probe)?;
        probe[i] = x[i];
        g.push((up - down) / (2.0 * STEP));
    }
    Ok(g)
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn with(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).expect("shape matches")
}

/// Worst relative error over the gradient blocks of one instance.
fn worst(pairs: &[(&[f64], &[f64])]) -> f64 {
    pairs.iter().map(|(a, n)| relative_error(a, n)).fold(0.0, f64::max)
}

fn check_conv2d(rng: &mut Rng) -> Result<f64> {
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
    let x = normal(rng, &[n, cin, h, w]);
    let k = normal(rng, &[cout, cin, 3, 3]);
    let b = normal(rng, &[cout]);
    let r = normal(rng, &[n, cout, h, w]);
    let (dx, dk, db) = ops::conv2d_backward(&x, &k, &r)?;
    let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64]| ops::conv2d(x, k, b).map(|y| y.dot(&r));
    let nx = numeric_gradient(x.data(), |v| loss(&with(x.shape(), v), &k, b.data()))?;
    let nk = numeric_gradient(k.data(), |v| loss(&x, &with(k.shape(), v), b.data()))?;
    let nb = numeric_gradient(b.data(), |v| loss(&x, &k, v))?;
    Ok(worst(&[(dx.data(), &nx), (dk.data(), &nk), (&db, &nb)]))
}

fn check_maxpool2(rng: &mut Rng) -> Result<f64> {
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (h, w) = (2 * rng.random_range(1..=3), 2 * rng.random_range(1..=3));
    // Distinct values spaced well beyond the step keep every window's argmax stable.
    let len = n * c * h * w;
    let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.01).collect();
    for i in (1..len).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = with(&[n, c, h, w], &vals);
    let r = normal(rng, &[n, c, h / 2, w / 2]);
    let (_, routing) = ops::maxpool2(&x)?;
    let dx = ops::maxpool2_backward(&routing, &r)?;
    let nx = numeric_gradient(x.data(), |v| Ok(ops::maxpool2(&with(x.shape(), v))?.0.dot(&r)))?;
    Ok(relative_error(dx.data(), &nx))
}

fn check_transposed_conv2(rng: &mut Rng) -> Result<f64> {
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let x = normal(rng, &[n, cin, h, w]);
    let k = normal(rng, &[cin, cout, 2, 2]);
    let b = normal(rng, &[cout]);
    let r = normal(rng, &[n, cout, 2 * h, 2 * w]);
    let (dx, dk, db) = ops::transposed_conv2_backward(&x, &k, &r)?;
    let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64]| ops::transposed_conv2(x, k, b).map(|y| y.dot(&r));
    let nx = numeric_gradient(x.data(), |v| loss(&with(x.shape(), v), &k, b.data()))?;
    let nk = numeric_gradient(k.data(), |v| loss(&x, &with(k.shape(), v), b.data()))?;
    let nb = numeric_gradient(b.data(), |v| loss(&x, &k, v))?;
    Ok(worst(&[(dx.data(), &nx), (dk.data(), &nk), (&db, &nb)]))
}

fn check_leaky_relu(rng: &mut Rng) -> Result<f64> {
    let shape = [rng.random_range(1..=2), rng.random_range(1..=3), 4, 4];
    let alpha: f64 = rng.random_range(0.0..0.3);
    // Keep inputs off the kink at zero.
    let x = Tensor::from_fn(&shape, |_| {
        let v: f64 = rng.sample(StandardNormal);
        v.signum() * (v.abs() + 1e-3)
    });
    let r = normal(rng, &shape);
    let dx = ops::leaky_relu_backward(&x, &r, alpha);
    let nx = numeric_gradient(x.data(), |v| Ok(ops::leaky_relu(&with(&shape, v), alpha).dot(&r)))?;
    Ok(relative_error(dx.data(), &nx))
}

fn check_batchnorm(rng: &mut Rng) -> Result<f64> {
    let (n, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let shape = [n, c, rng.random_range(2..=4), rng.random_range(2..=4)];
    let eps = 1e-5;
    let x = normal(rng, &shape);
    let gamma: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    let beta: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
    let r = normal(rng, &shape);
    let (_, cache) = ops::batchnorm_train(&x, &gamma, &beta, eps)?;
    let (dx, dg, db) = ops::batchnorm_backward(&cache, &gamma, &r)?;
    let loss = |x: &Tensor<f64>, g: &[f64], b: &[f64]| ops::batchnorm_train(x, g, b, eps).map(|(y, _)| y.dot(&r));
    let nx = numeric_gradient(x.data(), |v| loss(&with(&shape, v), &gamma, &beta))?;
    let ng = numeric_gradient(&gamma, |v| loss(&x, v, &beta))?;
    let nb = numeric_gradient(&beta, |v| loss(&x, &gamma, v))?;
    Ok(worst(&[(dx.data(), &nx), (&dg, &ng), (&db, &nb)]))
}

fn check_weighted_ce(rng: &mut Rng) -> Result<f64> {
    let (n, k) = (rng.random_range(1..=2), rng.random_range(2..=4));
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let logits = normal(rng, &[n, k, h, w]);
    let targets: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..k) as u8).collect();
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
    let (_, g) = ops::weighted_softmax_crossentropy(&logits, &targets, &weights)?;
    let ng = numeric_gradient(logits.data(), |v| {
        ops::weighted_softmax_crossentropy(&with(logits.shape(), v), &targets, &weights).map(|(l, _)| l)
    })?;
    Ok(relative_error(g.data(), &ng))
}

fn check_l2(rng: &mut Rng) -> Result<f64> {
    let (ca, cb) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let a = normal(rng, &[ca, 2, 3, 3]);
    let b = normal(rng, &[2, cb, 2, 2]);
    let lambda = rng.random_range(1e-3..1.0);
    let (_, grads) = ops::l2_penalty(&[&a, &b], lambda);
    let na = numeric_gradient(a.data(), |v| Ok(ops::l2_penalty(&[&with(a.shape(), v), &b], lambda).0))?;
    let nb = numeric_gradient(b.data(), |v| Ok(ops::l2_penalty(&[&a, &with(b.shape(), v)], lambda).0))?;
    Ok(worst(&[(grads[0].data(), &na), (grads[1].data(), &nb)]))
}

/// Relative error of one random instance of the named layer.
pub fn check_layer(name: &str, rng: &mut Rng) -> Result<f64> {
    match name {
        "conv2d" => check_conv2d(rng),
        "maxpool2" => check_maxpool2(rng),
        "transposed_conv2" => check_transposed_conv2(rng),
        "leaky_relu" => check_leaky_relu(rng),
        "batchnorm" => check_batchnorm(rng),
        "weighted_ce" => check_weighted_ce(rng),
        "l2" => check_l2(rng),
        other => Err(Error::Config(format!("no gradient check for layer {other:?}"))),
    }
}

/// `|⟨T x, y⟩ − ⟨x, Tᵀ y⟩| / (‖T x‖ ‖y‖)` for the transposed convolution
/// without bias, where `Tᵀ` is its input gradient.
pub fn transposed_conv_adjoint_gap(rng: &mut Rng) -> Result<f64> {
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let x = normal(rng, &[n, cin, h, w]);
    let k = normal(rng, &[cin, cout, 2, 2]);
    let y = normal(rng, &[n, cout, 2 * h, 2 * w]);
    let tx = ops::transposed_conv2(&x, &k, &vec![0.0; cout])?;
    let (ty, _, _) = ops::transposed_conv2_backward(&x, &k, &y)?;
    let lhs = tx.dot(&y);
    let rhs = x.dot(&ty);
    let scale = tx.dot(&tx).sqrt() * y.dot(&y).sqrt();
    Ok((lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE))
}

/// Whole-network check: gradient of `⟨r, logits⟩` in train mode with
/// respect to the input and a random subset of parameter entries.
pub fn check_unet(config: &UNetConfig, size: usize, entries_per_param: usize, rng: &mut Rng) -> Result<f64> {
    let mut model = UNet::<f64>::new(config, rng)?;
    let x = normal(rng, &[2, config.in_channels, size, size]);
    let r = normal(rng, &[2, config.out_classes, size, size]);
    let dropout_seed: u64 = rng.random();
    let eval = |m: &mut UNet<f64>, x: Tensor<f64>| -> Result<f64> {
        // Same dropout mask on every evaluation.
        let mut d = crate::rng::substream(dropout_seed, "gradcheck", 0);
        Ok(m.forward(x, Mode::Train, &mut d)?.dot(&r))
    };

    eval(&mut model, x.clone())?;
    model.zero_grad();
    let dx = model.backward(&r)?;
    let mut analytic = dx.data().to_vec();
    let mut numeric = numeric_gradient(x.data(), |v| eval(&mut model.clone(), with(x.shape(), v)))?;

    let mut picks: Vec<(usize, usize, f64)> = Vec::new();
    let mut index = 0;
    model.for_each_param(|p| {
        for _ in 0..entries_per_param {
            let e = rng.random_range(0..p.value.len());
            picks.push((index, e, p.grad.data()[e]));
        }
        index += 1;
    });
    for (target, e, grad) in picks {
        let probe = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let mut k = 0;
            m.for_each_param(|p| {
                if k == target {
                    p.value.data_mut()[e] += delta;
                }
                k += 1;
            });
            eval(&mut m, x.clone())
        };
        analytic.push(grad);
        numeric.push((probe(STEP)? - probe(-STEP)?) / (2.0 * STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn relative_error_scale_free() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(&[2.0, -3.0], &[2.0, -3.0]), 0.0);
    }

    #[test]
    fn numeric_gradient_of_cubic() {
        let g = numeric_gradient(&[1.0, -2.0], |v| Ok(v[0].powi(3) + 2.0 * v[1])).unwrap();
        assert!((g[0] - 3.0).abs() < 1e-8 && (g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn every_layer_passes_once() {
        let mut rng = substream(11, "gradcheck", 0);
        for name in LAYERS {
            let e = check_layer(name, &mut rng).unwrap();
            assert!(e <= 1e-5, "{name}: {e}");
        }
        assert!(check_layer("softmax", &mut rng).is_err());
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let mut rng = substream(12, "gradcheck", 0);
        let x = normal(&mut rng, &[1, 1, 3, 3]);
        let r = normal(&mut rng, &[1, 1, 3, 3]);
        // Claiming slope 1 for leaky ReLU everywhere must fail on negative inputs.
        let numeric = numeric_gradient(x.data(), |v| Ok(ops::leaky_relu(&with(x.shape(), v), 0.1).dot(&r))).unwrap();
        assert!(relative_error(r.data(), &numeric) > 1e-3);
    }
}

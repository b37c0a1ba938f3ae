//! Forward and backward kernels for every layer type, as plain functions.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Sum per-item partial results in item order, so the result does not
/// depend on how rayon scheduled the items.
fn sum_partials<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a = *a + b;
        }
    }
    acc
}

/// Writes the `k×k` patches of one `[c, h, w]` item into columns
/// `offset..offset + h·w` of a `[c·k·k, ld]` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T], ld: usize, offset: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut col[r * ld + offset..r * ld + offset + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // Valid output columns are those with 0 <= x + dx < w.
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(lo as isize) as usize;
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    out[lo..hi].copy_from_slice(&src[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into one item.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T], ld: usize, offset: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &col[r * ld + offset..r * ld + offset + hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let lo = (-dxo).max(0) as usize;
                    let hi = (w as isize - dxo).min(w as isize).max(lo as isize) as usize;
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    for (d, &v) in dst[(lo as isize + dxo) as usize..(hi as isize + dxo) as usize].iter_mut().zip(&src[lo..hi]) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// `[N, C, hw]` to `[C, N·hw]`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            out[ch * n * hw + i * hw..ch * n * hw + (i + 1) * hw].copy_from_slice(&x[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        }
    }
    out
}

/// `[C, N·hw]` to `[N, C, hw]`.
fn to_batch_major<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, out: &mut [T]) {
    for i in 0..n {
        for ch in 0..c {
            out[(i * c + ch) * hw..(i * c + ch + 1) * hw].copy_from_slice(&x[ch * n * hw + i * hw..ch * n * hw + (i + 1) * hw]);
        }
    }
}

fn check_conv(x: &Tensor<impl Scalar>, kernel: &Tensor<impl Scalar>, bias_len: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, kcin, kh, kw) = kernel.dims4()?;
    if kcin != cin || kh != kw || kh % 2 == 0 || bias_len != cout {
        return Err(Error::Shape(format!(
            "conv2d input {:?}, kernel {:?}, bias {bias_len}",
            x.shape(),
            kernel.shape()
        )));
    }
    Ok((n, cin, h, w, cout, kh))
}

/// Same-padded (zero) stride-1 cross-correlation.
/// `x: [N, Cin, H, W]`, `kernel: [Cout, Cin, k, k]` with odd `k`.
///
/// The whole batch goes through one GEMM over an `[Cin·k·k, N·H·W]` patch
/// matrix; a single call keeps the summation order fixed.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout, k) = check_conv(x, kernel, bias.len())?;
    let hw = h * w;
    let ld = n * hw;
    let ckk = cin * k * k;
    let col = if k == 1 {
        to_channel_major(x.data(), n, cin, hw)
    } else {
        let mut col = vec![T::zero(); ckk * ld];
        for i in 0..n {
            im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, w, k, &mut col, ld, i * hw);
        }
        col
    };
    let mut y = vec![T::zero(); cout * ld];
    T::gemm(cout, ckk, ld, kernel.data(), false, &col, false, &mut y, false);
    for (co, b) in bias.iter().enumerate() {
        y[co * ld..(co + 1) * ld].iter_mut().for_each(|v| *v = *v + *b);
    }
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    to_batch_major(&y, n, cout, hw, out.data_mut());
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (cout, _, _, _) = kernel.dims4()?;
    let (n, cin, h, w, _, k) = check_conv(x, kernel, cout)?;
    if grad_out.shape() != [n, cout, h, w] {
        return Err(Error::Shape(format!("conv2d grad {:?}", grad_out.shape())));
    }
    let hw = h * w;
    let ld = n * hw;
    let ckk = cin * k * k;
    let dy = to_channel_major(grad_out.data(), n, cout, hw);
    let mut col = if k == 1 {
        to_channel_major(x.data(), n, cin, hw)
    } else {
        let mut col = vec![T::zero(); ckk * ld];
        for i in 0..n {
            im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, w, k, &mut col, ld, i * hw);
        }
        col
    };
    let mut dw = vec![T::zero(); cout * ckk];
    T::gemm(cout, ld, ckk, &dy, false, &col, true, &mut dw, false);
    T::gemm(ckk, cout, ld, kernel.data(), true, &dy, false, &mut col, false);
    let mut dx = Tensor::zeros(x.shape());
    if k == 1 {
        to_batch_major(&col, n, cin, hw, dx.data_mut());
    } else {
        for (i, dxi) in dx.data_mut().chunks_mut(cin * hw).enumerate() {
            col2im(&col, cin, h, w, k, dxi, ld, i * hw);
        }
    }
    let db = (0..cout).map(|co| dy[co * ld..(co + 1) * ld].iter().copied().sum()).collect();
    Ok((dx, Tensor::new(kernel.shape(), dw)?, db))
}

/// Routing of each pooled output to the flat input index it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRouting {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<u32>,
}

/// 2×2 max pooling with stride 2. Ties go to the first maximum in scan order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolRouting)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even height and width, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let d = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if d[j] > d[best] {
                        best = j;
                    }
                }
                out.push(d[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, PoolRouting { input_shape: x.shape().to_vec(), argmax }))
}

pub fn maxpool2_backward<T: Scalar>(routing: &PoolRouting, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != routing.argmax.len() {
        return Err(Error::Shape("max-pool gradient does not match routing".into()));
    }
    let mut dx = Tensor::zeros(&routing.input_shape);
    let d = dx.data_mut();
    for (g, &j) in grad_out.data().iter().zip(&routing.argmax) {
        d[j as usize] = d[j as usize] + *g;
    }
    Ok(dx)
}

fn check_tconv(x: &Tensor<impl Scalar>, kernel: &Tensor<impl Scalar>, bias_len: usize) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = x.dims4()?;
    let (kcin, cout, kh, kw) = kernel.dims4()?;
    if kcin != cin || kh != 2 || kw != 2 || bias_len != cout {
        return Err(Error::Shape(format!(
            "transposed conv input {:?}, kernel {:?}, bias {bias_len}",
            x.shape(),
            kernel.shape()
        )));
    }
    Ok((n, cin, h, w, cout))
}

/// 2×2 stride-2 transposed convolution; `kernel: [Cin, Cout, 2, 2]`.
/// Output is `[N, Cout, 2H, 2W]` with
/// `y[co, 2i+a, 2j+b] = bias[co] + Σ_ci x[ci, i, j] · kernel[ci, co, a, b]`.
pub fn transposed_conv2<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout) = check_tconv(x, kernel, bias.len())?;
    let hw = h * w;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    out.data_mut().par_chunks_mut(cout * ho * wo).enumerate().for_each(|(i, y)| {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        let mut y4 = vec![T::zero(); cout * 4 * hw];
        T::gemm(cout * 4, cin, hw, kernel.data(), true, xi, false, &mut y4, false);
        for co in 0..cout {
            for a in 0..2 {
                for b in 0..2 {
                    let src = &y4[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for r in 0..h {
                        for c in 0..w {
                            y[co * ho * wo + (2 * r + a) * wo + 2 * c + b] = src[r * w + c] + bias[co];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

pub fn transposed_conv2_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (_, cout, _, _) = kernel.dims4()?;
    let (n, cin, h, w, _) = check_tconv(x, kernel, cout)?;
    let hw = h * w;
    let (ho, wo) = (2 * h, 2 * w);
    if grad_out.shape() != [n, cout, ho, wo] {
        return Err(Error::Shape(format!("transposed conv grad {:?}", grad_out.shape())));
    }
    let mut dx = Tensor::zeros(x.shape());
    let parts: Vec<(Vec<T>, Vec<T>)> = dx
        .data_mut()
        .par_chunks_mut(cin * hw)
        .enumerate()
        .map(|(i, dxi)| {
            let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
            let dy = &grad_out.data()[i * cout * ho * wo..(i + 1) * cout * ho * wo];
            let mut dy4 = vec![T::zero(); cout * 4 * hw];
            let mut db = vec![T::zero(); cout];
            for co in 0..cout {
                for a in 0..2 {
                    for b in 0..2 {
                        let dst = &mut dy4[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                        for r in 0..h {
                            for c in 0..w {
                                dst[r * w + c] = dy[co * ho * wo + (2 * r + a) * wo + 2 * c + b];
                            }
                        }
                    }
                }
                db[co] = dy[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
            }
            T::gemm(cin, cout * 4, hw, kernel.data(), false, &dy4, false, dxi, false);
            let mut dw = vec![T::zero(); cin * cout * 4];
            T::gemm(cin, hw, cout * 4, xi, false, &dy4, true, &mut dw, false);
            (dw, db)
        })
        .collect();
    let (dws, dbs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let dw = Tensor::new(kernel.shape(), sum_partials(dws, cin * cout * 4))?;
    Ok((dx, dw, sum_partials(dbs, cout)))
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { alpha * v }).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Derivative is 1 for positive inputs and `alpha` otherwise (including 0).
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, alpha: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { alpha * g })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the per-element scale
/// (`0` or `1/(1-p)`); eval mode and `p == 0` are the identity.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, mode: Mode, rng: &mut crate::rng::Rng) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::from_f64(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok((Tensor::new(x.shape(), data)?, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => {
            let data = grad_out.data().iter().zip(m).map(|(&g, &s)| g * s).collect();
            Tensor::new(grad_out.shape(), data).expect("same shape")
        }
    }
}

/// Intermediates kept by train-mode batch norm for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
}

fn channel_planes(n: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |i| (i * c + ch) * hw..(i * c + ch + 1) * hw)
}

/// Train-mode batch norm: per-channel statistics over `(N, H, W)`.
pub fn batchnorm_train<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels got {} gammas", gamma.len())));
    }
    let hw = h * w;
    let m = n * hw;
    if m < 2 {
        return Err(Error::Shape("batch norm in train mode needs at least two values per channel".into()));
    }
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let d = x.data();
    for ch in 0..c {
        // Accumulate in f64 regardless of T.
        let mut s = 0.0f64;
        for r in channel_planes(n, c, hw, ch) {
            s += d[r].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m as f64;
        let mut ss = 0.0f64;
        for r in channel_planes(n, c, hw, ch) {
            ss += d[r].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
        let v = ss / m as f64;
        let is = 1.0 / (v + eps).sqrt();
        mean[ch] = T::from_f64(mu);
        var[ch] = T::from_f64(v);
        inv_std[ch] = T::from_f64(is);
        let (mu_t, is_t) = (T::from_f64(mu), T::from_f64(is));
        for r in channel_planes(n, c, hw, ch) {
            for j in r {
                let xh = (d[j] - mu_t) * is_t;
                xhat.data_mut()[j] = xh;
                y.data_mut()[j] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((y, BatchNormCache { xhat, inv_std, mean, var }))
}

pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!("batch norm over {c} channels: parameter length mismatch")));
    }
    let hw = h * w;
    let mut y = x.clone();
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + T::from_f64(eps)).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for r in channel_planes(n, c, hw, ch) {
            y.data_mut()[r].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    Ok(y)
}

/// `(d_input, d_gamma, d_beta)` for train-mode batch norm.
pub fn batchnorm_backward<T: Scalar>(cache: &BatchNormCache<T>, gamma: &[T], grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if cache.xhat.shape() != grad_out.shape() {
        return Err(Error::Shape("batch norm gradient shape mismatch".into()));
    }
    let hw = h * w;
    let m = (n * hw) as f64;
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let mut dx = Tensor::zeros(grad_out.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
        for r in channel_planes(n, c, hw, ch) {
            for j in r {
                sdy += dy[j].as_f64();
                sdyx += (dy[j] * xh[j]).as_f64();
            }
        }
        dbeta[ch] = T::from_f64(sdy);
        dgamma[ch] = T::from_f64(sdyx);
        let k = gamma[ch] * cache.inv_std[ch] / T::from_f64(m);
        let (sdy_t, sdyx_t, m_t) = (T::from_f64(sdy), T::from_f64(sdyx), T::from_f64(m));
        for r in channel_planes(n, c, hw, ch) {
            for j in r {
                dx.data_mut()[j] = k * (m_t * dy[j] - sdy_t - xh[j] * sdyx_t);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Weighted softmax cross-entropy over `[N, K, H, W]` logits.
///
/// `loss = (1/P) Σ_pixels w[t] · (−log softmax(logits)[t])` with `P = N·H·W`;
/// the returned gradient is with respect to the logits.
pub fn weighted_softmax_crossentropy<T: Scalar>(logits: &Tensor<T>, targets: &[u8], weights: &[f64]) -> Result<(f64, Tensor<T>)> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(Error::Shape(format!("{} targets for {} pixels", targets.len(), n * hw)));
    }
    if weights.len() != k {
        return Err(Error::Shape(format!("{} class weights for {k} classes", weights.len())));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::Validation(format!("target class {t} out of range")));
    }
    let pixels = (n * hw) as f64;
    let d = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let g = grad.data_mut();
    let mut loss = 0.0f64;
    let mut probs = vec![0.0f64; k];
    for i in 0..n {
        for p in 0..hw {
            let at = |c: usize| (i * k + c) * hw + p;
            let max = (0..k).map(|c| d[at(c)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = (d[at(c)].as_f64() - max).exp();
                z += *pr;
            }
            let t = targets[i * hw + p] as usize;
            let wt = weights[t];
            loss += wt * (z.ln() - (d[at(t)].as_f64() - max));
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == t { 1.0 } else { 0.0 };
                g[at(c)] = T::from_f64(wt * (pr / z - onehot) / pixels);
            }
        }
    }
    Ok((loss / pixels, grad))
}

/// Softmax over the channel axis of `[N, K, H, W]`.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let o = out.data_mut();
    for i in 0..n {
        for p in 0..hw {
            let at = |c: usize| (i * k + c) * hw + p;
            let max = (0..k).map(|c| d[at(c)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (d[at(c)].as_f64() - max).exp()).sum();
            for c in 0..k {
                o[at(c)] = T::from_f64((d[at(c)].as_f64() - max).exp() / z);
            }
        }
    }
    Ok(out)
}

/// `(λ/2) Σ w²` over the given kernels, with gradient `λ w` for each.
pub fn l2_penalty<T: Scalar>(kernels: &[&Tensor<T>], lambda: f64) -> (f64, Vec<Tensor<T>>) {
    let mut total = 0.0;
    let grads = kernels
        .iter()
        .map(|k| {
            total += k.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            Tensor::new(k.shape(), k.data().iter().map(|&v| T::from_f64(lambda) * v).collect()).expect("same shape")
        })
        .collect();
    (0.5 * lambda * total, grads)
}

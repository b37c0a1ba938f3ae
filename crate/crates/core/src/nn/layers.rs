//! Stateful layers: parameters, gradients and the activations their
//! backward pass needs.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::init::he_init;
use super::ops::{self, BatchNormCache, Mode, PoolRouting};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether L2 regularization applies (convolution kernels only).
    pub decay: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, decay }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let weight = he_init(&[cout, cin, k, k], cin * k * k, rng)?;
        Ok(Conv2d { weight: Param::new(weight, true), bias: Param::new(Tensor::zeros(&[cout]), false), input: None })
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d(&x, &self.weight.value, self.bias.value.data())?;
        if mode == Mode::Train {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| Error::Training("conv backward without forward".into()))?;
        let (dx, dw, db) = ops::conv2d_backward(&x, &self.weight.value, grad)?;
        self.weight.grad.add_assign(&dw);
        for (g, d) in self.bias.grad.data_mut().iter_mut().zip(db) {
            *g = *g + d;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        let weight = he_init(&[cin, cout, 2, 2], cin * 4, rng)?;
        Ok(ConvTranspose2 { weight: Param::new(weight, true), bias: Param::new(Tensor::zeros(&[cout]), false), input: None })
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::transposed_conv2(&x, &self.weight.value, self.bias.value.data())?;
        if mode == Mode::Train {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| Error::Training("transposed conv backward without forward".into()))?;
        let (dx, dw, db) = ops::transposed_conv2_backward(&x, &self.weight.value, grad)?;
        self.weight.grad.add_assign(&dw);
        for (g, d) in self.bias.grad.data_mut().iter_mut().zip(db) {
            *g = *g + d;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BatchNormCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(c: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::filled(&[c], T::one()), false),
            beta: Param::new(Tensor::zeros(&[c]), false),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            momentum,
            eps,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => ops::batchnorm_eval(
                &x,
                self.gamma.value.data(),
                self.beta.value.data(),
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
            Mode::Train => {
                let (y, cache) = ops::batchnorm_train(&x, self.gamma.value.data(), self.beta.value.data(), self.eps)?;
                let (n, _, h, w) = x.dims4()?;
                let m = (n * h * w) as f64;
                let mom = self.momentum;
                for c in 0..self.running_mean.len() {
                    let unbiased = cache.var[c].as_f64() * m / (m - 1.0);
                    self.running_mean[c] =
                        T::from_f64((1.0 - mom) * self.running_mean[c].as_f64() + mom * cache.mean[c].as_f64());
                    self.running_var[c] = T::from_f64((1.0 - mom) * self.running_var[c].as_f64() + mom * unbiased);
                }
                self.cache = Some(cache);
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| Error::Training("batch norm backward without forward".into()))?;
        let (dx, dg, db) = ops::batchnorm_backward(&cache, self.gamma.value.data(), grad)?;
        for (g, d) in self.gamma.grad.data_mut().iter_mut().zip(dg) {
            *g = *g + d;
        }
        for (g, d) in self.beta.grad.data_mut().iter_mut().zip(db) {
            *g = *g + d;
        }
        Ok(dx)
    }
}

/// conv 3×3 → leaky ReLU → dropout → batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    leakiness: f64,
    dropout_p: f64,
    pre_activation: Option<Tensor<T>>,
    dropout_mask: Option<Vec<T>>,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new(cin: usize, cout: usize, leakiness: f64, dropout_p: f64, bn_momentum: f64, bn_eps: f64, rng: &mut Rng) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv2d::new(cin, cout, 3, rng)?,
            bn: BatchNorm2d::new(cout, bn_momentum, bn_eps),
            leakiness,
            dropout_p,
            pre_activation: None,
            dropout_mask: None,
        })
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let z = self.conv.forward(x, mode)?;
        let a = ops::leaky_relu(&z, T::from_f64(self.leakiness));
        let (d, mask) = ops::dropout(&a, self.dropout_p, mode, rng)?;
        if mode == Mode::Train {
            self.pre_activation = Some(z);
            self.dropout_mask = mask;
        }
        let y = self.bn.forward(d, mode)?;
        debug_assert!(y.all_finite(), "non-finite activation");
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.bn.backward(grad)?;
        let g = ops::dropout_backward(self.dropout_mask.take().as_deref(), &g);
        let z = self.pre_activation.take().ok_or_else(|| Error::Training("unit backward without forward".into()))?;
        let g = ops::leaky_relu_backward(&z, &g, T::from_f64(self.leakiness));
        self.conv.backward(&g)
    }
}

/// 2×2 stride-2 max pooling that remembers its routing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaxPool2 {
    routing: Option<PoolRouting>,
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, r) = ops::maxpool2(x)?;
        if mode == Mode::Train {
            self.routing = Some(r);
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.routing.take().ok_or_else(|| Error::Training("pool backward without forward".into()))?;
        ops::maxpool2_backward(&r, grad)
    }
}

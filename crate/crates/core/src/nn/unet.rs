//! 2D U-net with leaky-ReLU/dropout/batch-norm conv units.
//!
//! Analysis level `l` (1-based) applies two units, going to `f·2^(l-1)` and
//! then `f·2^l` channels, so filters double before each pooling step. The
//! synthesis path upsamples with a learned 2×2 stride-2 transposed
//! convolution that halves channels, concatenates the matching analysis
//! output, and applies two units back down to that level's width. A final
//! 1×1 convolution produces the class logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::layers::{Conv2d, ConvTranspose2, ConvUnit, MaxPool2, Param};
use super::ops::Mode;
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub leakiness: f64,
    pub dropout_p: f64,
    pub l2_lambda: f64,
    pub class_weights: Vec<f64>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 5,
            base_filters: 16,
            in_channels: 2,
            out_classes: 3,
            kernel_size: 3,
            pool_size: 2,
            leakiness: 0.01,
            dropout_p: 0.1,
            l2_lambda: 1e-5,
            class_weights: vec![0.01, 1.0, 1.0],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Channel widths of one analysis level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelWidths {
    pub input: usize,
    pub mid: usize,
    pub output: usize,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_filters < 1 || self.in_channels < 1 || self.out_classes < 2 {
            return Err(Error::Config("depth, filters, channels must be positive and classes >= 2".into()));
        }
        if self.kernel_size != 3 || self.pool_size != 2 {
            return Err(Error::Config("only 3x3 kernels and 2x2 pooling are implemented".into()));
        }
        if self.class_weights.len() != self.out_classes {
            return Err(Error::Config("one class weight per output class is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) || self.l2_lambda < 0.0 || self.leakiness < 0.0 {
            return Err(Error::Config("dropout in [0,1), non-negative l2 and leakiness required".into()));
        }
        Ok(())
    }

    /// Height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn encoder_widths(&self) -> Vec<LevelWidths> {
        (1..=self.depth)
            .map(|l| LevelWidths {
                input: if l == 1 { self.in_channels } else { self.base_filters << (l - 1) },
                mid: self.base_filters << (l - 1),
                output: self.base_filters << l,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLevel<T> {
    pub a: ConvUnit<T>,
    pub b: ConvUnit<T>,
    pool: MaxPool2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLevel<T> {
    pub up: ConvTranspose2<T>,
    pub a: ConvUnit<T>,
    pub b: ConvUnit<T>,
    up_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub encoder: Vec<EncoderLevel<T>>,
    /// Deepest level first.
    pub decoder: Vec<DecoderLevel<T>>,
    pub head: Conv2d<T>,
    /// Training epochs completed when this model was captured.
    pub epoch: u32,
}

impl<T: Scalar> UNet<T> {
    /// Builds a freshly initialized network.
    pub fn new(config: &UNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let unit = |cin, cout, rng: &mut Rng| ConvUnit::new(cin, cout, c.leakiness, c.dropout_p, c.bn_momentum, c.bn_eps, rng);
        let widths = c.encoder_widths();
        let mut encoder = Vec::with_capacity(c.depth);
        for w in &widths {
            encoder.push(EncoderLevel { a: unit(w.input, w.mid, rng)?, b: unit(w.mid, w.output, rng)?, pool: MaxPool2::default() });
        }
        let mut decoder = Vec::with_capacity(c.depth - 1);
        for l in (0..c.depth - 1).rev() {
            let below = widths[l + 1].output;
            let skip = widths[l].output;
            decoder.push(DecoderLevel {
                up: ConvTranspose2::new(below, below / 2, rng)?,
                a: unit(below / 2 + skip, skip, rng)?,
                b: unit(skip, skip, rng)?,
                up_channels: below / 2,
            });
        }
        let last = widths[0].output;
        let head = Conv2d::new(if c.depth > 1 { last } else { widths[0].output }, c.out_classes, 1, rng)?;
        Ok(UNet { config: c.clone(), encoder, decoder, head, epoch: 0 })
    }

    /// Logits `[N, classes, H, W]` for input `[N, in_channels, H, W]`.
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.config.size_multiple();
        if c != self.config.in_channels || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {:?}: need {} channels and H, W divisible by {m}",
                x.shape(),
                self.config.in_channels
            )));
        }
        let depth = self.encoder.len();
        let mut skips = Vec::with_capacity(depth - 1);
        let mut h = x;
        for (l, level) in self.encoder.iter_mut().enumerate() {
            h = level.a.forward(h, mode, rng)?;
            h = level.b.forward(h, mode, rng)?;
            if l + 1 < depth {
                let pooled = level.pool.forward(&h, mode)?;
                skips.push(h);
                h = pooled;
            }
        }
        for level in self.decoder.iter_mut() {
            let up = level.up.forward(h, mode)?;
            let skip = skips.pop().expect("one skip per decoder level");
            h = Tensor::concat_channels(&up, &skip)?;
            h = level.a.forward(h, mode, rng)?;
            h = level.b.forward(h, mode, rng)?;
        }
        let logits = self.head.forward(h, mode)?;
        debug_assert!(logits.all_finite(), "non-finite logits");
        Ok(logits)
    }

    /// Backpropagates `d loss / d logits` through the last train-mode
    /// forward, accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let depth = self.encoder.len();
        let mut g = self.head.backward(grad_logits)?;
        // Skip gradients indexed by encoder level.
        let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
        // Shallowest synthesis level ran last, so it unwinds first.
        for (k, level) in self.decoder.iter_mut().enumerate().rev() {
            g = level.b.backward(&g)?;
            g = level.a.backward(&g)?;
            let (d_up, d_skip) = g.split_channels(level.up_channels)?;
            skip_grads[depth - 2 - k] = Some(d_skip);
            g = level.up.backward(&d_up)?;
        }
        for l in (0..depth).rev() {
            let level = &mut self.encoder[l];
            if l + 1 < depth {
                g = level.pool.backward(&g)?;
                g.add_assign(skip_grads[l].as_ref().expect("skip gradient"));
            }
            g = level.b.backward(&g)?;
            g = level.a.backward(&g)?;
        }
        Ok(g)
    }

    /// Visits trainable parameters in descriptor order with stable names.
    pub fn for_each_named_param(&mut self, mut f: impl FnMut(&str, &mut Param<T>)) {
        let unit = |name: &str, u: &mut ConvUnit<T>, f: &mut dyn FnMut(&str, &mut Param<T>)| {
            f(&format!("{name}.conv.weight"), &mut u.conv.weight);
            f(&format!("{name}.conv.bias"), &mut u.conv.bias);
            f(&format!("{name}.bn.gamma"), &mut u.bn.gamma);
            f(&format!("{name}.bn.beta"), &mut u.bn.beta);
        };
        for (l, level) in self.encoder.iter_mut().enumerate() {
            unit(&format!("enc{}.a", l + 1), &mut level.a, &mut f);
            unit(&format!("enc{}.b", l + 1), &mut level.b, &mut f);
        }
        let depth = self.encoder.len();
        for (k, level) in self.decoder.iter_mut().enumerate() {
            let name = format!("dec{}", depth - 1 - k);
            f(&format!("{name}.up.weight"), &mut level.up.weight);
            f(&format!("{name}.up.bias"), &mut level.up.bias);
            unit(&format!("{name}.a"), &mut level.a, &mut f);
            unit(&format!("{name}.b"), &mut level.b, &mut f);
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    pub fn for_each_param(&mut self, mut f: impl FnMut(&mut Param<T>)) {
        self.for_each_named_param(|_, p| f(p));
    }

    /// Batch-norm units in descriptor order.
    pub fn units_mut(&mut self) -> Vec<&mut ConvUnit<T>> {
        let mut out = Vec::new();
        for level in &mut self.encoder {
            out.push(&mut level.a);
            out.push(&mut level.b);
        }
        for level in &mut self.decoder {
            out.push(&mut level.a);
            out.push(&mut level.b);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(|p| p.zero_grad());
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(|p| n += p.value.len());
        n
    }

    /// Adds the L2 penalty gradient to decayed kernels and returns the penalty.
    pub fn apply_l2(&mut self) -> f64 {
        let lambda = self.config.l2_lambda;
        let mut total = 0.0;
        self.for_each_param(|p| {
            if p.decay {
                let (pen, grads) = super::ops::l2_penalty(&[&p.value], lambda);
                total += pen;
                p.grad.add_assign(&grads[0]);
            }
        });
        total
    }

    /// Encoder output channels per level, read back from the built layers.
    pub fn encoder_output_channels(&self) -> Vec<usize> {
        self.encoder.iter().map(|l| l.b.conv.weight.value.shape()[0]).collect()
    }
}

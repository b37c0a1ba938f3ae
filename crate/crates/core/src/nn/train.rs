//! Slice datasets and the Adam training loop with best-validation selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::volume::{LabelMap, Volume};

use super::adam::{adam_step, AdamParams, AdamState};
use super::ops::{weighted_softmax_crossentropy, Mode};
use super::tensor::Tensor;
use super::unet::UNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub adam: AdamParams,
    pub lr_initial: f64,
    pub lr_late: f64,
    /// Last epoch (1-based) run at `lr_initial`.
    pub lr_drop_epoch: u32,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamParams::default(),
            lr_initial: 1e-4,
            lr_late: 1e-5,
            lr_drop_epoch: 150,
            epochs: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.lr_initial > 0.0 && self.lr_late > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: u32) -> f64 {
        if epoch <= self.lr_drop_epoch {
            self.lr_initial
        } else {
            self.lr_late
        }
    }
}

/// One two-channel axial slice and its target labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    /// `[channels, h, w]`, row-major.
    pub input: Vec<f32>,
    pub target: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub slices: Vec<Slice>,
}

impl SliceDataset {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        SliceDataset { channels, height, width, slices: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Appends every axial slice of a subject, zero-padding height and width
    /// up to `self.height` × `self.width`.
    pub fn push_volume(&mut self, channels: &[&Volume], labels: &LabelMap) -> Result<()> {
        if channels.len() != self.channels {
            return Err(Error::Shape(format!("expected {} channels, got {}", self.channels, channels.len())));
        }
        let [nx, ny, nz] = labels.dims;
        if channels.iter().any(|c| c.dims != labels.dims) {
            return Err(Error::Shape("channel and label dims differ".into()));
        }
        if nx > self.width || ny > self.height {
            return Err(Error::Shape(format!("slice {nx}x{ny} exceeds dataset size {}x{}", self.width, self.height)));
        }
        let plane = self.height * self.width;
        for z in 0..nz {
            let mut input = vec![0f32; self.channels * plane];
            let mut target = vec![0u8; plane];
            for y in 0..ny {
                for x in 0..nx {
                    let src = x + nx * (y + ny * z);
                    let dst = y * self.width + x;
                    for (c, v) in channels.iter().enumerate() {
                        input[c * plane + dst] = v.data[src];
                    }
                    target[dst] = labels.data[src];
                }
            }
            self.slices.push(Slice { input, target });
        }
        Ok(())
    }

    /// Stacks the given slices into a `[N, C, H, W]` batch and its targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<u8>)> {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * self.channels * plane);
        let mut targets = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.slices[i].input);
            targets.extend_from_slice(&self.slices[i].target);
        }
        Ok((Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)?, targets))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Writes the log as `epoch,train_loss,val_loss,lr` CSV.
pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for row in log {
        s.push_str(&format!("{},{:e},{:e},{:e}\n", row.epoch, row.train_loss, row.val_loss, row.lr));
    }
    s
}

pub fn log_from_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("training log line {}: {line:?}", n + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        rows.push(EpochLog {
            epoch: f[0].parse().map_err(|_| bad())?,
            train_loss: f[1].parse().map_err(|_| bad())?,
            val_loss: f[2].parse().map_err(|_| bad())?,
            lr: f[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Training state that survives between epochs.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: UNet<f32>,
    pub best: UNet<f32>,
    pub best_val: f64,
    pub log: Vec<EpochLog>,
    adam: Vec<AdamState<f32>>,
    step: u64,
}

impl Trainer {
    pub fn new(mut model: UNet<f32>) -> Self {
        let adam = Self::fresh_moments(&mut model);
        let best = model.clone();
        Trainer { model, best, best_val: f64::INFINITY, log: Vec::new(), adam, step: 0 }
    }

    /// Continues from a saved model, its best-so-far copy, the log and the
    /// optimizer state written by [`Trainer::encode_optimizer`].
    pub fn resume(mut model: UNet<f32>, best: UNet<f32>, log: Vec<EpochLog>, optimizer: &[u8]) -> Result<Self> {
        if log.len() != model.epoch as usize {
            return Err(Error::Training(format!("log has {} rows but the model finished {} epochs", log.len(), model.epoch)));
        }
        let best_val = log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        let mut adam = Self::fresh_moments(&mut model);
        let step = decode_optimizer(optimizer, &mut adam)?;
        Ok(Trainer { model, best, best_val, log, adam, step })
    }

    /// Adam step counter and moments: magic, u64 step, then `m` and `v` of
    /// every parameter tensor in descriptor order as little-endian f32.
    pub fn encode_optimizer(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(OPTIMIZER_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        for st in &self.adam {
            for v in st.m.iter().chain(&st.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn fresh_moments(model: &mut UNet<f32>) -> Vec<AdamState<f32>> {
        let mut states = Vec::new();
        model.for_each_param(|p| states.push(AdamState::new(p.value.len())));
        states
    }

    pub fn epochs_done(&self) -> u32 {
        self.model.epoch
    }

    /// Runs one epoch of training followed by validation.
    pub fn run_epoch(&mut self, train: &SliceDataset, val: &SliceDataset, config: &TrainConfig) -> Result<EpochLog> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Training("training and validation sets must be nonempty".into()));
        }
        let epoch = self.model.epoch + 1;
        let lr = config.learning_rate(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut substream(config.seed, "batching", epoch as u64));
        let mut dropout_rng = substream(config.seed, "dropout", epoch as u64);
        let weights = self.model.config.class_weights.clone();

        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (x, targets) = train.batch(chunk)?;
            self.model.zero_grad();
            let logits = self.model.forward(x, Mode::Train, &mut dropout_rng)?;
            let (ce, grad) = weighted_softmax_crossentropy(&logits, &targets, &weights)?;
            self.model.backward(&grad)?;
            let l2 = self.model.apply_l2();
            let loss = ce + l2;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss {loss} at epoch {epoch}, batch {batches}")));
            }
            self.step += 1;
            let (step, hp) = (self.step, config.adam);
            let mut k = 0;
            let adam = &mut self.adam;
            self.model.for_each_param(|p| {
                adam_step(p.value.data_mut(), p.grad.data(), &mut adam[k], step, lr, &hp);
                k += 1;
            });
            total += loss;
            batches += 1;
        }
        self.model.epoch = epoch;
        let val_loss = validation_loss(&mut self.model, val, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("non-finite validation loss at epoch {epoch}")));
        }
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best = self.model.clone();
        }
        let row = EpochLog { epoch, train_loss: total / batches as f64, val_loss, lr };
        self.log.push(row);
        Ok(row)
    }

    /// Runs until `config.epochs`, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        train: &SliceDataset,
        val: &SliceDataset,
        config: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<()> {
        config.validate()?;
        while self.model.epoch < config.epochs {
            let row = self.run_epoch(train, val, config)?;
            on_epoch(&row, self)?;
        }
        Ok(())
    }
}

pub const OPTIMIZER_MAGIC: &[u8; 8] = b"SEGNLOPT";

fn decode_optimizer(bytes: &[u8], states: &mut [AdamState<f32>]) -> Result<u64> {
    let expected = 16 + states.iter().map(|s| 8 * s.m.len()).sum::<usize>();
    if bytes.len() != expected || &bytes[..8] != OPTIMIZER_MAGIC {
        return Err(Error::Format(format!("optimizer state: expected {expected} bytes with magic, got {}", bytes.len())));
    }
    let step = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let mut floats = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for st in states {
        for v in st.m.iter_mut().chain(st.v.iter_mut()) {
            *v = floats.next().expect("length checked");
        }
    }
    Ok(step)
}

/// Pixel-weighted mean cross-entropy over a dataset in eval mode.
pub fn validation_loss(model: &mut UNet<f32>, data: &SliceDataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Training("empty validation set".into()));
    }
    let weights = model.config.class_weights.clone();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut unused = substream(0, "eval", 0);
    let mut sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, targets) = data.batch(chunk)?;
        let logits = model.forward(x, Mode::Eval, &mut unused)?;
        let (ce, _) = weighted_softmax_crossentropy(&logits, &targets, &weights)?;
        sum += ce * chunk.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

/// Fisher-Yates with the crate's RNG so orderings are reproducible.
fn shuffle(v: &mut [usize], rng: &mut Rng) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

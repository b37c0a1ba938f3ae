//! Seeded priority-flood watershed used as the pseudo-label generator.
//!
//! The flood surface is the smoothed channel-1 intensity plus optional
//! white "barrier" noise. Two seeds, one per hemisphere, are flooded
//! simultaneously in nondecreasing priority order (6-connectivity, FIFO
//! among equal priorities) until the next priority exceeds a quantile of the
//! in-mask surface. Seed jitter and barrier noise are the knobs that turn
//! this into a noisy labeler.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dsc_per_subject, Selector};
use crate::phantom::Subject;
use crate::preprocess::{neighbor_offsets, nearest_rank, offset, preprocess_channels, BrainMask, Preprocessed};
use crate::rng::{substream, Rng};
use crate::volume::{coords, LabelMap, Volume, BACKGROUND, LEFT, RIGHT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatershedConfig {
    /// Gaussian smoothing of the flood surface, in voxels.
    pub smoothing_sigma: f64,
    /// Flooding stops once priorities exceed this quantile of the in-mask surface.
    pub stop_quantile: f64,
    /// Gaussian jitter applied to each automatically selected seed (voxels).
    pub seed_jitter_std: f64,
    /// Std of white noise added to the flood surface.
    pub barrier_noise_std: f64,
    /// A flood that claims fewer voxels than this for either side counts as a failure.
    pub min_region_voxels: usize,
    pub seed: u64,
}

impl Default for WatershedConfig {
    fn default() -> Self {
        WatershedConfig {
            smoothing_sigma: 1.0,
            stop_quantile: 0.35,
            seed_jitter_std: 2.0,
            barrier_noise_std: 0.05,
            min_region_voxels: 20,
            seed: 0,
        }
    }
}

impl WatershedConfig {
    /// All noise knobs off.
    pub fn noiseless() -> Self {
        WatershedConfig { seed_jitter_std: 0.0, barrier_noise_std: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_sigma >= 0.0) {
            return Err(Error::Config("smoothing sigma must be >= 0".into()));
        }
        if !(self.stop_quantile > 0.0 && self.stop_quantile <= 1.0) {
            return Err(Error::Config("stop quantile must lie in (0, 1]".into()));
        }
        if !(self.seed_jitter_std >= 0.0 && self.barrier_noise_std >= 0.0) {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    pub left: [usize; 3],
    pub right: [usize; 3],
}

/// Separable Gaussian blur with replicated borders. `sigma == 0` is the identity.
pub fn gaussian_smooth(volume: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return volume.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let dims = volume.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut cur: Vec<f64> = volume.data.iter().map(|&v| f64::from(v)).collect();
    let mut next = vec![0.0; cur.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        for (i, out) in next.iter_mut().enumerate() {
            let c = coords(dims, i)[axis] as isize;
            let base = i as isize - c * strides[axis] as isize;
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let p = (c + k as isize - radius).clamp(0, n - 1);
                acc += w * cur[(base + p * strides[axis] as isize) as usize];
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Volume { data: cur.into_iter().map(|v| v as f32).collect(), ..volume.clone() }
}

/// Gaussian smoothing restricted to the mask: `smooth(v·m) / smooth(m)`
/// inside, zero outside, so the dark background does not bleed inward.
pub fn masked_smooth(volume: &Volume, mask: &BrainMask, sigma: f64) -> Volume {
    let weights = Volume { data: mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(), ..volume.clone() };
    let masked = Volume {
        data: volume.data.iter().zip(&mask.data).map(|(&v, &m)| if m { v } else { 0.0 }).collect(),
        ..volume.clone()
    };
    let num = gaussian_smooth(&masked, sigma);
    let den = gaussian_smooth(&weights, sigma);
    let data = num
        .data
        .iter()
        .zip(&den.data)
        .zip(&mask.data)
        .map(|((&a, &b), &m)| if m && b > 0.0 { a / b } else { 0.0 })
        .collect();
    Volume { data, ..volume.clone() }
}

/// Darkest smoothed voxel inside the central half of each hemisphere's
/// in-mask bounding box, then jittered and pulled back into the mask.
pub fn select_seeds(volume: &Volume, mask: &BrainMask, config: &WatershedConfig, rng: &mut Rng) -> Result<SeedSet> {
    if volume.dims != mask.dims {
        return Err(Error::Shape("volume and mask dims differ".into()));
    }
    let midline = mask.centroid_x().ok_or_else(|| Error::Seed("mask is empty".into()))?;
    let smooth = masked_smooth(volume, mask, config.smoothing_sigma);
    let dims = volume.dims;

    let in_half = |x: usize, left: bool| if left { (x as f64) < midline } else { (x as f64) >= midline };
    let mut pick = |left: bool| -> Result<[usize; 3]> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for (i, &m) in mask.data.iter().enumerate() {
            let c = coords(dims, i);
            if m && in_half(c[0], left) {
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a]);
                    hi[a] = hi[a].max(c[a]);
                }
            }
        }
        let side = if left { "left" } else { "right" };
        if lo[0] == usize::MAX {
            return Err(Error::Seed(format!("no in-mask voxel in the {side} half")));
        }
        let inner: [(f64, f64); 3] = std::array::from_fn(|a| {
            let span = (hi[a] - lo[a]) as f64;
            (lo[a] as f64 + 0.25 * span, lo[a] as f64 + 0.75 * span)
        });
        let mut best: Option<(f32, usize)> = None;
        for (i, &m) in mask.data.iter().enumerate() {
            let c = coords(dims, i);
            if !m || !in_half(c[0], left) {
                continue;
            }
            if (0..3).all(|a| (c[a] as f64) >= inner[a].0 && (c[a] as f64) <= inner[a].1) {
                let v = smooth.data[i];
                if best.is_none_or(|(b, _)| v < b) {
                    best = Some((v, i));
                }
            }
        }
        let (_, idx) = best.ok_or_else(|| Error::Seed(format!("central {side} box holds no in-mask voxel")))?;
        let origin = coords(dims, idx);
        if config.seed_jitter_std == 0.0 {
            return Ok(origin);
        }
        let mut target = [0f64; 3];
        for a in 0..3 {
            let j = config.seed_jitter_std * rng.sample::<f64, _>(StandardNormal);
            target[a] = (origin[a] as f64 + j).round().clamp(0.0, (dims[a] - 1) as f64);
        }
        // Walk back toward the unjittered seed until the point is in the mask and on its side.
        const STEPS: usize = 32;
        for s in 0..=STEPS {
            let t = 1.0 - s as f64 / STEPS as f64;
            let p: [usize; 3] =
                std::array::from_fn(|a| (origin[a] as f64 + t * (target[a] - origin[a] as f64)).round() as usize);
            if mask.get(p[0], p[1], p[2]) && in_half(p[0], left) {
                return Ok(p);
            }
        }
        Ok(origin)
    };
    let left = pick(true)?;
    let right = pick(false)?;
    Ok(SeedSet { left, right })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueItem {
    priority: f32,
    order: u64,
    index: usize,
}

impl Eq for QueueItem {}

impl Ord for QueueItem {
    // BinaryHeap is a max-heap: lowest priority, then earliest insertion, comes out first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.priority.total_cmp(&self.priority).then_with(|| other.order.cmp(&self.order))
    }
}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Output of a flood, including the popped priority trace.
#[derive(Debug, Clone, PartialEq)]
pub struct FloodResult {
    pub labels: LabelMap,
    pub popped: Vec<f32>,
    pub stop_level: f32,
}

/// Priority flood over a precomputed surface.
///
/// Seeds are labeled and popped first. A voxel is claimed by the neighbor that enqueues
/// it, with priority `max(surface, parent priority)`; it keeps that label only
/// if it is popped before the priority exceeds the stop level. Neighbors are
/// visited in the order z−, y−, x−, x+, y+, z+.
pub fn flood_surface(
    surface: &[f32],
    dims: [usize; 3],
    spacing: [f32; 3],
    mask: &BrainMask,
    seeds: &SeedSet,
    stop_quantile: f64,
) -> Result<FloodResult> {
    if surface.len() != mask.data.len() || mask.dims != dims {
        return Err(Error::Shape("surface and mask sizes differ".into()));
    }
    let seed_idx = |s: [usize; 3]| -> Result<usize> {
        if (0..3).any(|a| s[a] >= dims[a]) {
            return Err(Error::Precondition(format!("seed {s:?} outside the grid")));
        }
        let i = s[0] + dims[0] * (s[1] + dims[1] * s[2]);
        if !mask.data[i] {
            return Err(Error::Precondition(format!("seed {s:?} outside the brain mask")));
        }
        Ok(i)
    };
    let li = seed_idx(seeds.left)?;
    let ri = seed_idx(seeds.right)?;
    if li == ri {
        return Err(Error::Precondition("left and right seeds coincide".into()));
    }

    let mut in_mask: Vec<f32> = surface.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(&s, _)| s).collect();
    in_mask.sort_by(f32::total_cmp);
    let stop_level = nearest_rank(&in_mask, stop_quantile * 100.0);

    let n = surface.len();
    let mut claim = vec![BACKGROUND; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (idx, label) in [(li, LEFT), (ri, RIGHT)] {
        claim[idx] = label;
        done[idx] = true;
        // Markers pop before anything else, whatever their own surface value.
        heap.push(QueueItem { priority: f32::NEG_INFINITY, order, index: idx });
        order += 1;
    }

    let offsets = neighbor_offsets(6);
    let mut popped = Vec::new();
    while let Some(top) = heap.peek() {
        if top.priority > stop_level {
            break;
        }
        let item = heap.pop().unwrap();
        debug_assert!(popped.last().is_none_or(|&p: &f32| p <= item.priority), "flood priorities must not decrease");
        popped.push(item.priority);
        done[item.index] = true;
        let label = claim[item.index];
        let c = coords(dims, item.index);
        for d in &offsets {
            if let Some(j) = offset(dims, c, *d) {
                if mask.data[j] && claim[j] == BACKGROUND {
                    claim[j] = label;
                    heap.push(QueueItem { priority: surface[j].max(item.priority), order, index: j });
                    order += 1;
                }
            }
        }
    }
    let data: Vec<u8> = claim.iter().zip(&done).map(|(&l, &d)| if d { l } else { BACKGROUND }).collect();
    Ok(FloodResult { labels: LabelMap::new(dims, spacing, data)?, popped, stop_level })
}

/// Flood surface for `volume`: in-mask smoothing plus barrier noise.
pub fn flood_surface_for(volume: &Volume, mask: &BrainMask, config: &WatershedConfig, rng: &mut Rng) -> Vec<f32> {
    let mut s = masked_smooth(volume, mask, config.smoothing_sigma).data;
    if config.barrier_noise_std > 0.0 {
        for v in &mut s {
            *v += (config.barrier_noise_std * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    s
}

pub fn flood(volume: &Volume, mask: &BrainMask, seeds: &SeedSet, config: &WatershedConfig, rng: &mut Rng) -> Result<LabelMap> {
    config.validate()?;
    let surface = flood_surface_for(volume, mask, config, rng);
    Ok(flood_surface(&surface, volume.dims, volume.spacing, mask, seeds, config.stop_quantile)?.labels)
}

/// One subject's pseudo-label and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub labels: LabelMap,
    pub seeds: SeedSet,
    /// Set when the flood ran but one side claimed fewer than `min_region_voxels`.
    pub failure: Option<String>,
    /// DSC against the subject's truth, both ventricles.
    pub dsc_vs_truth: f64,
}

/// Seeds and flood on an already preprocessed subject.
pub fn pseudo_label_preprocessed(
    pre: &Preprocessed,
    truth: Option<&LabelMap>,
    config: &WatershedConfig,
    subject_index: u64,
) -> Result<PseudoLabel> {
    config.validate()?;
    let mut seed_rng = substream(config.seed, "watershed/seeds", subject_index);
    let mut noise_rng = substream(config.seed, "watershed/barrier", subject_index);
    let seeds = select_seeds(&pre.channel1, &pre.mask, config, &mut seed_rng)?;
    let labels = flood(&pre.channel1, &pre.mask, &seeds, config, &mut noise_rng)?;
    let small: Vec<&str> = [(LEFT, "left"), (RIGHT, "right")]
        .iter()
        .filter(|(l, _)| labels.count(*l) < config.min_region_voxels)
        .map(|(_, name)| *name)
        .collect();
    let failure = (!small.is_empty()).then(|| format!("flood did not grow on the {} side", small.join(" and ")));
    let dsc_vs_truth = truth.map(|t| dsc_per_subject(t, &labels, Selector::Both)).transpose()?.unwrap_or(f64::NAN);
    Ok(PseudoLabel { labels, seeds, failure, dsc_vs_truth })
}

/// Mask, normalize, seed and flood one subject.
pub fn pseudo_label(subject: &Subject, config: &WatershedConfig, subject_index: u64) -> Result<PseudoLabel> {
    let pre = preprocess_channels(&subject.channel1, &subject.channel2)?;
    pseudo_label_preprocessed(&pre, Some(&subject.truth), config, subject_index)
}

//! Brain masking and percentile intensity normalization.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{coords, Volume};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrainMask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl BrainMask {
    pub fn full(dims: [usize; 3]) -> Self {
        BrainMask { dims, data: vec![true; dims.iter().product()] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn to_volume(&self, spacing: [f32; 3]) -> Result<Volume> {
        Ok(Volume::new(self.dims, spacing, self.data.iter().map(|&b| f32::from(u8::from(b))).collect())?
            .with_dtype(crate::DType::Uint8))
    }

    pub fn from_volume(v: &Volume) -> Self {
        BrainMask { dims: v.dims, data: v.data.iter().map(|&x| x > 0.0).collect() }
    }

    /// Mean x coordinate of the foreground.
    pub fn centroid_x(&self) -> Option<f64> {
        let (mut sum, mut n) = (0.0f64, 0usize);
        for (i, &b) in self.data.iter().enumerate() {
            if b {
                sum += coords(self.dims, i)[0] as f64;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// Neighbor offsets for 6- or 26-connectivity.
pub(crate) fn neighbor_offsets(connectivity: usize) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                let keep = match connectivity {
                    6 => manhattan == 1,
                    _ => manhattan > 0,
                };
                if keep {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

#[inline]
pub(crate) fn offset(dims: [usize; 3], c: [usize; 3], d: [isize; 3]) -> Option<usize> {
    let x = c[0] as isize + d[0];
    let y = c[1] as isize + d[1];
    let z = c[2] as isize + d[2];
    if x < 0 || y < 0 || z < 0 || x >= dims[0] as isize || y >= dims[1] as isize || z >= dims[2] as isize {
        return None;
    }
    Some(x as usize + dims[0] * (y as usize + dims[1] * z as usize))
}

/// Labels connected components of `fg`; returns (component id per voxel, sizes).
/// Id 0 is unused; background voxels keep id 0.
pub(crate) fn components(dims: [usize; 3], fg: &[bool], connectivity: usize) -> (Vec<u32>, Vec<usize>) {
    let offsets = neighbor_offsets(connectivity);
    let mut ids = vec![0u32; fg.len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        sizes.push(0);
        ids[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            sizes[id as usize] += 1;
            let c = coords(dims, i);
            for d in &offsets {
                if let Some(j) = offset(dims, c, *d) {
                    if fg[j] && ids[j] == 0 {
                        ids[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
    }
    (ids, sizes)
}

fn largest_component(dims: [usize; 3], fg: &[bool], connectivity: usize) -> Vec<bool> {
    let (ids, sizes) = components(dims, fg, connectivity);
    let best = (1..sizes.len()).max_by_key(|&k| (sizes[k], std::cmp::Reverse(k)));
    match best {
        Some(b) => ids.iter().map(|&id| id == b as u32).collect(),
        None => vec![false; fg.len()],
    }
}

/// Otsu threshold over a 256-bin histogram of `values`.
pub fn otsu_threshold(values: &[f32]) -> f32 {
    const BINS: usize = 256;
    let (lo, hi) = values.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return lo;
    }
    let width = (hi - lo) / BINS as f32;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best, mut best_var) = (0usize, -1.0f64);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1).powi(2);
        if var > best_var {
            best_var = var;
            best = i;
        }
    }
    lo + width * (best + 1) as f32
}

fn ball(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn dilate(dims: [usize; 3], fg: &[bool], se: &[[isize; 3]]) -> Vec<bool> {
    let mut out = vec![false; fg.len()];
    for (i, &b) in fg.iter().enumerate() {
        if b {
            let c = coords(dims, i);
            for d in se {
                if let Some(j) = offset(dims, c, *d) {
                    out[j] = true;
                }
            }
        }
    }
    out
}

/// Erosion that ignores structuring-element taps falling outside the grid.
fn erode(dims: [usize; 3], fg: &[bool], se: &[[isize; 3]]) -> Vec<bool> {
    (0..fg.len())
        .map(|i| {
            fg[i] && {
                let c = coords(dims, i);
                se.iter().all(|d| offset(dims, c, *d).is_none_or(|j| fg[j]))
            }
        })
        .collect()
}

/// Morphological closing computed on a grid padded by `radius` background
/// voxels, so objects touching the border close like interior ones.
fn closing(dims: [usize; 3], fg: &[bool], radius: usize) -> Vec<bool> {
    let pd = dims.map(|d| d + 2 * radius);
    let mut padded = vec![false; pd[0] * pd[1] * pd[2]];
    let at = |x: usize, y: usize, z: usize, d: [usize; 3]| x + d[0] * (y + d[1] * z);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                padded[at(x + radius, y + radius, z + radius, pd)] = fg[at(x, y, z, dims)];
            }
        }
    }
    let se = ball(radius);
    let closed = erode(pd, &dilate(pd, &padded, &se), &se);
    let mut out = vec![false; fg.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                out[at(x, y, z, dims)] = closed[at(x + radius, y + radius, z + radius, pd)];
            }
        }
    }
    out
}

/// Background voxels not 6-connected to the grid border become foreground.
fn fill_holes(dims: [usize; 3], fg: &[bool]) -> Vec<bool> {
    let mut outside = vec![false; fg.len()];
    let mut queue = VecDeque::new();
    for (i, &b) in fg.iter().enumerate() {
        let [x, y, z] = coords(dims, i);
        let border = x == 0 || y == 0 || z == 0 || x + 1 == dims[0] || y + 1 == dims[1] || z + 1 == dims[2];
        if border && !b {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    let offsets = neighbor_offsets(6);
    while let Some(i) = queue.pop_front() {
        let c = coords(dims, i);
        for d in &offsets {
            if let Some(j) = offset(dims, c, *d) {
                if !fg[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// Otsu threshold, largest 26-connected component, closing with a radius-2
/// ball, then hole filling so interior dark structures stay in the mask.
pub fn compute_brain_mask(volume: &Volume) -> Result<BrainMask> {
    volume.validate()?;
    let dims = volume.dims;
    let t = otsu_threshold(&volume.data);
    let fg: Vec<bool> = volume.data.iter().map(|&v| v > t).collect();
    if !fg.iter().any(|&b| b) {
        return Err(Error::Masking("no foreground above the Otsu threshold".into()));
    }
    let largest = largest_component(dims, &fg, 26);
    let closed = closing(dims, &largest, 2);
    let filled = fill_holes(dims, &closed);
    let data = largest_component(dims, &filled, 26);
    let mask = BrainMask { dims, data };
    if mask.is_empty() {
        return Err(Error::Masking("mask is empty after morphology".into()));
    }
    Ok(mask)
}

/// Zeroes voxels outside the mask.
pub fn apply_mask(volume: &Volume, mask: &BrainMask) -> Result<Volume> {
    if volume.dims != mask.dims {
        return Err(Error::Shape(format!("volume dims {:?} vs mask dims {:?}", volume.dims, mask.dims)));
    }
    let mut out = volume.clone();
    for (v, &m) in out.data.iter_mut().zip(&mask.data) {
        if !m {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 * n)` of the sorted sample.
pub fn nearest_rank(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub percentile: f64,
    pub divisor: f32,
}

/// Divides the whole volume by the `p`-th percentile of in-mask intensities.
pub fn percentile_normalize(volume: &Volume, mask: &BrainMask, p: f64) -> Result<(Volume, Normalization)> {
    if volume.dims != mask.dims {
        return Err(Error::Shape(format!("volume dims {:?} vs mask dims {:?}", volume.dims, mask.dims)));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Normalization(format!("percentile {p} outside [0, 100]")));
    }
    let mut values: Vec<f32> = volume.data.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if values.is_empty() {
        return Err(Error::Normalization("mask is empty".into()));
    }
    values.sort_by(f32::total_cmp);
    let q = nearest_rank(&values, p);
    if !(q > 0.0) {
        return Err(Error::Normalization(format!("percentile value {q} is not positive")));
    }
    Ok((volume.map(|v| v / q), Normalization { percentile: p, divisor: q }))
}

/// Placeholder for rigid registration: channels arrive co-registered, so
/// this only checks the grids agree and returns the moving image unchanged.
pub fn coregister(moving: &Volume, fixed: &Volume) -> Result<Volume> {
    if moving.dims != fixed.dims {
        return Err(Error::Shape(format!("cannot co-register {:?} onto {:?}", moving.dims, fixed.dims)));
    }
    Ok(moving.clone())
}

/// Masked and normalized channels plus the mask they share.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub mask: BrainMask,
    pub channel1: Volume,
    pub channel2: Volume,
    pub norm1: Normalization,
    pub norm2: Normalization,
}

pub const DEFAULT_PERCENTILE: f64 = 95.0;

/// Mask from channel 1, applied to both channels, each normalized in-mask.
pub fn preprocess_channels(channel1: &Volume, channel2: &Volume) -> Result<Preprocessed> {
    let channel2 = coregister(channel2, channel1)?;
    let mask = compute_brain_mask(channel1)?;
    let (c1, norm1) = percentile_normalize(&apply_mask(channel1, &mask)?, &mask, DEFAULT_PERCENTILE)?;
    let (c2, norm2) = percentile_normalize(&apply_mask(&channel2, &mask)?, &mask, DEFAULT_PERCENTILE)?;
    Ok(Preprocessed { mask, channel1: c1, channel2: c2, norm1, norm2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, PhantomSpec};
    use proptest::prelude::*;

    fn clean_spec() -> PhantomSpec {
        PhantomSpec { noise_std: 0.0, bias_amplitude: 0.0, ..PhantomSpec::default() }
    }

    #[test]
    fn constant_in_mask_becomes_one() {
        let v = Volume::new([2, 2, 1], [1.0; 3], vec![3.0, 3.0, 3.0, 0.0]).unwrap();
        let m = BrainMask { dims: [2, 2, 1], data: vec![true, true, true, false] };
        let (out, n) = percentile_normalize(&v, &m, 95.0).unwrap();
        assert_eq!(n.divisor, 3.0);
        assert_eq!(&out.data[..3], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn nearest_rank_one_to_hundred() {
        let v = Volume::new([100, 1, 1], [1.0; 3], (1..=100).map(|i| i as f32).collect()).unwrap();
        let (out, n) = percentile_normalize(&v, &BrainMask::full(v.dims), 95.0).unwrap();
        assert_eq!(n.divisor, 95.0);
        assert!((out.data[99] - 100.0 / 95.0).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_or_nonpositive_percentile_errors() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![1.0, 2.0]).unwrap();
        let empty = BrainMask { dims: v.dims, data: vec![false, false] };
        assert!(matches!(percentile_normalize(&v, &empty, 95.0), Err(Error::Normalization(_))));
        let neg = v.map(|x| -x);
        assert!(matches!(percentile_normalize(&neg, &BrainMask::full(v.dims), 95.0), Err(Error::Normalization(_))));
    }

    proptest! {
        #[test]
        fn normalization_is_scale_invariant(
            data in proptest::collection::vec(0.01f32..100.0, 8..64),
            k in 0.1f32..50.0,
        ) {
            let v = Volume::new([data.len(), 1, 1], [1.0; 3], data).unwrap();
            let m = BrainMask::full(v.dims);
            let (a, _) = percentile_normalize(&v, &m, 95.0).unwrap();
            let (b, _) = percentile_normalize(&v.map(|x| x * k), &m, 95.0).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn scaling_by_seven_gives_identical_output() {
        let s = generate_subject(&PhantomSpec::default(), 0).unwrap();
        let m = compute_brain_mask(&s.channel1).unwrap();
        let (a, _) = percentile_normalize(&s.channel1, &m, 95.0).unwrap();
        let (b, _) = percentile_normalize(&s.channel1.map(|x| x * 7.0), &m, 95.0).unwrap();
        let max_diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-6, "{max_diff}");
    }

    #[test]
    fn mask_matches_brain_ellipsoid_within_one_voxel() {
        let spec = clean_spec();
        let s = generate_subject(&spec, 0).unwrap();
        let mask = compute_brain_mask(&s.channel1).unwrap();
        let brain = spec.nominal_anatomy().brain;
        let [nx, ny, nz] = spec.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    // Analytic membership of the voxel's neighborhood: a voxel may only
                    // disagree with the ellipsoid when it sits in the one-voxel boundary band.
                    let r_in = brain.radius2(p) <= 1.0;
                    if mask.get(x, y, z) != r_in {
                        let near = (-1i32..=1).any(|dz| {
                            (-1i32..=1).any(|dy| {
                                (-1i32..=1).any(|dx| {
                                    let q = [p[0] + dx as f64, p[1] + dy as f64, p[2] + dz as f64];
                                    brain.contains(q) != r_in
                                })
                            })
                        });
                        assert!(near, "voxel ({x},{y},{z}) disagrees away from the boundary");
                    }
                }
            }
        }
        // Ventricles are enclosed holes and must be inside the mask.
        assert!(s.truth.data.iter().zip(&mask.data).all(|(&l, &m)| l == 0 || m));
    }

    #[test]
    fn mask_is_single_component_and_idempotent() {
        let s = generate_subject(&clean_spec(), 2).unwrap();
        let mask = compute_brain_mask(&s.channel1).unwrap();
        let (_, sizes) = components(mask.dims, &mask.data, 26);
        assert_eq!(sizes.len(), 2);
        let again = compute_brain_mask(&apply_mask(&s.channel1, &mask).unwrap()).unwrap();
        assert_eq!(again, mask);
    }

    #[test]
    fn noisy_phantom_mask_is_single_component() {
        let s = generate_subject(&PhantomSpec { seed: 5, ..PhantomSpec::default() }, 1).unwrap();
        let mask = compute_brain_mask(&s.channel1).unwrap();
        let (_, sizes) = components(mask.dims, &mask.data, 26);
        assert_eq!(sizes.len(), 2);
        assert!(s.truth.data.iter().zip(&mask.data).all(|(&l, &m)| l == 0 || m));
    }

    #[test]
    fn all_zero_volume_has_no_mask() {
        let v = Volume::zeros([8, 8, 8], [1.0; 3]).unwrap();
        assert!(matches!(compute_brain_mask(&v), Err(Error::Masking(_))));
    }

    #[test]
    fn apply_mask_cases() {
        let v = Volume::new([4, 4, 1], [1.0; 3], vec![2.0; 16]).unwrap();
        assert_eq!(apply_mask(&v, &BrainMask::full(v.dims)).unwrap(), v);
        let checker = BrainMask { dims: v.dims, data: (0..16).map(|i| (i % 4 + i / 4) % 2 == 0).collect() };
        let out = apply_mask(&v, &checker).unwrap();
        assert_eq!(out.data.iter().sum::<f32>(), 2.0 * checker.count() as f32);
        assert_eq!(checker.count(), 8);
        let wrong = BrainMask::full([2, 2, 1]);
        assert!(matches!(apply_mask(&v, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn otsu_separates_two_levels() {
        let mut vals = vec![0.0f32; 100];
        vals.extend(vec![1.0f32; 50]);
        let t = otsu_threshold(&vals);
        assert!(t > 0.0 && t <= 1.0);
    }
}

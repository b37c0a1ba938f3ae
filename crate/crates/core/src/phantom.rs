//! Synthetic two-channel brain phantoms with exact ventricle labels.
//!
//! A phantom is a brain ellipsoid holding two ventricle ellipsoids placed
//! left and right of the midline. Channel 1 renders the ventricles dark
//! against tissue, channel 2 renders them bright. Each subject gets its own
//! jitter of ventricle centers and semi-axes, a smooth multiplicative bias
//! field per channel and additive Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{write_labelmap, write_nifti};
use crate::rng::substream;
use crate::volume::{voxel_count, LabelMap, Volume, BACKGROUND, LEFT, RIGHT};

/// Intensity of each tissue class on one channel, before bias and noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelIntensities {
    pub background: f32,
    pub tissue: f32,
    pub ventricle: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    /// Brain ellipsoid semi-axes in voxels, centered in the grid.
    pub brain_semi_axes: [f64; 3],
    /// Distance of each ventricle center from the midline along x.
    pub ventricle_offset_x: f64,
    /// Offset of both ventricle centers along y and z from the grid center.
    pub ventricle_offset_yz: [f64; 2],
    pub ventricle_semi_axes: [f64; 3],
    /// Per-subject standard deviation of each center coordinate (voxels).
    pub center_jitter_std: f64,
    /// Per-subject standard deviation of each semi-axis (voxels).
    pub axis_jitter_std: f64,
    pub channel1: ChannelIntensities,
    pub channel2: ChannelIntensities,
    pub noise_std: f64,
    /// Bias field is `exp(amplitude * P)` with `|P| <= 1` over the grid.
    pub bias_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 32],
            spacing: [1.0, 1.0, 1.0],
            brain_semi_axes: [27.0, 29.0, 13.0],
            ventricle_offset_x: 8.0,
            ventricle_offset_yz: [-2.0, 0.0],
            ventricle_semi_axes: [5.0, 13.0, 6.0],
            center_jitter_std: 1.0,
            axis_jitter_std: 0.8,
            channel1: ChannelIntensities { background: 0.0, tissue: 0.6, ventricle: 0.15 },
            channel2: ChannelIntensities { background: 0.0, tissue: 0.35, ventricle: 0.9 },
            noise_std: 0.04,
            bias_amplitude: 0.15,
            seed: 0,
        }
    }
}

/// An axis-aligned ellipsoid in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    /// Normalized squared radius; `<= 1` means inside.
    #[inline]
    pub fn radius2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum()
    }

    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.radius2(p) <= 1.0
    }

    /// True when every point of `self` lies strictly inside `outer`.
    fn strictly_inside(&self, outer: &Ellipsoid) -> bool {
        const N_THETA: usize = 24;
        const N_PHI: usize = 48;
        for i in 0..=N_THETA {
            let theta = std::f64::consts::PI * i as f64 / N_THETA as f64;
            for j in 0..N_PHI {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / N_PHI as f64;
                let p = [
                    self.center[0] + self.semi_axes[0] * theta.sin() * phi.cos(),
                    self.center[1] + self.semi_axes[1] * theta.sin() * phi.sin(),
                    self.center[2] + self.semi_axes[2] * theta.cos(),
                ];
                if outer.radius2(p) >= 1.0 {
                    return false;
                }
            }
        }
        true
    }
}

/// Resolved per-subject geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub brain: Ellipsoid,
    pub left: Ellipsoid,
    pub right: Ellipsoid,
}

impl PhantomSpec {
    pub fn midline_x(&self) -> f64 {
        (self.dims[0] as f64 - 1.0) / 2.0
    }

    fn grid_center(&self) -> [f64; 3] {
        [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ]
    }

    /// Geometry with zero jitter.
    pub fn nominal_anatomy(&self) -> Anatomy {
        let c = self.grid_center();
        let vc = |sign: f64| Ellipsoid {
            center: [
                c[0] + sign * self.ventricle_offset_x,
                c[1] + self.ventricle_offset_yz[0],
                c[2] + self.ventricle_offset_yz[1],
            ],
            semi_axes: self.ventricle_semi_axes,
        };
        Anatomy {
            brain: Ellipsoid { center: c, semi_axes: self.brain_semi_axes },
            left: vc(-1.0),
            right: vc(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        voxel_count(self.dims)?;
        if self.noise_std < 0.0 || self.center_jitter_std < 0.0 || self.axis_jitter_std < 0.0 {
            return Err(Error::Phantom("standard deviations must be non-negative".into()));
        }
        if self.bias_amplitude < 0.0 {
            return Err(Error::Phantom("bias amplitude must be non-negative".into()));
        }
        if self.brain_semi_axes.iter().chain(&self.ventricle_semi_axes).any(|&a| !(a > 0.0)) {
            return Err(Error::Phantom("semi-axes must be positive".into()));
        }
        self.check_anatomy(&self.nominal_anatomy())
    }

    fn check_anatomy(&self, a: &Anatomy) -> Result<()> {
        let mid = self.midline_x();
        if !(a.left.center[0] < mid && mid < a.right.center[0]) {
            return Err(Error::Phantom("ventricle centers must straddle the midline".into()));
        }
        if !a.left.strictly_inside(&a.brain) || !a.right.strictly_inside(&a.brain) {
            return Err(Error::Phantom("ventricle ellipsoid extends outside the brain".into()));
        }
        let gap = (a.right.center[0] - a.right.semi_axes[0]) - (a.left.center[0] + a.left.semi_axes[0]);
        if gap < 2.0 {
            return Err(Error::Phantom(format!("ventricles are only {gap:.2} voxels apart")));
        }
        Ok(())
    }

    /// Jittered anatomy for one subject. Up to 10 draws, then an error.
    pub fn subject_anatomy(&self, subject_index: u64) -> Result<Anatomy> {
        let mut rng = substream(self.seed, "phantom/geometry", subject_index);
        let nominal = self.nominal_anatomy();
        for _ in 0..10 {
            let mut jitter = |e: Ellipsoid| {
                let mut out = e;
                for a in 0..3 {
                    out.center[a] += self.center_jitter_std * rng.sample::<f64, _>(StandardNormal);
                }
                for a in 0..3 {
                    out.semi_axes[a] =
                        (out.semi_axes[a] + self.axis_jitter_std * rng.sample::<f64, _>(StandardNormal)).max(1.0);
                }
                out
            };
            let candidate = Anatomy { brain: nominal.brain, left: jitter(nominal.left), right: jitter(nominal.right) };
            if self.check_anatomy(&candidate).is_ok() {
                return Ok(candidate);
            }
        }
        Err(Error::Phantom(format!("subject {subject_index}: jitter left a ventricle outside the brain after 10 attempts")))
    }
}

/// Smooth multiplicative field `exp(amplitude * P)` with `P` a random
/// quadratic polynomial over normalized coordinates scaled to `max |P| = 1`.
pub fn bias_field(dims: [usize; 3], amplitude: f64, rng: &mut crate::rng::Rng) -> Vec<f32> {
    let n = dims.iter().product::<usize>();
    // linear x, y, z then xx, yy, zz, xy, xz, yz
    let coef: [f64; 9] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
    let norm = |i: usize, d: usize| if d > 1 { 2.0 * i as f64 / (d as f64 - 1.0) - 1.0 } else { 0.0 };
    let mut p = Vec::with_capacity(n);
    for z in 0..dims[2] {
        let w = norm(z, dims[2]);
        for y in 0..dims[1] {
            let v = norm(y, dims[1]);
            for x in 0..dims[0] {
                let u = norm(x, dims[0]);
                let terms = [u, v, w, u * u, v * v, w * w, u * v, u * w, v * w];
                p.push(terms.iter().zip(&coef).map(|(t, c)| t * c).sum::<f64>());
            }
        }
    }
    let max = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { amplitude / max } else { 0.0 };
    p.into_iter().map(|v| (scale * v).exp() as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub channel1: Volume,
    pub channel2: Volume,
    pub truth: LabelMap,
}

fn subject_id(index: u64) -> String {
    format!("subj-{index:03}")
}

/// Deterministic in `(spec.seed, subject_index)`.
pub fn generate_subject(spec: &PhantomSpec, subject_index: u64) -> Result<Subject> {
    spec.validate()?;
    let anatomy = spec.subject_anatomy(subject_index)?;
    let dims = spec.dims;
    let n = voxel_count(dims)?;

    let mut truth = vec![BACKGROUND; n];
    let mut tissue_class = vec![0u8; n]; // 0 background, 1 tissue, 2 ventricle
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64, y as f64, z as f64];
                if anatomy.left.contains(p) {
                    truth[i] = LEFT;
                    tissue_class[i] = 2;
                } else if anatomy.right.contains(p) {
                    truth[i] = RIGHT;
                    tissue_class[i] = 2;
                } else if anatomy.brain.contains(p) {
                    tissue_class[i] = 1;
                }
                i += 1;
            }
        }
    }

    let render = |intens: &ChannelIntensities, name: &str| -> Result<Volume> {
        let mut bias_rng = substream(spec.seed, &format!("phantom/bias/{name}"), subject_index);
        let bias = bias_field(dims, spec.bias_amplitude, &mut bias_rng);
        let mut noise_rng = substream(spec.seed, &format!("phantom/noise/{name}"), subject_index);
        let data = tissue_class
            .iter()
            .zip(&bias)
            .map(|(&c, &b)| {
                let base = match c {
                    0 => intens.background,
                    1 => intens.tissue,
                    _ => intens.ventricle,
                };
                let biased = if spec.bias_amplitude > 0.0 { base * b } else { base };
                if spec.noise_std > 0.0 {
                    biased + (spec.noise_std * noise_rng.sample::<f64, _>(StandardNormal)) as f32
                } else {
                    biased
                }
            })
            .collect();
        Volume::new(dims, spec.spacing, data)
    };

    Ok(Subject {
        id: subject_id(subject_index),
        channel1: render(&spec.channel1, "channel1")?,
        channel2: render(&spec.channel2, "channel2")?,
        truth: LabelMap::new(dims, spec.spacing, truth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectPaths {
    pub channel1: PathBuf,
    pub channel2: PathBuf,
    pub truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub index: u64,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub paths: SubjectPaths,
}

/// Cohort manifest written next to the subject directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<SubjectEntry>,
    pub spec: PhantomSpec,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.subjects.iter().filter(|s| s.split == split).map(|s| s.id.as_str()).collect()
    }

    /// Reads the three volumes of one entry, resolving paths against `root`.
    pub fn load_subject(&self, root: &Path, entry: &SubjectEntry) -> Result<Subject> {
        Ok(Subject {
            id: entry.id.clone(),
            channel1: crate::nifti::read_nifti(root.join(&entry.paths.channel1))?,
            channel2: crate::nifti::read_nifti(root.join(&entry.paths.channel2))?,
            truth: crate::nifti::read_labelmap(root.join(&entry.paths.truth))?,
        })
    }
}

/// Generates `n_train + n_val + n_test` subjects under `output_dir` and
/// writes `manifest.json`. Split membership is a seeded shuffle.
pub fn generate_cohort(
    spec: &PhantomSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    output_dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("each split needs at least one subject".into()));
    }
    spec.validate()?;
    let root = output_dir.as_ref();
    let total = n_train + n_val + n_test;
    let mut order: Vec<u64> = (0..total as u64).collect();
    order.shuffle(&mut substream(spec.seed, "phantom/split", 0));
    let mut split_of = vec![Split::Train; total];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx as usize] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let entries: Vec<SubjectEntry> = (0..total as u64)
        .into_par_iter()
        .map(|idx| {
            let subject = generate_subject(spec, idx)?;
            let rel = PathBuf::from("subjects").join(&subject.id);
            fs::create_dir_all(root.join(&rel))?;
            let paths = SubjectPaths {
                channel1: rel.join("channel1.nii"),
                channel2: rel.join("channel2.nii"),
                truth: rel.join("truth.nii"),
            };
            write_nifti(&subject.channel1, root.join(&paths.channel1))?;
            write_nifti(&subject.channel2, root.join(&paths.channel2))?;
            write_labelmap(&subject.truth, root.join(&paths.truth))?;
            Ok(SubjectEntry { id: subject.id, index: idx, split: split_of[idx as usize], paths })
        })
        .collect::<Result<_>>()?;

    let manifest = Manifest { subjects: entries, spec: spec.clone() };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

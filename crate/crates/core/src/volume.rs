//! In-memory volumes and label maps.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. A single axial slice `z` is therefore one
//! contiguous run of `nx * ny` values in row-major `(y, x)` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage type used when a volume is written to disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    Float32,
    Int16,
    Uint8,
}

/// Header bytes carrying qform/sform orientation and the intent name.
///
/// They are copied verbatim between reader and writer and never interpreted.
pub const ORIENTATION_LEN: usize = 92;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Orientation(pub [u8; ORIENTATION_LEN]);

impl Default for Orientation {
    fn default() -> Self {
        Orientation([0; ORIENTATION_LEN])
    }
}

/// Number of voxels for `dims`, or a shape error on overflow or zero extent.
pub fn voxel_count(dims: [usize; 3]) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("dims must be positive, got {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))
}

fn check_spacing(spacing: [f32; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Validation(format!("spacing must be positive, got {spacing:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
    pub dtype: DType,
    pub orientation: Orientation,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        let v = Volume { dims, spacing, data, dtype: DType::Float32, orientation: Orientation::default() };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = voxel_count(dims)?;
        Self::new(dims, spacing, vec![0.0; n])
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    /// Checks the length, spacing and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let n = voxel_count(self.dims)?;
        if self.data.len() != n {
            return Err(Error::Validation(format!(
                "data length {} does not match dims {:?} ({n} voxels)",
                self.data.len(),
                self.dims
            )));
        }
        check_spacing(self.spacing)?;
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite voxel at index {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Axial slice `z` in row-major `(y, x)` order.
    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }

    /// Same geometry and metadata, different voxel values.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Mirror along the x axis.
    pub fn flip_x(&self) -> Volume {
        let [nx, ny, nz] = self.dims;
        let mut out = self.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.data[self.index(x, y, z)] = self.get(nx - 1 - x, y, z);
                }
            }
        }
        out
    }
}

/// Class ids: 0 background, 1 left ventricle, 2 right ventricle.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<u8>,
}

pub const BACKGROUND: u8 = 0;
pub const LEFT: u8 = 1;
pub const RIGHT: u8 = 2;

impl LabelMap {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        let m = LabelMap { dims, spacing, data };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = voxel_count(dims)?;
        Self::new(dims, spacing, vec![BACKGROUND; n])
    }

    pub fn validate(&self) -> Result<()> {
        let n = voxel_count(self.dims)?;
        if self.data.len() != n {
            return Err(Error::Validation(format!(
                "label data length {} does not match dims {:?}",
                self.data.len(),
                self.dims
            )));
        }
        check_spacing(self.spacing)?;
        if let Some(i) = self.data.iter().position(|&v| v > RIGHT) {
            return Err(Error::Validation(format!(
                "label value {} at index {i} is not a class id in {{0,1,2}}",
                self.data[i]
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    pub fn slice_z(&self, z: usize) -> &[u8] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn flip_x(&self) -> LabelMap {
        let [nx, ny, nz] = self.dims;
        let mut out = self.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.data[self.index(x, y, z)] = self.get(nx - 1 - x, y, z);
                }
            }
        }
        out
    }
}

/// Linear index to `(x, y, z)`.
#[inline]
pub fn coords(dims: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let r = i / dims[0];
    [x, r % dims[1], r / dims[1]]
}

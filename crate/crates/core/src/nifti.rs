//! Minimal single-file NIfTI-1 reader and writer.
//!
//! Supported: little-endian `.nii` files with `dim[0] == 3` and datatype
//! float32, int16 or uint8. The qform/sform block is carried through as
//! opaque bytes so a read/write cycle reproduces the header exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, DType, LabelMap, Orientation, Volume, ORIENTATION_LEN};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

// Byte offsets into the 348-byte header.
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_ORIENTATION: usize = 252;
const OFF_MAGIC: usize = 344;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

impl DType {
    fn code(self) -> i16 {
        match self {
            DType::Float32 => DT_FLOAT32,
            DType::Int16 => DT_INT16,
            DType::Uint8 => DT_UINT8,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            DT_FLOAT32 => Ok(DType::Float32),
            DT_INT16 => Ok(DType::Int16),
            DT_UINT8 => Ok(DType::Uint8),
            other => Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Int16 => 2,
            DType::Uint8 => 1,
        }
    }
}

/// Parses a complete `.nii` file image.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("file is {} bytes, shorter than a header", bytes.len())));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        return Err(Error::Format(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(Error::Format("magic is not \"n+1\\0\" (only single-file NIfTI-1 is read)".into()));
    }
    let ndim = i16_at(bytes, OFF_DIM);
    if !(1..=7).contains(&ndim) {
        if (1..=7).contains(&ndim.swap_bytes()) {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        return Err(Error::Format(format!("dim[0] = {ndim} is outside 1..=7")));
    }
    if ndim != 3 {
        return Err(Error::Unsupported(format!("dim[0] = {ndim}, only 3D volumes are read")));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = i16_at(bytes, OFF_DIM + 2 * (a + 1));
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    let dtype = DType::from_code(i16_at(bytes, OFF_DATATYPE))?;
    let spacing = [f32_at(bytes, OFF_PIXDIM + 4), f32_at(bytes, OFF_PIXDIM + 8), f32_at(bytes, OFF_PIXDIM + 12)];
    let vox_offset = f32_at(bytes, OFF_VOX_OFFSET);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {vox_offset} must be an integer >= 352")));
    }
    let vox_offset = vox_offset as usize;
    let n = voxel_count(dims)?;
    let payload = n * dtype.bytes_per_voxel();
    let end = vox_offset
        .checked_add(payload)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if end > bytes.len() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("declared payload needs {end} bytes, file has {}", bytes.len()),
        )));
    }
    let raw = &bytes[vox_offset..end];
    let mut data: Vec<f32> = match dtype {
        DType::Float32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::Int16 => raw.chunks_exact(2).map(|c| f32::from(i16::from_le_bytes([c[0], c[1]]))).collect(),
        DType::Uint8 => raw.iter().map(|&b| f32::from(b)).collect(),
    };
    let slope = f32_at(bytes, OFF_SCL_SLOPE);
    let inter = f32_at(bytes, OFF_SCL_INTER);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    let mut orientation = [0u8; ORIENTATION_LEN];
    orientation.copy_from_slice(&bytes[OFF_ORIENTATION..OFF_ORIENTATION + ORIENTATION_LEN]);
    let vol = Volume { dims, spacing, data, dtype, orientation: Orientation(orientation) };
    vol.validate()?;
    Ok(vol)
}

/// Serializes a volume as a single-file NIfTI-1 image.
pub fn encode_nifti(volume: &Volume) -> Result<Vec<u8>> {
    volume.validate()?;
    for (a, &d) in volume.dims.iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::Validation(format!("dim[{}] = {d} exceeds the NIfTI-1 limit", a + 1)));
        }
    }
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    // regular = 'r', as written by most tools.
    h[38] = b'r';
    let dim: [i16; 8] = [3, volume.dims[0] as i16, volume.dims[1] as i16, volume.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[OFF_DIM + 2 * i..OFF_DIM + 2 * i + 2].copy_from_slice(&d.to_le_bytes());
    }
    h[OFF_DATATYPE..OFF_DATATYPE + 2].copy_from_slice(&volume.dtype.code().to_le_bytes());
    let bitpix = (volume.dtype.bytes_per_voxel() * 8) as i16;
    h[OFF_BITPIX..OFF_BITPIX + 2].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, volume.spacing[0], volume.spacing[1], volume.spacing[2], 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[OFF_PIXDIM + 4 * i..OFF_PIXDIM + 4 * i + 4].copy_from_slice(&p.to_le_bytes());
    }
    h[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&1.0f32.to_le_bytes());
    h[OFF_SCL_INTER..OFF_SCL_INTER + 4].copy_from_slice(&0.0f32.to_le_bytes());
    // millimetres
    h[OFF_XYZT_UNITS] = 2;
    let descrip = b"segnl";
    h[OFF_DESCRIP..OFF_DESCRIP + descrip.len()].copy_from_slice(descrip);
    h[OFF_ORIENTATION..OFF_ORIENTATION + ORIENTATION_LEN].copy_from_slice(&volume.orientation.0);
    h[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);

    let mut out = h;
    out.reserve(volume.len() * volume.dtype.bytes_per_voxel());
    match volume.dtype {
        DType::Float32 => {
            for v in &volume.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::Int16 => {
            for (i, &v) in volume.data.iter().enumerate() {
                if v.fract() != 0.0 || v < f32::from(i16::MIN) || v > f32::from(i16::MAX) {
                    return Err(Error::Validation(format!("voxel {i} = {v} is not representable as int16")));
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
        DType::Uint8 => {
            for (i, &v) in volume.data.iter().enumerate() {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(Error::Validation(format!("voxel {i} = {v} is not representable as uint8")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    decode_nifti(&fs::read(path)?)
}

pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_nifti(volume)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a label map; any voxel outside {0, 1, 2} is a validation error.
pub fn read_labelmap(path: impl AsRef<Path>) -> Result<LabelMap> {
    labelmap_from_volume(&read_nifti(path)?)
}

pub fn write_labelmap(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_nifti(&labelmap_to_volume(labels)?, path)
}

pub fn labelmap_to_volume(labels: &LabelMap) -> Result<Volume> {
    labels.validate()?;
    Ok(Volume {
        dims: labels.dims,
        spacing: labels.spacing,
        data: labels.data.iter().map(|&v| f32::from(v)).collect(),
        dtype: DType::Uint8,
        orientation: Orientation::default(),
    })
}

pub fn labelmap_from_volume(volume: &Volume) -> Result<LabelMap> {
    let mut data = Vec::with_capacity(volume.len());
    for (i, &v) in volume.data.iter().enumerate() {
        if v != 0.0 && v != 1.0 && v != 2.0 {
            return Err(Error::Validation(format!("label value {v} at voxel {i} is not in {{0,1,2}}")));
        }
        data.push(v as u8);
    }
    LabelMap::new(volume.dims, volume.spacing, data)
}

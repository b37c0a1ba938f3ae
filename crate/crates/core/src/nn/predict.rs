//! Slice-by-slice inference and thresholding.

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::volume::{DType, LabelMap, Volume, BACKGROUND, LEFT, RIGHT};

use super::ops::{softmax_channels, Mode};
use super::tensor::Tensor;
use super::unet::UNet;

/// Slices per eval-mode forward pass. Results do not depend on it.
const PREDICT_BATCH: usize = 8;

/// Per-class probability volumes for a co-registered multi-channel subject.
///
/// Slices whose size is not a multiple of the network's pooling factor are
/// zero-padded at the high end and the output cropped back.
pub fn predict_volume(model: &mut UNet<f32>, channels: &[&Volume]) -> Result<Vec<Volume>> {
    let cfg = model.config.clone();
    if channels.len() != cfg.in_channels {
        return Err(Error::Shape(format!("model expects {} channels, got {}", cfg.in_channels, channels.len())));
    }
    let first = channels[0];
    if channels.iter().any(|c| c.dims != first.dims) {
        return Err(Error::Shape("channel dims differ".into()));
    }
    let [nx, ny, nz] = first.dims;
    let m = cfg.size_multiple();
    let (w, h) = (nx.div_ceil(m) * m, ny.div_ceil(m) * m);
    let plane = w * h;
    let k = cfg.out_classes;
    let mut out: Vec<Vec<f32>> = vec![vec![0.0; nx * ny * nz]; k];
    let mut unused = substream(0, "eval", 0);

    let zs: Vec<usize> = (0..nz).collect();
    for chunk in zs.chunks(PREDICT_BATCH) {
        let mut data = vec![0f32; chunk.len() * cfg.in_channels * plane];
        for (b, &z) in chunk.iter().enumerate() {
            for (c, vol) in channels.iter().enumerate() {
                let base = (b * cfg.in_channels + c) * plane;
                for y in 0..ny {
                    let src = nx * (y + ny * z);
                    data[base + y * w..base + y * w + nx].copy_from_slice(&vol.data[src..src + nx]);
                }
            }
        }
        let x = Tensor::new(&[chunk.len(), cfg.in_channels, h, w], data)?;
        let probs = softmax_channels(&model.forward(x, Mode::Eval, &mut unused)?)?;
        let p = probs.data();
        for (b, &z) in chunk.iter().enumerate() {
            for (class, vol) in out.iter_mut().enumerate() {
                let base = (b * k + class) * plane;
                for y in 0..ny {
                    let dst = nx * (y + ny * z);
                    vol[dst..dst + nx].copy_from_slice(&p[base + y * w..base + y * w + nx]);
                }
            }
        }
    }
    out.into_iter()
        .map(|data| {
            let mut v = Volume::new(first.dims, first.spacing, data)?;
            v.dtype = DType::Float32;
            v.orientation = first.orientation.clone();
            Ok(v)
        })
        .collect()
}

/// Labels a voxel with the more probable ventricle among those whose
/// probability exceeds `threshold`, else background. Ties go to left.
pub fn segment_binary(probs: &[Volume], threshold: f64) -> Result<LabelMap> {
    if probs.len() != 3 {
        return Err(Error::Shape(format!("expected 3 class volumes, got {}", probs.len())));
    }
    let dims = probs[0].dims;
    if probs.iter().any(|p| p.dims != dims) {
        return Err(Error::Shape("probability volumes differ in dims".into()));
    }
    let t = threshold as f32;
    let data = probs[1]
        .data
        .iter()
        .zip(&probs[2].data)
        .map(|(&l, &r)| match (l > t, r > t) {
            (false, false) => BACKGROUND,
            (true, false) => LEFT,
            (false, true) => RIGHT,
            (true, true) => {
                if r > l {
                    RIGHT
                } else {
                    LEFT
                }
            }
        })
        .collect();
    LabelMap::new(dims, probs[0].spacing, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::unet::UNetConfig;

    fn probs(p: [f32; 3]) -> Vec<Volume> {
        p.iter().map(|&v| Volume::new([1, 1, 1], [1.0; 3], vec![v]).unwrap()).collect()
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(segment_binary(&probs([0.1, 0.8, 0.1]), 0.5).unwrap().data, vec![1]);
        assert_eq!(segment_binary(&probs([0.4, 0.3, 0.3]), 0.5).unwrap().data, vec![0]);
        assert_eq!(segment_binary(&probs([0.0, 0.45, 0.55]), 0.5).unwrap().data, vec![2]);
        assert_eq!(segment_binary(&probs([0.0, 0.45, 0.55]), 0.4).unwrap().data, vec![2]);
        assert_eq!(segment_binary(&probs([0.0, 0.5, 0.5]), 0.4).unwrap().data, vec![1]);
    }

    fn subject(nx: usize, ny: usize, nz: usize) -> [Volume; 2] {
        let n = nx * ny * nz;
        [
            Volume::new([nx, ny, nz], [1.0; 3], (0..n).map(|i| ((i * 13) % 29) as f32 / 29.0).collect()).unwrap(),
            Volume::new([nx, ny, nz], [1.0; 3], (0..n).map(|i| ((i * 7) % 23) as f32 / 23.0).collect()).unwrap(),
        ]
    }

    #[test]
    fn probabilities_sum_to_one_with_padding() {
        let cfg = UNetConfig { depth: 3, base_filters: 4, ..UNetConfig::default() };
        let mut m = UNet::new(&cfg, &mut substream(2, "init", 0)).unwrap();
        let [a, b] = subject(10, 7, 3);
        let p = predict_volume(&mut m, &[&a, &b]).unwrap();
        assert_eq!(p.len(), 3);
        for i in 0..a.len() {
            let s: f64 = p.iter().map(|v| v.data[i] as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn slice_order_permutes_outputs() {
        let cfg = UNetConfig { depth: 2, base_filters: 4, ..UNetConfig::default() };
        let mut m = UNet::new(&cfg, &mut substream(3, "init", 0)).unwrap();
        let [a, b] = subject(6, 4, 11);
        let plane = 24;
        let reverse = |v: &Volume| {
            let mut data = Vec::with_capacity(v.len());
            for z in (0..11).rev() {
                data.extend_from_slice(&v.data[z * plane..(z + 1) * plane]);
            }
            Volume::new(v.dims, v.spacing, data).unwrap()
        };
        let p = predict_volume(&mut m, &[&a, &b]).unwrap();
        let q = predict_volume(&mut m, &[&reverse(&a), &reverse(&b)]).unwrap();
        for c in 0..3 {
            assert_eq!(reverse(&q[c]).data, p[c].data);
        }
    }
}

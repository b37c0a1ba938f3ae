//! Browser bindings: generate a phantom subject, flood it with the
//! watershed under adjustable noise, and render slices with overlays.

use segnl_core::metrics::{dsc_per_subject, Selector};
use segnl_core::phantom::{generate_subject, PhantomSpec, Subject};
use segnl_core::preprocess::{preprocess_channels, Preprocessed};
use segnl_core::volume::{LabelMap, LEFT, RIGHT};
use segnl_core::watershed::{pseudo_label_preprocessed, WatershedConfig};
use wasm_bindgen::prelude::*;

const LEFT_RGB: [u8; 3] = [230, 70, 60];
const RIGHT_RGB: [u8; 3] = [60, 130, 230];
const TRUTH_RGB: [u8; 3] = [250, 220, 40];
const OVERLAY_ALPHA: f32 = 0.45;

#[wasm_bindgen]
pub struct Demo {
    subject: Subject,
    pre: Preprocessed,
    pseudo: Option<LabelMap>,
}

#[wasm_bindgen]
impl Demo {
    /// One phantom subject on the default 64×64×32 grid.
    #[wasm_bindgen(constructor)]
    pub fn new(subject_index: u32, noise_std: f64, bias_amplitude: f64) -> Result<Demo, String> {
        let spec = PhantomSpec { noise_std, bias_amplitude, ..PhantomSpec::default() };
        let subject = generate_subject(&spec, subject_index as u64).map_err(|e| e.to_string())?;
        let pre = preprocess_channels(&subject.channel1, &subject.channel2).map_err(|e| e.to_string())?;
        Ok(Demo { subject, pre, pseudo: None })
    }

    pub fn width(&self) -> usize {
        self.subject.truth.dims[0]
    }

    pub fn height(&self) -> usize {
        self.subject.truth.dims[1]
    }

    pub fn depth(&self) -> usize {
        self.subject.truth.dims[2]
    }

    /// Runs the watershed with the given noise knobs and returns its DSC
    /// against the phantom truth over both ventricles.
    pub fn run_watershed(
        &mut self,
        stop_quantile: f64,
        seed_jitter_std: f64,
        barrier_noise_std: f64,
        seed: u32,
    ) -> Result<f64, String> {
        let config = WatershedConfig {
            stop_quantile,
            seed_jitter_std,
            barrier_noise_std,
            seed: seed as u64,
            ..WatershedConfig::default()
        };
        let p = pseudo_label_preprocessed(&self.pre, Some(&self.subject.truth), &config, 0).map_err(|e| e.to_string())?;
        self.pseudo = Some(p.labels);
        Ok(p.dsc_vs_truth)
    }

    /// DSC of the current pseudo-label for `selector` 0 = left, 1 = right, 2 = both.
    pub fn dsc(&self, selector: u8) -> Result<f64, String> {
        let sel = match selector {
            0 => Selector::Left,
            1 => Selector::Right,
            2 => Selector::Both,
            _ => return Err(format!("unknown selector {selector}")),
        };
        let pseudo = self.pseudo.as_ref().ok_or("run the watershed first")?;
        dsc_per_subject(&self.subject.truth, pseudo, sel).map_err(|e| e.to_string())
    }

    /// RGBA pixels of slice `z` of normalized channel 1 or 2, optionally with
    /// the pseudo-label tinted and the true ventricle outlines drawn.
    pub fn render(&self, channel: u8, z: usize, overlay: bool) -> Result<Vec<u8>, String> {
        let [nx, ny, nz] = self.subject.truth.dims;
        if z >= nz {
            return Err(format!("slice {z} out of range 0..{nz}"));
        }
        let vol = match channel {
            1 => &self.pre.channel1,
            2 => &self.pre.channel2,
            _ => return Err(format!("unknown channel {channel}")),
        };
        let truth = &self.subject.truth;
        let mut rgba = Vec::with_capacity(nx * ny * 4);
        for y in 0..ny {
            for x in 0..nx {
                let g = (vol.get(x, y, z).clamp(0.0, 1.0) * 255.0) as u8;
                let mut px = [g, g, g];
                if overlay {
                    if let Some(p) = &self.pseudo {
                        let tint = match p.get(x, y, z) {
                            LEFT => Some(LEFT_RGB),
                            RIGHT => Some(RIGHT_RGB),
                            _ => None,
                        };
                        if let Some(t) = tint {
                            for c in 0..3 {
                                px[c] = (px[c] as f32 * (1.0 - OVERLAY_ALPHA) + t[c] as f32 * OVERLAY_ALPHA) as u8;
                            }
                        }
                    }
                    if on_outline(truth, x, y, z) {
                        px = TRUTH_RGB;
                    }
                }
                rgba.extend_from_slice(&[px[0], px[1], px[2], 255]);
            }
        }
        Ok(rgba)
    }
}

/// A foreground voxel with an in-plane 4-neighbor of a different label.
fn on_outline(labels: &LabelMap, x: usize, y: usize, z: usize) -> bool {
    let l = labels.get(x, y, z);
    if l == 0 {
        return false;
    }
    let [nx, ny, _] = labels.dims;
    let differs = |xx: usize, yy: usize| labels.get(xx, yy, z) != l;
    x == 0 || y == 0 || x + 1 == nx || y + 1 == ny || differs(x - 1, y) || differs(x + 1, y) || differs(x, y - 1) || differs(x, y + 1)
}

//! Minimal CPU tensor engine and the 2D U-net built on it.
//!
//! Everything is generic over [`Scalar`] so the same layer code trains in
//! `f32` and is gradient-checked in `f64`.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod ops;
pub mod predict;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;

pub use ops::Mode;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use predict::{predict_volume, segment_binary};
pub use train::{SliceDataset, TrainConfig, Trainer};
pub use unet::{UNet, UNetConfig};

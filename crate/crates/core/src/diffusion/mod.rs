//! Desk-scale DDPM backbone.

pub mod checkpoint;
pub mod features;
pub mod sample;
pub mod schedule;
pub mod train;
pub mod unet;

pub use features::{extract_features, extract_features_multi, FeatureBatch, Pooling};
pub use sample::{sample, sample_from};
pub use schedule::{forward_noising, NoiseSchedule};
pub use train::{pretrain, PretrainConfig, PretrainLog};
pub use unet::{DenoiserModel, Tap, UNetConfig};

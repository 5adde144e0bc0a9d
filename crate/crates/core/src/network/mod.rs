//! The occlusion-guided flow model: feature pyramid, occlusion predictor,
//! occlusion-weighted cost volume and residual flow predictor.

mod config;
mod forward;
pub mod layers;
mod params;

pub use config::{CostVolumeMode, ModelConfig};
pub use forward::{
    encode_pyramid, model_forward, model_forward_with, predict, CloudPyramid, ForwardOptions, ForwardPass, LevelOutput,
    Prediction, Pyramid,
};
pub use params::{layer_layout, BoundParams, ModelParams, Tensor};

#[cfg(test)]
mod tests;

//! GenConViT: two networks that pair a generative model (an autoencoder for
//! A, a variational autoencoder for B) with ConvNeXt-Swin hybrid towers,
//! plus the data pipeline, training steps and evaluation metrics around them.

pub mod backbone;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod genconvit;
pub mod generative;
pub mod metrics;
pub mod nn;
pub mod train;

pub use config::{ModelConfig, Preset};
pub use error::{Error, Result};
pub use genconvit::{
    init_params, predict_video, GenConViTParams, Network, PredictionResult, Verdict, FAKE_THRESHOLD,
};
pub use genconvit_tensor as tensor;

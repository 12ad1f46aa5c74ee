//! Self-supervised random-noise attenuation for seismic gathers.
//!
//! A dropout U-Net is fitted to a single noisy gather by predicting
//! randomly hidden traces from the visible ones, with a weighted total
//! variation penalty on the horizontal derivative enforced through an ADMM
//! splitting. The denoised gather is the average of many stochastic
//! forward passes.

pub mod config;
pub mod error;
pub mod inference;
pub mod io;
pub mod masking;
pub mod metrics;
pub mod network;
pub mod synth;
pub mod trainer;
pub mod types;
pub mod wtv;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use masking::MaskedInstance;
pub use network::{Architecture, ConvVariant, DenoiserParams, ForwardMode};
pub use types::{derive_stream, validate_gather, Gather, Mask, MaskMode, Purpose, Real, RngStream};
pub use wtv::WtvState;

//! Resolution-aware token decoder for semantic segmentation.
//!
//! A hierarchical transformer encoder feeds a stride-16 token lattice that
//! is refined globally and locally, enriched by high-resolution
//! cross-attention and a texture branch under a three-way gate, and decoded
//! to full resolution with margin-selected point refinement. Everything runs
//! on a small reverse-mode tensor engine in 64-bit floats.

pub mod capr;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use capr::{Capr, CaprConfig, UncertaintySelection};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{Sample, SceneSpec};
pub use decoder::{DecodeOutput, Decoder, DecoderConfig, GateWeights};
pub use encoder::{Encoder, EncoderConfig, FeaturePyramid};
pub use error::{Error, Result};
pub use labels::{Group, LabelMask, RemapTable, IGNORE};
pub use losses::LossConfig;
pub use metrics::{Confusion, MetricReport};
pub use model::{Components, ForwardOptions, Model, ModelConfig};
pub use params::{ParamId, ParamSet};
pub use tensor::{OpKind, Tape, Tensor, Var};

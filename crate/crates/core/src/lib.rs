//! Transformer-based salient object detection at desk scale.
//!
//! The crate covers the tensor substrate with reverse-mode differentiation
//! ([`tensor`], [`autograd`]), token geometry and position encodings
//! ([`geometry`]), the attention blocks ([`attention`]), the full model
//! ([`model`]), losses and metrics ([`objectives`]) and MAC accounting
//! ([`macs`], [`complexity`]).

pub mod attention;
pub mod autograd;
pub mod complexity;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod macs;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use attention::{ForegroundMask, SiaMode};
pub use autograd::{ParamId, ParamStore, Tape, Var};
pub use complexity::{
    closed_form_attention_cost, counted_forward, savings_report, AttentionCost, Variant,
};
pub use error::{Error, Result};
pub use geometry::{DepthMap, PositionEncoding, SoftSplitSpec, TokenSeq};
pub use init::RngSpec;
pub use macs::MacReport;
pub use model::{ForwardOptions, Level, Modality, Model, ModelConfig, PredictionSet};
pub use objectives::{GroundTruth, LossReport, LossTerms};
pub use tensor::Tensor;

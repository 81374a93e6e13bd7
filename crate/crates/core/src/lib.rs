//! Two-pass deliberation sequence transduction.
//!
//! A streaming RNN-T first pass produces an n-best list; a deliberation
//! decoder attends to the acoustic encoding and to a bidirectional encoding
//! of the first-pass hypotheses to produce (or rescore) the final output.

pub mod autodiff;
pub mod beam;
pub mod config;
pub mod data;
pub mod decode;
pub mod delib;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod rnnt;
pub mod train;

pub use beam::{Beam, Hypothesis};
pub use config::Settings;
pub use error::{Error, Result};
pub use layers::Init;
pub use model::{AttentionMode, Model, ModelConfig};

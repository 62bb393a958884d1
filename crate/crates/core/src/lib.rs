//! Evolving-boxes two-stage vehicle detector.
//!
//! A shared convolutional backbone fuses several depths into one hyper
//! feature map. A light proposal network (PN) scores and regresses a fixed
//! anchor lattice and discards most background; a heavier fine-tuning
//! network (FTN) re-scores and re-regresses the survivors, reusing the PN's
//! fc feature. Everything — tensors, autodiff, data, training and
//! evaluation — is implemented in this crate.

pub mod anchors;
pub mod config;
pub mod data;
pub mod eval;
pub mod geom;
pub mod model;
pub mod tensor;
pub mod train;

pub use anchors::{generate_anchors, AnchorSpec, Ratio};
pub use config::RunConfig;
pub use geom::{BBox, BoxDelta, Detection};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;

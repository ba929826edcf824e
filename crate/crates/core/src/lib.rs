//! Joint segmentation and deformable registration of longitudinal volumes.
//!
//! A segmentation U-Net and a registration U-Net are evaluated in one
//! computation graph so that a four-term objective (overlap accuracy, image
//! similarity after warping, deformation smoothness and warped-label
//! consistency) trains both at once. The crate carries its own reverse-mode
//! autodiff ([`tensor`]), the layer set ([`ops`]), the networks ([`model`]),
//! the objective ([`loss`]), the longitudinal evaluation suite
//! ([`metrics`]), a phantom generator ([`synth`]), the trainer ([`train`])
//! and the on-disk formats ([`io`]).

pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use metrics::BinaryMask;
pub use ops::DisplacementField;
pub use tensor::{Graph, NodeId, Shape, Tensor};

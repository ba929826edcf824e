//! The segmentation network `F_Θ`, the registration network `G_Φ` and the
//! hybrid forward pass that joins them in one graph.

mod params;
mod unet;

pub use params::{init_params, ConvBlock, NetConfig, NetRole, ParameterSet, DESK_WIDTHS, PAPER_WIDTHS};
pub use unet::{binarize, hybrid_forward, register, segment, unet_forward, HybridInputs, HybridOutput, UnetTrace};

//! Layers and parameter handling shared by the backbone and the discriminator.

mod layers;
mod params;

pub use layers::{conv2d, conv_out_side, dense, se_block, Conv2dGeom};
pub use params::{glorot_uniform, Bound, ParamStore};

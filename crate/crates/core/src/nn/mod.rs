//! Parameters, layers and the optimizer used by every network.

mod adam;
mod layers;
mod param;

pub use adam::{clip_grad_norm, Adam, AdamConfig, Moments};
pub use layers::{Conv2d, DownBlock, UpBlock};
pub use param::{ParamBuilder, ParamSet, Parameter};

//! Network blocks and the assembled edge-gated segmentation model.

mod backbone;
mod layers;
mod model;
mod params;

pub use backbone::{Backbone, BackboneOutput};
pub use layers::{Conv3dLayer, EdgeGatedLayer, GatedOutput, GroupNormLayer, ResidualBlock};
pub use model::{EdgeStream, EgModel, ModelConfig, ModelOutput, MODEL_CONFIG_VERSION};
pub use params::{Graph, ParamId, ParamStore};

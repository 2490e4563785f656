//! The separation network: configuration, presets and forward pass.

pub mod config;
pub mod network;

pub use config::{ablation_rows, preset, MaskActivation, ModelConfig, PreluPlacement, PRESET_NAMES};
pub use network::{
    block_graph, decode_graph, encode_graph, forward_graph, param_specs, separator_graph, BlockLayers, Forward,
    Init, Layers, Model, ParamSpec, SeparationOutput, PRELU_INIT,
};

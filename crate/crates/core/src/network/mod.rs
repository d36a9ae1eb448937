//! Full networks: stem, clique blocks, transitions, compression heads,
//! multi-scale pooling and the classifier.

mod config;
mod model;

pub use config::{ModelConfig, Preset, Stem, PRESETS, STEM_CHANNELS};
pub use model::{
    attentional_transition, build_model, compression_head, register_attention, spatial_schedule,
    transition_forward, AttentionParams, CompressionParams, ForwardTrace, Model, StemParams,
    TransitionParams,
};

//! Full model assembly, configuration and checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{load_checkpoint, load_checkpoint_with, load_params, save_checkpoint, sidecar_path};
pub use config::{parse_entries, ConfigEntry, DecoderMode, DownsampleMode, FusionMode, ModelConfig, MODEL_KEYS};
pub use model::{
    build_model, count_params, map_to_tokens, stage_bridge, stage_bridge_graph, tokens_to_map, DeadParam, ForwardVars, Model,
    Output, PATCH,
};

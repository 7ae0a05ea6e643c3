//! Vision Transformer with per-block embedding dropping.

mod config;
mod forward;
mod params;

pub use config::ModelConfig;
pub use forward::{
    argmax_rows, embed, forward, mlp_forward, msa_forward, patchify, unpatchify, BlockTrace, ForwardOptions,
    ForwardTrace, Keep, Mode, Model, MsaOutput,
};
pub use params::{BlockParams, BlockVars, ParamVars, Params};

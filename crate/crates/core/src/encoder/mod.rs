//! The dual-branch hierarchical RGB-D encoder: stems, stage transitions,
//! blocks (global attention + local gate + base), variant configurations,
//! parameter accounting and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod forward;
pub mod weights;

pub use config::{default_heads, LeaFusion, QFusion, StageSpec, VariantConfig};
pub use count::{count_parameters, flops_proxy, reference_params};
pub use forward::{
    base_forward, downsample_forward, encoder_eval, encoder_forward, gaa_forward, lea_forward,
    rgbd_block_forward, stem_forward, stems_downsamples_forward, DualVars,
};
pub use weights::{BlockWeights, EncoderWeights, StemWeights};

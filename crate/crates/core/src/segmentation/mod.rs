//! Segmentation: decoder head, metrics, inference and the finetuning loop.

pub mod decoder;
pub mod finetune;
pub mod infer;
pub mod metrics;

pub use decoder::{decoder_forward, DecoderWeights, HamCfg};
pub use finetune::{
    evaluate_miou, evaluate_saliency, finetune_run, render_report, split_indices, FinetuneHyper,
    FinetuneReport, InitFrom, MS_SCALES,
};
pub use infer::{adapt_depth_channels, config_from_entries, SegModel};
pub use metrics::{argmax_strided, saliency_metrics, ConfusionMatrix};

//! Layer dropping for transformer encoder checkpoints.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensorstore`] reads and writes the tensor archive format.
//! - [`topology`] groups tensors by the encoder layer they belong to.
//! - [`strategies`] computes which layers to drop.
//! - [`surgery`] removes them and reports the size reduction.
//! - [`encoder`] runs a BERT-style encoder with per-layer sentence-token taps.
//! - [`contribution`] scores layers by how little they change that token.
//! - [`finetune`] trains pruned toy models end to end.

pub mod contribution;
pub mod encoder;
pub mod finetune;
pub mod fixtures;
pub mod strategies;
pub mod surgery;
pub mod tensorstore;
pub mod topology;

pub use contribution::{cosine, score_and_plan, similarity_profile, SimilarityProfile};
pub use encoder::{EncoderConfig, EncoderModel, LayerTaps, TokenBatch};
pub use strategies::{
    plan_bottom, plan_even_alternate, plan_odd_alternate, plan_symmetric, plan_top, select_by_threshold,
    DropPlan, Strategy,
};
pub use surgery::{apply_plan, max_droppable_within, reduction_report, ReductionReport};
pub use tensorstore::{read_checkpoint, write_checkpoint, Checkpoint, DType};
pub use topology::{count_parameters, infer_topology, ModelTopology, NamingScheme, ParamReport};

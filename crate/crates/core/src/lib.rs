//! Core of the `mmr` toolkit: a small reverse-mode autodiff engine and, on top
//! of it, a decoder-only transformer combining latent (low-rank) attention
//! with a compressed KV cache, rotary position embeddings, and a fine-grained
//! mixture of experts with shared experts and bias-based load balancing.
//!
//! The [`analysis`] module holds closed-form FLOP and KV-cache models and
//! reconciles them against counts taken from the running implementation.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod moe;
pub mod rope;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use rope::{rope_apply, rope_extend, RopeTable};
pub use tensor::{flops, no_grad, Float, Tensor};
pub use attention::{cache_bytes, compress_kv, mha_forward, mla_forward, KvCache, LayerKv};
pub use config::{AttentionKind, ComputeWidth, ExpertConfig, FfnKind, ModelConfig, Precision};
pub use moe::{
    aux_balance_loss, balancer_update, fractions, load_cv, observe, observe_counts, moe_forward, route, routing_combinations, BalanceStrategy,
    RouterState, RoutingDecision,
};
pub use model::{param_counts, Block, ForwardOutput, Model, ParamCounts, Sampling};
pub use tokenizer::{Tokenizer, VocabMap};
pub use trainer::{
    adamw_step, clip_gradients, grad_norm, lr_at, AdamHyper, AdamW, Corpus, RouteRecord, RunOutputs, StepMetrics,
    TrainConfig, TrainSummary, Trainer, Window,
};
pub use analysis::{
    complexity_report, cost_moe, flops_mha, flops_mla, kv_cache_model, route_stats, speedup_asymptotic,
    ComplexityReport, KvVariant, MlaCost,
};
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint};

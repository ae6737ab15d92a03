//! Mixture-of-experts laboratory: baseline top-k gating, competitive gating
//! between most-similar gate pairs, a trainable residual MoE stack, and the
//! utilisation and gate-diversity metrics used to compare the two.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod moe;
pub mod numerics;
pub mod router;

pub use error::{Error, Result};
pub use metrics::{avg_angle, avg_cosine_similarity, spectral_entropy, zero_token_count, MetricsRecord};
pub use moe::{
    adam_step, balance_loss, build_caches, expert_forward, moe_layer_forward, stack_backward, stack_forward, AdamState, Batch,
    BatchRoutingStats, ExpertParams, Gradients, MoeLayerParams, MoeStackParams, StackDims,
};
pub use numerics::{matvec, softmax_over, sym_eigen, sym_eigenvalues, top_k_indices, Matrix, Rng, Vector};
pub use router::{
    compete, compute_logits, gate_similarity, most_similar, route_baseline, route_gatepro, CounterpartMap,
    GateProConfig, GatingWeights, RoutingDecision, RoutingMode, SimilarityCache, SimilarityMatrix,
    SimilarityRefresh,
};

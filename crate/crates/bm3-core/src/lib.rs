//! Self-supervised multi-modal recommendation (BM3) as a
//! self-contained training and evaluation engine.
//!
//! The model learns user and item embeddings on the user-item
//! interaction graph with LightGCN-style propagation (symmetric
//! normalization, no self-loops) and a layer-mean readout, optionally
//! fusing per-item visual/textual feature tables through learned
//! projections. Training needs no negative sampling: each view is
//! contrasted against a dropout-perturbed, gradient-stopped copy of
//! itself through a shared predictor, under a three-part negative
//! cosine objective (user-item recovery, inter-modality alignment,
//! intra-modality masking) plus an embedding-norm regularizer.
//!
//! Everything is implemented from first principles on a dense f64
//! matrix type: the forward pass, the complete hand-derived backward
//! pass (validated by central finite differences), Adam, and the
//! all-ranking Recall/NDCG evaluation. Runs are deterministic for a
//! fixed seed — independent of thread count — and checkpoints round-
//! trip through a small binary tensor format plus a JSON manifest.
//!
//! Module map:
//!
//! * [`mat`] — dense row-major f64 matrices and the few BLAS-like
//!   kernels everything else uses;
//! * [`rng`] — labeled, independently derived ChaCha streams;
//! * [`data`] — interaction parsing, k-core filtering, index maps,
//!   per-user train/valid/test splits;
//! * [`fmat`] — the binary feature/tensor file format;
//! * [`graph`] — the normalized bipartite adjacency and sparse
//!   propagation;
//! * [`nn`] — parameter tensors, affine layers, dropout, negative
//!   cosine, Adam, and the finite-difference checker;
//! * [`model`] — the BM3 forward pass, scoring, and checkpoints;
//! * [`loss`] — the contrastive objective and its backward pass;
//! * [`eval`] — deterministic all-ranking top-K metrics;
//! * [`trainer`] — the training loop, ablation variants, grid sweep;
//! * [`synthetic`] — generated datasets for tests and benchmarks.

pub mod data;
pub mod error;
pub mod eval;
pub mod fmat;
pub mod graph;
pub mod loss;
pub mod mat;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use data::{
    build_dataset, build_dataset_with_maps, items_by_user, kcore_filter, load_interactions,
    read_index_map, split_per_user, write_index_map, write_interactions, DatasetStats,
    InteractionDataset, InteractionRecord, SplitDataset,
};
pub use error::{Error, ErrorClass, Result};
pub use eval::{evaluate, EvalConfig, MetricsReport, Phase};
pub use fmat::{load_feature_matrix, read_fmat, write_fmat, FeatureMatrix, Modality};
pub use graph::{build_adjacency, NormalizedAdjacency};
pub use loss::{total_loss, total_loss_backward, LossBreakdown, LossConfig, TargetViews};
pub use mat::Mat;
pub use model::{
    forward, load_checkpoint, save_checkpoint, score_all, CheckpointManifest, DataPointers,
    ForwardState, ModelParams,
};
pub use nn::{AdamState, DropoutMask, LinearLayer, MaskMode, ParamTensor};
pub use trainer::{
    evaluate_checkpoint, log_without_timing, run_ablation, run_grid, train, AblationRow,
    AblationVariant, GridOutcome, TrainConfig, TrainReport, ABLATION_ORDER,
};

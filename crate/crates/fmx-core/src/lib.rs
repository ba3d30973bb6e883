//! Sparse dictionaries over multi-layer activations: standard crosscoders and
//! factorized masked crosscoders (`fmxcoders`), their training loop, and the
//! evaluation stack (coherence diagnostics, reconstruction metrics, sparse
//! probing, and an LLM-judge pipeline).
//!
//! The crate is organized around a few core value types:
//!
//! - [`data::ActivationBatch`] — a `T x L x d` block of per-layer activations,
//!   read from or written to the `FMXA1` cache format.
//! - [`weights::Weights`] — dense, tensor-ring, or CP-factorized weight
//!   tensors with contraction kernels that never materialize the dense form.
//! - [`model::CrosscoderModel`] — the encoder/decoder pair, biases, and
//!   BatchTopK sparsifier, serialized as `FMXC1` checkpoints.
//! - [`train`] — masking, reconstruction loss with analytic gradients, Adam,
//!   and the deterministic training loop.
//! - [`diagnostics`], [`probe`], [`judge`] — the evaluation pipelines.

pub mod checkpoint;
pub mod code;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod judge;
pub mod model;
pub mod probe;
pub mod synth;
pub mod train;
pub mod weights;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use code::SparseCode;
pub use data::{read_cache, write_cache, ActivationBatch};
pub use error::{Error, ErrorClass, Result};
pub use model::{
    batch_topk, select_cp_rank, select_tr_ranks, sparsify_eval, CrosscoderModel, ModelDims,
    SparsifyMode,
};
pub use train::{train, TrainConfig, VariantSpec};
pub use weights::{CpFactors, DenseWeights3, Dims3, TrFactors, Weights, WeightsGrad};

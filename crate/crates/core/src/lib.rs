//! Single-block mixture-of-experts (SB-MoE) refinement of frozen dense
//! retrieval embeddings: experts and gating, contrastive training, exact
//! retrieval, IR evaluation and expert-activation analysis.

pub mod analysis;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod moe;
pub mod numerics;
pub mod retrieval;
pub mod training;

pub use embedding::EmbeddingMatrix;
pub use error::{Error, Result};
pub use evaluation::{MetricSpec, Qrels};
pub use moe::{Activation, MoeBlock, Pooling, Routing};
pub use numerics::{Matrix, SeededRng};
pub use retrieval::{RankedList, Refiner, RunFile};
pub use training::{train, TrainingConfig};

//! Cross-modal place recognition over text hints, camera images and point
//! clouds.
//!
//! Objects seen from a location are encoded one by one into instance
//! descriptors per modality, then aggregated by self-attention pooling into
//! one scene descriptor per modality. Instance encoders are pretrained with
//! a contrastive objective on single objects; the scene model reuses those
//! weights and is trained on whole scenes. Retrieval is exhaustive cosine
//! search scored by Recall@k.
//!
//! The data-parallel kernels run on rayon with the default `parallel`
//! feature; [`Parallelism::Sequential`] gives the same bits on one thread.

// `!(x > 0.0)` is used deliberately so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod error;
pub mod instance;
pub mod loss;
pub mod model;
pub mod numcore;
pub mod par;
pub mod retrieval;
pub mod scene;
pub mod scenegen;
pub mod train;

pub use error::{Error, Result};
pub use model::{Modality, ModelConfig, Pooling};
pub use numcore::{Matrix, Parallelism, ParamStore};
pub use retrieval::{DescriptorDB, EvalSettings, RecallReport};
pub use scenegen::{SceneTriplet, WorldConfig};
pub use train::{Checkpoint, Stage, TrainConfig};

//! Continual learning by splitting each new task into a stability-preserving
//! slow phase and an unconstrained fast phase, then merging the two trunks.
//!
//! The slow phase projects every update onto directions that leave old-task
//! losses unchanged to first order ([`projector`]). The fast phase finetunes
//! freely ([`trainer`]). Synthetic inputs recalled from each model
//! ([`dreaming`]) drive a learned per-channel interpolation between the two
//! ([`fusion`]), so no old data is needed at merge time.

pub mod checkpoint;
pub mod data;
pub mod dreaming;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod landscape;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod projector;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorClass, Result, Stage};
pub use network::{BnMode, LayerSpec, Network, TaskId};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

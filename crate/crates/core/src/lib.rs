//! Hateful meme classification from precomputed, fused embedding streams
//! (image, embedded text, LMM-generated descriptions and elicited emotions),
//! trained with cross-entropy plus an auxiliary loss on LMM-mined hard
//! samples.

pub mod error;
pub mod experiment;
pub mod head;
pub mod mining;
pub mod optim;
pub mod representation;
pub mod store;
pub mod trainer;

pub use error::{Error, Result};
pub use head::{ForwardTrace, HeadGradients, HeadParameters};
pub use mining::{LossBreakdown, MiningAssignment, MiningConfig, Reduction};
pub use optim::OptimizerKind;
pub use representation::{FusedSample, FusedSet, FusionConfig};
pub use store::{read_dataset, write_dataset, Dataset, DatasetManifest, MemeRecord, Split, SyntheticSpec};
pub use trainer::{ModelSelection, RunMetrics, SeedMetrics, TrainConfig};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

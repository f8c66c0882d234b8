//! Virtual labels for generated training samples, with a small MLP trainer
//! and a retrieval evaluator to compare labeling strategies end to end.

pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod net;
pub mod retrieval;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{Logits, ProbVector, RankWeights, Scheme, TiePolicy, VirtualLabel};
pub use losses::{GradientMode, LossConfig, LossOutput};
pub use net::{Activation, ModelParams};
pub use retrieval::EvalReport;
pub use synthgen::{Dataset, Sample, Split};
pub use trainer::{Strategy, TrainConfig, TrainHistory};

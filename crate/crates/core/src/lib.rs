//! Vision transformer with token-wise recursive routing.
//!
//! Patches are embedded as in a standard ViT, then a single shared encoder
//! block is applied recursively. At each step a per-token router decides
//! which tokens continue; the rest exit with their state frozen. The crate
//! carries its own reverse-mode tape, the model and objective, a training
//! harness with checkpointing, and FLOPs / depth-map profiling.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod params;
pub mod profile;
pub mod rng;
pub mod routing;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::{preset, LrSchedule, ModelConfig, RoutingMode, RunConfig, TrainConfig};
pub use data::{DataSource, Dataset, DatasetRecord};
pub use error::{MorError, Result};
pub use model::{param_count, LossSpec, MorVit, Prediction};
pub use optim::OptimizerState;
pub use profile::{count_flops, detect_degenerate, DepthMap, DepthMapFormat, FlopsReport};
pub use routing::{Hooks, RoutingTrace};
pub use tensor::{DType, Real, Tensor};
pub use train::{evaluate, metrics_log_path, run_ablation, EpochMetrics, EvalReport, Trainer};

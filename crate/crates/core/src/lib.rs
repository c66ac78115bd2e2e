//! Continual neural semantic mapping from posed, labeled LiDAR frames.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod instance;
pub mod losses;
mod mc_tables;
pub mod mesh;
pub mod optim;
pub mod sampling;
pub mod siren;
pub mod spatial;
pub mod synth;
pub mod trainer;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::MetricsReport;
pub use field::{FieldConfig, SceneField};
pub use geometry::{Frame, Obb, Point3, Pose, SceneBounds, Vec3};
pub use instance::{InstanceConfig, ShapePrior};
pub use losses::{LossBreakdown, LossWeights, TrainBatch};
pub use mesh::{GridSpec, Mesh};
pub use sampling::{KeyframeBuffer, SamplingConfig};
pub use trainer::{run_sequence, RunReport, TrainerConfig};

pub mod descriptors;
pub mod g2o;
pub mod registration;
pub mod geometry;
pub mod graph;

pub use descriptors::{Descriptor, DescriptorStore, MatchCandidate, StoreError};
pub use geometry::{GeometryError, Pose, Quaternion, Twist};
pub use graph::{EdgeKind, GraphError, PoseEdge, PoseGraph, PoseNode};
pub use registration::{
    KeyframeObservations, RansacConfig, RegistrationFailure, RegistrationResult,
};
pub mod optimizer;
pub mod simulator;
pub mod mining;
pub mod training;
pub mod evaluation;
pub use evaluation::{EvalConfig, EvalContext, EvalError, PrCurve, SeparationStats};
pub use training::{EmbeddingHead, TrainConfig, TrainError};
pub use mining::{MiningConfig, MiningError, MiningReport, TrainingTuple, TupleStatus};
pub use simulator::{GroundTruth, SimError, SimWorld, TrajectoryKind, WorldConfig};
pub use optimizer::{
    GncConfig, GncState, LmConfig, MatchLabel, OptimizeReport, OptimizerError,
};

//! Model assembly, loss, optimizer, training loop and checkpoints.

pub mod checkpoint;
pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod spec;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layer::{Linear, Node, Op, Residual};
pub use loss::{cross_entropy, topk_hits};
pub use model::Model;
pub use optim::{Sgd, TrainConfig};
pub use spec::{ArchConfig, ArchKind, ConvKind, FeatureShape, LayerSpec, ModelSpec, NormKind};
pub use train::{
    append_metrics_csv, evaluate, fit, read_metrics_csv, train_epoch, train_step, EvalMetrics, MetricsRecord,
    StepOutcome, METRICS_SCHEMA_VERSION,
};

//! A small continual learner: frozen tanh backbone, per-language bottleneck
//! adapters, one shared replay adapter and a softmax head, trained with
//! plain SGD on the scheduler's step stream.

mod model;
mod probe;
mod train;

pub use model::{init_model, init_model_with_gain, Adapter, AdapterStack, Backbone, Embedder, Grads, Head, ModelDims, ToyModel, Trace, DEFAULT_BACKBONE_GAIN};
pub use probe::{probe_layer, train_probe, LinearProbe, ProbeConfig};
pub use train::{effective_mask, evaluate, run_plan, train_step, EmbeddingCache, EpochRecord, ReplayForward, RunRecord, TaskData, TrainConfig, DEFAULT_LEARNING_RATE};

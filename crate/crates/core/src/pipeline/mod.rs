//! End-to-end pipeline: configuration, scene I/O, synthetic data, the
//! assembled detector, training, evaluation and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod io;
pub mod model;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Precision, RunConfig};
pub use eval::{eval_map, EvalResult};
pub use io::{Detection, SceneRecord};
pub use model::{run_inference, Detector};
pub use synth::{synth_scenes, SynthSpec};
pub use train::{run_toy_train, StepReport, Trainer};

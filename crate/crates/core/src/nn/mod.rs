//! Parameters, layers and the optimizer.

pub mod init;
mod layers;
mod optim;
mod params;

pub use layers::{update_running_stats, Conv, Linear, Mode, Norm, NormKind};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Grads, ParamId, ParamStore};

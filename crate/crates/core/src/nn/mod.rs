mod adam;
pub mod checkpoint;
mod mlp;
mod schedule;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{BoundMlp, Layer, MlpParams, MlpSpec};
pub use schedule::LrSchedule;

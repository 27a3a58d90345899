//! Small CNNs with depth-ordered feature taps.

mod arch;
mod checkpoint;
mod net;
mod train;

pub use arch::{Architecture, Block, SHIPPED};
pub use checkpoint::{Checkpoint, TrainingMeta, FORMAT_VERSION, MAGIC};
pub use net::{rank_of_label, ForwardPass, Mode, Model, BN_EPS, BN_MOMENTUM};
pub use train::{accuracy, train, EpochReport, TrainConfig, TrainOutcome};

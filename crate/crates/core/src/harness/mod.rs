//! Run configuration, checkpoints, datasets and the command implementations
//! behind the `depthadapt` binary.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod eval;
pub mod info;
pub mod netpbm;
pub mod report;
pub mod train;

pub use ablate::{ablate_with_data, cmd_ablate, AblationRow, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{export_dataset, DepthDataset, DiskDataset, Frame, SyntheticDataset};
pub use dump::cmd_dump_depth;
pub use eval::{cmd_eval, evaluate, Evaluation, Predictor};
pub use info::{cmd_info, RunInfo};
pub use report::{cmd_report, RelativeReport};
pub use train::{cmd_train, train_with_data, RunData, RunReport, Stage, TrainOutcome, TrainState};

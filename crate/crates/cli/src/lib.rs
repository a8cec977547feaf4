//! Command implementations behind the `colora` binary.
//!
//! Each `cmd_*` function validates its inputs before creating any output,
//! writes its artifacts plus a `manifest.txt`, and reports failures as a
//! [`CliError`] whose [`exit_code`](CliError::exit_code) is the process
//! status: 1 numeric, 2 input or config, 3 I/O.

pub mod checks;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod manifest;
pub mod train;

pub use checks::{merge_equivalence, MergeCheck};
pub use config::{Config, Settings, KEYS};
pub use error::{CliError, CliResult};
pub use eval::{cmd_distill, cmd_eval, cmd_params, DistillOptions, ParamsSource};
pub use experiments::{cmd_synth, cmd_transfer, SynthTask, TransferOptions};
pub use train::{cmd_train, TrainSummary};

//! Command implementations behind the `sgrnn` binary: configuration,
//! checkpoint and sample-bank persistence, metrics export.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod generate;
pub mod inspect;
pub mod layout;
pub mod metrics;
pub mod task;
pub mod train;

pub use config::{RunConfig, Task};
pub use error::{CliError, Result};
pub use eval::{cmd_eval, EvalOptions, EvalReport, EvalRow};
pub use generate::{cmd_generate, GenerateOptions};
pub use inspect::{cmd_inspect_bank, BankRow};
pub use layout::RunLayout;
pub use train::{cmd_train, TrainOptions, TrainReport};

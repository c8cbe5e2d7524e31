//! Recurrent networks (vanilla, LSTM, GRU) trained with stochastic-gradient
//! MCMC samplers and evaluated by posterior model averaging.

pub mod data;
pub mod error;
pub mod models;
pub mod numerics;
pub mod params;
pub mod posterior;
pub mod rnn;
pub mod samplers;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{SeededRng, Tensor2D};
pub use params::{FlatParams, ParamIndex, Parameterized};
pub use rnn::{CellType, RnnStack};

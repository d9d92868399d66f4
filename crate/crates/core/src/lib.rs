//! Raw-waveform voice anti-spoofing with parallel stacked aggregated
//! residual networks.

pub mod error;
pub mod exec;
pub mod tensor;
pub mod audio;
pub mod model;
pub mod metrics;
pub mod profile;
pub mod train;
pub mod config;

pub use error::{Error, Result};
pub use exec::ExecMode;

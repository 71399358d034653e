//! Video demoiréing toolkit: a small deterministic tensor library with
//! reverse-mode autodiff, a synthetic moiré clip generator, moiré analysis
//! statistics, the demoiréing network and its two-stage trainer.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;

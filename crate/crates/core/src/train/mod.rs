//! Losses, the optimizer and the two-stage training loop.

pub mod losses;
pub mod optim;
pub mod trainer;
pub mod wnnm;

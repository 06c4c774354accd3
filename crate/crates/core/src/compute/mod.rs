//! Differentiable kernels: the reverse-mode tape, trainable parameters,
//! the Adam optimizer, and weight initialization.

pub mod adam;
pub mod init;
pub mod param;
pub mod tape;

pub use adam::{adam_step, AdamConfig};
pub use init::{fan_in, kaiming_uniform};
pub use param::Parameter;
pub use tape::{sigmoid_scalar, BatchStats, Gradients, Phase, Tape, Val};

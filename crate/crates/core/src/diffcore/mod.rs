//! Minimal dense-array differentiable computation.
//!
//! A [`Tape`] records forward operators over 2-D [`Tensor`]s and replays
//! them backwards with hand-written gradients. Model-specific operators
//! plug in through the [`CustomOp`] trait. Trainable values live in a
//! [`ParameterStore`], which also owns the Adam state and non-trainable
//! buffers such as batch-norm running statistics.

mod checkpoint;
mod gradcheck;
pub(crate) mod kernels;
mod store;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use store::{AdamConfig, Parameter, ParameterStore, INIT_BOUND};
pub use tape::{BnRunningUpdate, CustomOp, Gradients, Mode, Precision, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;

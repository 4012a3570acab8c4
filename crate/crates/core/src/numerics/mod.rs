//! Dense tensors and a dynamic reverse-mode tape.
//!
//! Every op appends one node to a [`Tape`]; [`Tape::backward`] replays the
//! nodes in reverse and accumulates gradients across fan-out. Any op that
//! produces a NaN or infinity fails with [`crate::Error::NonFinite`].

mod conv;
mod elementwise;
mod gradcheck;
mod spatial;
mod tape;
mod tensor;

pub use conv::Conv2dSpec;
pub use gradcheck::check_gradients;
pub use spatial::{resize_planes, softmax_channels};
pub use tape::{BackwardCtx, BackwardFn, Tape, Var};
pub use tensor::Tensor;

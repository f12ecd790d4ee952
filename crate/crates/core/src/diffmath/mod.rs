//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass over [`Tensor`]
//! values and replays it in reverse to produce gradients. Trainable state
//! lives in a [`ParamStore`] that outlives individual tapes; parameters are
//! bound onto a tape with [`Tape::param`] and receive their gradients through
//! [`Gradients::accumulate_into`].
//!
//! Everything is generic over [`Real`] so the same code runs in 32-bit for
//! training and 64-bit for finite-difference checks.

mod init;
mod optim;
mod params;
mod tape;
mod tensor;

pub mod gradcheck;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub use init::xavier_init;
pub use optim::{adam_step, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Fault, Gradients, OpKind, SegmentIndex, Tape, Var, LEAKY_RELU_SLOPE};
pub use tensor::Tensor;

/// Floating-point element type of tensors.
pub trait Real:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;
    const NAME: &'static str;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

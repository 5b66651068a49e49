//! Invertible flow layers.
//!
//! Every layer exposes a taped `forward` returning the transformed activations
//! together with its per-sample log-density contribution (log|det J| for
//! bijections, a prior log-probability for the split layer), and a plain,
//! tape-free `inverse`. Activations are always batch-first `(b, c, h, w)`
//! tensors; per-sample contributions have shape `(b,)`.
//!
//! The structured layers (low-rank channel/spatial mixing) never materialize
//! their full transformation matrix: forward multiplies in low-rank order,
//! the log-determinant goes through the small inner matrix `I + VU`, and the
//! inverse uses the corresponding low-rank inversion identity. Dense
//! equivalents exist only in tests, as oracles.

mod actnorm;
mod conv1x1;
mod coupling;
mod me_woodbury;
mod net;
mod split;
mod squeeze;
mod woodbury;

pub use actnorm::ActNorm;
pub use conv1x1::Conv1x1;
pub use coupling::Coupling;
pub use me_woodbury::MeWoodbury;
pub use split::{Split, SplitForward};
pub(crate) use split::ln_2pi;
pub use squeeze::Squeeze;
pub use woodbury::{woodbury_identity_check, IdentityCheck, Woodbury};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unpack a batch-first activation shape, rejecting anything else.
pub(crate) fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::Shape(format!(
            "expected a (b, c, h, w) activation tensor, got {s:?}"
        ))),
    }
}

/// View `(b, c, h, w)` as the channel-major matrix `(c, b*h*w)` whose columns
/// are spatial positions across the whole batch. Channel mixing is a left
/// matrix product on this view.
pub(crate) fn channel_cols(tape: &mut Tape, x: NodeId, dims: (usize, usize, usize, usize)) -> Result<NodeId> {
    let (b, c, h, w) = dims;
    tape.reshape_permute(x, &[1, 0, 2, 3], &[c, b * h * w])
}

/// Undo [`channel_cols`].
pub(crate) fn channel_cols_back(
    tape: &mut Tape,
    x: NodeId,
    dims: (usize, usize, usize, usize),
) -> Result<NodeId> {
    let (b, c, h, w) = dims;
    let cbhw = tape.reshape(x, &[c, b, h, w])?;
    tape.reshape_permute(cbhw, &[1, 0, 2, 3], &[b, c, h, w])
}

/// Broadcast a per-channel vector to a full `(b, c, h, w)` activation.
pub(crate) fn per_channel(
    tape: &mut Tape,
    v: NodeId,
    dims: (usize, usize, usize, usize),
) -> Result<NodeId> {
    let (b, c, h, w) = dims;
    let shaped = tape.reshape(v, &[1, c, 1, 1])?;
    tape.broadcast(shaped, &[b, c, h, w])
}

/// A constant-per-sample log-det contribution: broadcast the scalar node to
/// the batch shape `(b,)`.
pub(crate) fn per_sample(tape: &mut Tape, scalar: NodeId, b: usize) -> Result<NodeId> {
    tape.broadcast(scalar, &[b])
}

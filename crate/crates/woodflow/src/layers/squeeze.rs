//! Space-to-channel rearrangement: each 2x2 spatial block becomes four
//! channels. Pure data movement — a permutation with exactly zero
//! log-determinant and bit-exact inversion.
//!
//! Output channel `4k + 2dy + dx` (dy, dx in {0, 1}) holds input
//! `x[k, 2i + dy, 2j + dx]`.

use super::dims4;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{reshape_permute, Tensor};

pub struct Squeeze;

impl Squeeze {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (b, c, h, w) = dims4(tape.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "squeeze needs even spatial extents, got {h}x{w}"
            )));
        }
        // (b, c, h/2, dy, w/2, dx) -> (b, c, dy, dx, h/2, w/2)
        let split = tape.reshape(x, &[b, c, h / 2, 2, w / 2, 2])?;
        let y = tape.reshape_permute(split, &[0, 1, 3, 5, 2, 4], &[b, 4 * c, h / 2, w / 2])?;
        let zero = tape.leaf(Tensor::zeros(&[b]));
        Ok((y, zero))
    }

    /// Same rearrangement on a plain tensor (used outside the tape).
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "squeeze needs even spatial extents, got {h}x{w}"
            )));
        }
        let split = x.reshaped(&[b, c, h / 2, 2, w / 2, 2])?;
        reshape_permute(&split, &[0, 1, 3, 5, 2, 4], &[b, 4 * c, h / 2, w / 2])
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        let (b, c4, hh, hw) = dims4(y)?;
        if c4 % 4 != 0 {
            return Err(Error::Shape(format!(
                "squeeze inverse needs a channel count divisible by 4, got {c4}"
            )));
        }
        let c = c4 / 4;
        // (b, c, dy, dx, h/2, w/2) -> (b, c, h/2, dy, w/2, dx)
        let split = y.reshaped(&[b, c, 2, 2, hh, hw])?;
        let merged = reshape_permute(&split, &[0, 1, 4, 2, 5, 3], &[b, c, hh * 2, hw * 2])?;
        Ok(merged)
    }
}

//! Small convolutional building blocks for the conditioner networks.
//!
//! A 3x3 convolution is recorded on the tape as nine shifted 1x1 channel
//! mixes: shift the activation by (dy, dx) with zero padding, multiply the
//! matching kernel slice on the channel view, and accumulate. That keeps the
//! tape's primitive set tiny while the backward pass falls out of the
//! existing matmul/slice/concat rules. Shifts that fall entirely off a
//! degenerate axis (h == 1 or w == 1) are skipped; their kernel slices
//! multiply only padding zeros and contribute nothing in either direction.

use super::{channel_cols, channel_cols_back, dims4, per_channel};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::Real;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation for non-zero weight initialization.
pub(crate) const INIT_STD: Real = 0.05;

#[derive(Clone, Copy)]
pub(crate) enum Init {
    Zero,
    Gaussian,
}

pub(crate) fn init_tensor<R: Rng>(rng: &mut R, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Gaussian => {
            let dist = Normal::new(0.0, INIT_STD as f64).expect("valid std");
            let len = shape.iter().product();
            let data = (0..len).map(|_| dist.sample(rng) as Real).collect();
            Tensor::new(shape.to_vec(), data).expect("shape/data agree")
        }
    }
}

/// 1x1 channel mix: left-multiply `weight` on the channel view, optionally
/// adding a per-channel bias.
pub(crate) fn mix_channels(
    tape: &mut Tape,
    x: NodeId,
    weight: NodeId,
    bias: Option<NodeId>,
    dims: (usize, usize, usize, usize),
    c_out: usize,
) -> Result<NodeId> {
    let (b, _, h, w) = dims;
    let xv = channel_cols(tape, x, dims)?;
    let yv = tape.matmul(weight, xv)?;
    let out_dims = (b, c_out, h, w);
    let y = channel_cols_back(tape, yv, out_dims)?;
    match bias {
        Some(bnode) => {
            let bb = per_channel(tape, bnode, out_dims)?;
            tape.add(y, bb)
        }
        None => Ok(y),
    }
}

/// Shift an activation by one step along an axis, padding with zeros.
/// `delta` is +1 (output row i reads input row i+1) or -1.
fn shift_axis(
    tape: &mut Tape,
    x: NodeId,
    axis: usize,
    delta: isize,
    dims: (usize, usize, usize, usize),
) -> Result<NodeId> {
    let (b, c, h, w) = dims;
    let extent = if axis == 2 { h } else { w };
    let mut pad_shape = [b, c, h, w];
    pad_shape[axis] = 1;
    let pad = tape.leaf(Tensor::zeros(&pad_shape));
    if delta == 1 {
        let body = tape.slice(x, axis, 1, extent)?;
        tape.concat(&[body, pad], axis)
    } else {
        let body = tape.slice(x, axis, 0, extent - 1)?;
        tape.concat(&[pad, body], axis)
    }
}

/// 3x3 convolution with zero padding, weights stored as one `(9, c_out,
/// c_in)` tensor indexed by `3*(dy+1) + (dx+1)`, plus a `(c_out,)` bias.
pub(crate) struct Conv3x3 {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
    c_in: usize,
    c_out: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        label: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
    ) -> Conv3x3 {
        let weight = store.register(
            format!("{label}.weight"),
            init_tensor(rng, &[9, c_out, c_in], init),
        );
        let bias = store.register(format!("{label}.bias"), Tensor::zeros(&[c_out]));
        Conv3x3 {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let dims = dims4(tape.value(x))?;
        let (b, c, h, w) = dims;
        debug_assert_eq!(c, self.c_in);
        let wnode = tape.param(store, self.weight);
        let mut acc: Option<NodeId> = None;
        for k in 0..9 {
            let dy = (k / 3) as isize - 1;
            let dx = (k % 3) as isize - 1;
            if (dy != 0 && h == 1) || (dx != 0 && w == 1) {
                continue;
            }
            let mut shifted = x;
            if dy != 0 {
                shifted = shift_axis(tape, shifted, 2, dy, dims)?;
            }
            if dx != 0 {
                shifted = shift_axis(tape, shifted, 3, dx, dims)?;
            }
            let wk3 = tape.slice(wnode, 0, k, k + 1)?;
            let wk = tape.reshape(wk3, &[self.c_out, self.c_in])?;
            let term = mix_channels(tape, shifted, wk, None, dims, self.c_out)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        let summed = acc.expect("center tap always contributes");
        let bnode = tape.param(store, self.bias);
        let bb = per_channel(tape, bnode, (b, self.c_out, h, w))?;
        tape.add(summed, bb)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// The coupling conditioner: 3x3 -> 1x1 -> 3x3 with logistic activations
/// between, hidden width fixed, final layer zero-initialized so the whole
/// net outputs exactly zero at initialization.
pub(crate) struct ConvNet {
    pub(crate) conv1: Conv3x3,
    pub(crate) w2: ParamId,
    pub(crate) b2: ParamId,
    pub(crate) conv3: Conv3x3,
    hidden: usize,
}

impl ConvNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        label: &str,
        c_in: usize,
        hidden: usize,
        c_out: usize,
    ) -> ConvNet {
        let conv1 = Conv3x3::new(store, rng, &format!("{label}.conv1"), c_in, hidden, Init::Gaussian);
        let w2 = store.register(
            format!("{label}.conv2.weight"),
            init_tensor(rng, &[hidden, hidden], Init::Gaussian),
        );
        let b2 = store.register(format!("{label}.conv2.bias"), Tensor::zeros(&[hidden]));
        let conv3 = Conv3x3::new(store, rng, &format!("{label}.conv3"), hidden, c_out, Init::Zero);
        ConvNet {
            conv1,
            w2,
            b2,
            conv3,
            hidden,
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (b, _, h, w) = dims4(tape.value(x))?;
        let h1 = self.conv1.forward(store, tape, x)?;
        let a1 = tape.sigmoid(h1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h2 = mix_channels(tape, a1, w2, Some(b2), (b, self.hidden, h, w), self.hidden)?;
        let a2 = tape.sigmoid(h2);
        self.conv3.forward(store, tape, a2)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.conv1.params();
        ids.push(self.w2);
        ids.push(self.b2);
        ids.extend(self.conv3.params());
        ids
    }
}

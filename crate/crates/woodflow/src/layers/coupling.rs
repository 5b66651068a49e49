//! Affine coupling: the first ceil(c/2) channels pass through unchanged and
//! condition an affine transform of the rest. The Jacobian is triangular, so
//! the log-determinant is just the sum of the log scales, and inversion
//! needs only one conditioner evaluation.

use super::net::ConvNet;
use super::dims4;
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::{concat_axis, sigmoid_stable, Tensor};
use crate::Real;
use rand::Rng;

/// Offset added to the raw scale before the logistic squash; at zero
/// initialization every scale is sigmoid(2) ~ 0.88, close to (but safely
/// below) 1.
const SCALE_RAW_OFFSET: Real = 2.0;

/// Raw-scale bias that forces the post-squash scale to round to exactly 1.0:
/// sigmoid(52) differs from 1 by ~2.6e-23, far below the 64-bit epsilon.
const IDENTITY_RAW_BIAS: Real = 50.0;

pub struct Coupling {
    label: String,
    net: ConvNet,
    c: usize,
    c_a: usize,
    c_b: usize,
}

impl Coupling {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        label: &str,
        c: usize,
        hidden: usize,
    ) -> Result<Coupling> {
        if c < 2 {
            return Err(Error::Config(format!(
                "{label}: coupling needs at least 2 channels, got {c}"
            )));
        }
        let c_a = c.div_ceil(2);
        let c_b = c - c_a;
        let net = ConvNet::new(store, rng, label, c_a, hidden, 2 * c_b);
        Ok(Coupling {
            label: label.to_string(),
            net,
            c,
            c_a,
            c_b,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Make the layer the exact identity: zero the final conditioner layer
    /// and bias its raw-scale half so the squashed scale rounds to 1.0.
    pub fn force_identity(&self, store: &mut ParamStore) -> Result<()> {
        let wshape = store.get(self.net.conv3.weight).shape().to_vec();
        store.set(self.net.conv3.weight, Tensor::zeros(&wshape))?;
        let mut bias = vec![0.0 as Real; 2 * self.c_b];
        for v in bias.iter_mut().take(self.c_b) {
            *v = IDENTITY_RAW_BIAS;
        }
        store.set(self.net.conv3.bias, Tensor::new(vec![2 * self.c_b], bias)?)
    }

    /// Run the conditioner on the pass-through half, returning the squashed
    /// scale node and the shift node, both shaped like the transformed half.
    fn conditioner(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x_a: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let raw = self.net.forward(store, tape, x_a)?;
        let raw_s = tape.slice(raw, 1, 0, self.c_b)?;
        let shift = tape.slice(raw, 1, self.c_b, 2 * self.c_b)?;
        let offset = tape.add_scalar(raw_s, SCALE_RAW_OFFSET)?;
        let s = tape.sigmoid(offset);
        Ok((s, shift))
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (_, c, _, _) = dims4(tape.value(x))?;
        if c != self.c {
            return Err(Error::Shape(format!(
                "{}: input has {c} channels, layer has {}",
                self.label, self.c
            )));
        }
        let x_a = tape.slice(x, 1, 0, self.c_a)?;
        let x_b = tape.slice(x, 1, self.c_a, self.c)?;
        let (s, shift) = self.conditioner(store, tape, x_a)?;
        let scaled = tape.mul(s, x_b)?;
        let y_b = tape.add(scaled, shift)?;
        let y = tape.concat(&[x_a, y_b], 1)?;
        let log_s = tape.ln(s);
        let ld = tape.sum(log_s, &[1, 2, 3])?;
        Ok((y, ld))
    }

    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = dims4(y)?;
        if c != self.c {
            return Err(Error::Shape(format!(
                "{}: input has {c} channels, layer has {}",
                self.label, self.c
            )));
        }
        let y_a = y.slice_axis(1, 0, self.c_a)?;
        let y_b = y.slice_axis(1, self.c_a, self.c)?;
        // The conditioner sees the pass-through half, which forward did not
        // change, so a throwaway tape reproduces forward's scale and shift
        // bitwise.
        let mut tape = Tape::new();
        let ya_node = tape.leaf(y_a.clone());
        let raw = self.net.forward(store, &mut tape, ya_node)?;
        let raw_t = tape.value(raw);
        let raw_s = raw_t.slice_axis(1, 0, self.c_b)?;
        let shift = raw_t.slice_axis(1, self.c_b, 2 * self.c_b)?;
        let s = raw_s.map(|v| sigmoid_stable(v + SCALE_RAW_OFFSET));
        let x_b = y_b.sub(&shift)?.div(&s)?;
        concat_axis(&[&y_a, &x_b], 1)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }
}

//! Per-channel affine layer with data-dependent initialization.

use super::{dims4, per_channel, per_sample};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Real;

pub struct ActNorm {
    label: String,
    pub(crate) scale: ParamId,
    pub(crate) bias: ParamId,
    initialized: bool,
    c: usize,
}

impl ActNorm {
    /// Starts as the identity but unusable until [`ActNorm::initialize`] (or
    /// a checkpoint restore) marks it ready.
    pub fn new(store: &mut ParamStore, label: &str, c: usize) -> ActNorm {
        let scale = store.register(format!("{label}.scale"), Tensor::full(&[c], 1.0));
        let bias = store.register(format!("{label}.bias"), Tensor::zeros(&[c]));
        ActNorm {
            label: label.to_string(),
            scale,
            bias,
            initialized: false,
            c,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Restore-time override (checkpoints record the flag).
    pub fn set_initialized(&mut self, initialized: bool) {
        self.initialized = initialized;
    }

    /// Data-dependent init: scale = 1/std, bias = -mean/std per channel, so
    /// the layer's output on this batch has per-channel mean 0 and std 1.
    /// Statistics are taken over the batch and both spatial axes.
    pub fn initialize(&mut self, store: &mut ParamStore, batch: &Tensor) -> Result<()> {
        let (b, c, h, w) = dims4(batch)?;
        if c != self.c {
            return Err(Error::Shape(format!(
                "{}: init batch has {c} channels, layer has {}",
                self.label, self.c
            )));
        }
        let count = (b * h * w) as Real;
        let mut scale = vec![0.0 as Real; c];
        let mut bias = vec![0.0 as Real; c];
        for ch in 0..c {
            let mut mean: Real = 0.0;
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        mean += batch.at(&[bi, ch, i, j]);
                    }
                }
            }
            mean /= count;
            let mut var: Real = 0.0;
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let d = batch.at(&[bi, ch, i, j]) - mean;
                        var += d * d;
                    }
                }
            }
            let std = (var / count).sqrt();
            if std == 0.0 {
                return Err(Error::Data(format!(
                    "{}: channel {ch} has zero standard deviation on the init \
                     batch; use a larger or noisier batch",
                    self.label
                )));
            }
            scale[ch] = 1.0 / std;
            bias[ch] = -mean / std;
        }
        store.set(self.scale, Tensor::new(vec![c], scale)?)?;
        store.set(self.bias, Tensor::new(vec![c], bias)?)?;
        self.initialized = true;
        Ok(())
    }

    /// Reset to the exact identity (scale 1, bias 0) and mark initialized.
    pub fn force_identity(&mut self, store: &mut ParamStore) -> Result<()> {
        store.set(self.scale, Tensor::full(&[self.c], 1.0))?;
        store.set(self.bias, Tensor::zeros(&[self.c]))?;
        self.initialized = true;
        Ok(())
    }

    /// `y = s * x + b` per channel; per-sample logdet is `h*w * sum log|s|`,
    /// written as `0.5 * log(s^2)` so it differentiates cleanly through
    /// negative scales.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        if !self.initialized {
            return Err(Error::Contract(format!(
                "{}: forward before data-dependent initialization",
                self.label
            )));
        }
        let dims = dims4(tape.value(x))?;
        let (b, _, h, w) = dims;
        let s = tape.param(store, self.scale);
        let bias = tape.param(store, self.bias);
        let sb = per_channel(tape, s, dims)?;
        let bb = per_channel(tape, bias, dims)?;
        let scaled = tape.mul(x, sb)?;
        let y = tape.add(scaled, bb)?;

        let s2 = tape.mul(s, s)?;
        let logs2 = tape.ln(s2);
        let total = tape.sum(logs2, &[0])?;
        let ld = tape.scale(total, 0.5 * (h * w) as Real)?;
        let ld_b = per_sample(tape, ld, b)?;
        Ok((y, ld_b))
    }

    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        if !self.initialized {
            return Err(Error::Contract(format!(
                "{}: inverse before data-dependent initialization",
                self.label
            )));
        }
        let dims = dims4(y)?;
        let (b, c, h, w) = dims;
        let s = store.get(self.scale);
        if s.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Singular {
                context: format!("{}: zero scale entry", self.label),
            });
        }
        let sb = s.reshaped(&[1, c, 1, 1])?.broadcast_to(&[b, c, h, w])?;
        let bb = store
            .get(self.bias)
            .reshaped(&[1, c, 1, 1])?
            .broadcast_to(&[b, c, h, w])?;
        y.sub(&bb)?.div(&sb)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.scale, self.bias]
    }
}

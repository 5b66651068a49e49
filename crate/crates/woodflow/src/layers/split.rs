//! Multi-scale factor-out: half the channels leave the main path here and
//! are scored under a learned conditional Gaussian whose mean and log-scale
//! come from a zero-initialized convolution of the retained half. At
//! initialization that prior is exactly standard normal.

use super::net::{Conv3x3, Init};
use super::dims4;
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::{concat_axis, Tensor};
use crate::Real;
use rand::Rng;

pub(crate) fn ln_2pi() -> Real {
    (2.0 * std::f64::consts::PI).ln() as Real
}

pub struct Split {
    label: String,
    prior: Conv3x3,
    c: usize,
    half: usize,
}

/// Tape handles produced by [`Split::forward`]: the retained half, the
/// factored-out half, and the per-sample log-probability of the factored
/// half under the conditional prior.
pub struct SplitForward {
    pub z_a: NodeId,
    pub z_b: NodeId,
    pub logp: NodeId,
}

impl Split {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        label: &str,
        c: usize,
    ) -> Result<Split> {
        if c % 2 != 0 || c == 0 {
            return Err(Error::Shape(format!(
                "{label}: split needs an even channel count, got {c}"
            )));
        }
        let half = c / 2;
        let prior = Conv3x3::new(store, rng, &format!("{label}.prior"), half, c, Init::Zero);
        Ok(Split {
            label: label.to_string(),
            prior,
            c,
            half,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Reset the prior to standard normal (zero conv).
    pub fn force_identity(&self, store: &mut ParamStore) -> Result<()> {
        let wshape = store.get(self.prior.weight).shape().to_vec();
        store.set(self.prior.weight, Tensor::zeros(&wshape))?;
        store.set(self.prior.bias, Tensor::zeros(&[self.c]))
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: NodeId) -> Result<SplitForward> {
        let (b, c, h, w) = dims4(tape.value(x))?;
        if c != self.c {
            return Err(Error::Shape(format!(
                "{}: input has {c} channels, layer has {}",
                self.label, self.c
            )));
        }
        let z_a = tape.slice(x, 1, 0, self.half)?;
        let z_b = tape.slice(x, 1, self.half, c)?;
        let pr = self.prior.forward(store, tape, z_a)?;
        let mu = tape.slice(pr, 1, 0, self.half)?;
        let log_sig = tape.slice(pr, 1, self.half, c)?;

        // sum over dims of 0.5*((z_b - mu)/sigma)^2 + log sigma, then negate
        // and subtract the (D/2) log 2*pi normalizer.
        let diff = tape.sub(z_b, mu)?;
        let neg_log_sig = tape.scale(log_sig, -1.0)?;
        let inv_sig = tape.exp(neg_log_sig);
        let zn = tape.mul(diff, inv_sig)?;
        let sq = tape.mul(zn, zn)?;
        let half_sq = tape.scale(sq, 0.5)?;
        let per_dim = tape.add(half_sq, log_sig)?;
        let summed = tape.sum(per_dim, &[1, 2, 3])?;
        let negated = tape.scale(summed, -1.0)?;
        let d_b = (self.half * h * w) as Real;
        let logp = tape.add_scalar(negated, -0.5 * d_b * ln_2pi())?;
        let _ = b;
        Ok(SplitForward { z_a, z_b, logp })
    }

    /// Exact inverse given both halves: concatenation. The prior parameters
    /// play no role in reconstruction.
    pub fn inverse(&self, z_a: &Tensor, z_b: &Tensor) -> Result<Tensor> {
        let (_, ca, ha, wa) = dims4(z_a)?;
        let (_, cb, hb, wb) = dims4(z_b)?;
        if ca != self.half || cb != self.half || ha != hb || wa != wb {
            return Err(Error::Shape(format!(
                "{}: halves ({ca}, {ha}, {wa}) and ({cb}, {hb}, {wb}) do not assemble",
                self.label
            )));
        }
        concat_axis(&[z_a, z_b], 1)
    }

    /// Conditional prior statistics for sampling: (mu, log_sigma), each with
    /// the retained half's shape.
    pub fn prior_stats(&self, store: &ParamStore, z_a: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, ca, _, _) = dims4(z_a)?;
        if ca != self.half {
            return Err(Error::Shape(format!(
                "{}: retained half has {ca} channels, expected {}",
                self.label, self.half
            )));
        }
        let mut tape = Tape::new();
        let za_node = tape.leaf(z_a.clone());
        let pr = self.prior.forward(store, &mut tape, za_node)?;
        let pr_t = tape.value(pr);
        let mu = pr_t.slice_axis(1, 0, self.half)?;
        let log_sig = pr_t.slice_axis(1, self.half, self.c)?;
        Ok((mu, log_sig))
    }

    /// Draw the factored-out half: `z_b = mu + temperature * sigma * eps`
    /// with `eps` standard normal noise shaped like the retained half.
    /// Temperature 0 returns the prior mean deterministically.
    pub fn draw(
        &self,
        store: &ParamStore,
        z_a: &Tensor,
        temperature: Real,
        eps: &Tensor,
    ) -> Result<Tensor> {
        if temperature < 0.0 {
            return Err(Error::Contract(format!(
                "{}: temperature must be nonnegative, got {temperature}",
                self.label
            )));
        }
        let (mu, log_sig) = self.prior_stats(store, z_a)?;
        if eps.shape() != mu.shape() {
            return Err(Error::Shape(format!(
                "{}: noise shape {:?} does not match half shape {:?}",
                self.label,
                eps.shape(),
                mu.shape()
            )));
        }
        let sigma = log_sig.map(Real::exp);
        mu.add(&sigma.mul(eps)?.scale(temperature))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.prior.params()
    }

    pub fn retained_channels(&self) -> usize {
        self.half
    }
}

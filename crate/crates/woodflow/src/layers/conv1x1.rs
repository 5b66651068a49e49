//! Invertible 1x1 convolution: one dense c x c mix shared across all spatial
//! positions. The baseline the low-rank layers are measured against.

use super::{channel_cols, channel_cols_back, dims4, per_sample};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{reshape_permute, Tensor};
use crate::Real;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian draw; |det| = 1 so
/// the layer starts volume-preserving.
fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> Tensor {
    let dist = Normal::new(0.0, 1.0).expect("valid std");
    'draw: loop {
        let mut cols: Vec<Vec<Real>> = (0..n)
            .map(|_| (0..n).map(|_| dist.sample(rng) as Real).collect())
            .collect();
        for j in 0..n {
            for k in 0..j {
                let dot: Real = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
                for i in 0..n {
                    cols[j][i] -= dot * cols[k][i];
                }
            }
            let norm: Real = (0..n).map(|i| cols[j][i] * cols[j][i]).sum::<Real>().sqrt();
            if norm < 1e-8 {
                continue 'draw; // essentially never: degenerate draw
            }
            for i in 0..n {
                cols[j][i] /= norm;
            }
        }
        let mut data = vec![0.0 as Real; n * n];
        for j in 0..n {
            for i in 0..n {
                data[i * n + j] = cols[j][i];
            }
        }
        return Tensor::new(vec![n, n], data).expect("square");
    }
}

pub struct Conv1x1 {
    label: String,
    pub(crate) m: ParamId,
    c: usize,
}

impl Conv1x1 {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, label: &str, c: usize) -> Conv1x1 {
        let m = store.register(format!("{label}.m"), random_orthogonal(rng, c));
        Conv1x1 {
            label: label.to_string(),
            m,
            c,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn force_identity(&self, store: &mut ParamStore) -> Result<()> {
        store.set(self.m, Tensor::eye(self.c))
    }

    /// `y = M x` per spatial position; per-sample logdet `h*w*log|det M|`.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let dims = dims4(tape.value(x))?;
        let (b, c, h, w) = dims;
        if c != self.c {
            return Err(Error::Shape(format!(
                "{}: input has {c} channels, layer has {}",
                self.label, self.c
            )));
        }
        let m = tape.param(store, self.m);
        let xv = channel_cols(tape, x, dims)?;
        let yv = tape.matmul(m, xv)?;
        let y = channel_cols_back(tape, yv, dims)?;
        let (ld1, _sign) = tape.slogdet(m).map_err(|e| match e {
            Error::Singular { .. } => Error::Singular {
                context: format!("{}: mixing matrix", self.label),
            },
            other => other,
        })?;
        let ld = tape.scale(ld1, (h * w) as Real)?;
        let ld_b = per_sample(tape, ld, b)?;
        Ok((y, ld_b))
    }

    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = dims4(y)?;
        let m = store.get(self.m);
        let mut lu = m.data().to_vec();
        let f = linalg::lu_factor_inplace(&mut lu, c);
        if f.sign == 0 {
            return Err(Error::Singular {
                context: format!("{}: mixing matrix", self.label),
            });
        }
        let yv = reshape_permute(y, &[1, 0, 2, 3], &[c, b * h * w])?;
        let mut data = yv.into_data();
        linalg::lu_solve_rows(&lu, &f.piv, c, &mut data, b * h * w)?;
        let xv = Tensor::new(vec![c, b, h, w], data)?;
        Ok(xv.permuted(&[1, 0, 2, 3])?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.m]
    }
}

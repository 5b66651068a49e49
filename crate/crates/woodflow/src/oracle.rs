//! Brute-force reference implementations for the test suite.
//!
//! Everything here is deliberately naive: dense Jacobians built one column at
//! a time and determinants taken on the full D x D matrix. The fast paths in
//! the layer code are validated against these, never the other way around.

use crate::error::{Error, Result};
use crate::tensor::{slogdet_lu, Tensor};
use crate::{Real, SLogDet};

const MAX_DIM: usize = 4096;

fn check_dim(dim: usize) -> Result<()> {
    if dim > MAX_DIM {
        return Err(Error::Contract(format!(
            "dense jacobian refused for dimension {dim} (limit {MAX_DIM})"
        )));
    }
    Ok(())
}

fn check_output(y: &Tensor, dim: usize, what: &str) -> Result<()> {
    if y.len() != dim {
        return Err(Error::Shape(format!(
            "{what}: map produced {} outputs for {dim} inputs; jacobian must be square",
            y.len()
        )));
    }
    if !y.all_finite() {
        return Err(Error::NonFinite(format!("{what}: map output")));
    }
    Ok(())
}

/// Dense Jacobian of a *linear* map, column `j` = `f(e_j) - f(0)`.
///
/// `f` maps a flat vector of length `dim` to a flat vector of the same
/// length; the caller adapts any tensor layout on both ends. Exact up to
/// float rounding, which is why linear layers are tested against this rather
/// than finite differences.
pub fn dense_jacobian_linear<F>(f: F, dim: usize) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    check_dim(dim)?;
    let zero_out = f(&Tensor::zeros(&[dim]))?;
    check_output(&zero_out, dim, "dense_jacobian_linear")?;
    let mut jac = vec![0.0 as Real; dim * dim];
    let mut basis = Tensor::zeros(&[dim]);
    for j in 0..dim {
        basis.data_mut()[j] = 1.0;
        let col = f(&basis)?;
        check_output(&col, dim, "dense_jacobian_linear")?;
        basis.data_mut()[j] = 0.0;
        for i in 0..dim {
            jac[i * dim + j] = col.data()[i] - zero_out.data()[i];
        }
    }
    Tensor::new(vec![dim, dim], jac)
}

/// Dense Jacobian of a smooth map at `x` by central differences with the
/// given step. Works for any differentiable map; use
/// [`dense_jacobian_linear`] instead whenever the map is linear.
pub fn fd_jacobian<F>(f: F, x: &Tensor, step: Real) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if step <= 0.0 {
        return Err(Error::Contract(format!(
            "fd_jacobian needs a positive step, got {step}"
        )));
    }
    let dim = x.len();
    check_dim(dim)?;
    let mut jac = vec![0.0 as Real; dim * dim];
    let mut probe = x.clone();
    for j in 0..dim {
        let orig = x.data()[j];
        probe.data_mut()[j] = orig + step;
        let plus = f(&probe)?;
        check_output(&plus, dim, "fd_jacobian")?;
        probe.data_mut()[j] = orig - step;
        let minus = f(&probe)?;
        check_output(&minus, dim, "fd_jacobian")?;
        probe.data_mut()[j] = orig;
        let scale = 1.0 / (2.0 * step);
        for i in 0..dim {
            jac[i * dim + j] = (plus.data()[i] - minus.data()[i]) * scale;
        }
    }
    Tensor::new(vec![dim, dim], jac)
}

/// Sign and log|det| of a dense Jacobian via LU on the whole matrix — the
/// O(D^3) ground truth the structured layer formulas are checked against.
/// Singular matrices come back with `sign == 0`, not an error.
pub fn brute_logdet(jacobian: &Tensor) -> Result<SLogDet> {
    slogdet_lu(jacobian)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, max_abs_diff};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn apply_matrix(m: &Tensor) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
        move |x: &Tensor| {
            let col = x.reshaped(&[x.len(), 1])?;
            let y = matmul(m, &col)?;
            y.reshaped(&[x.len()])
        }
    }

    #[test]
    fn linear_jacobian_recovers_the_matrix() {
        let m = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let jac = dense_jacobian_linear(apply_matrix(&m), 2).unwrap();
        assert!(max_abs_diff(&jac, &m) < 1e-15);
    }

    #[test]
    fn affine_offset_is_subtracted_out() {
        // f(x) = M x + t must still give J = M.
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let t = Tensor::new(vec![2], vec![10.0, -4.0]).unwrap();
        let f = |x: &Tensor| {
            let col = x.reshaped(&[2, 1])?;
            let y = matmul(&m, &col)?;
            y.reshaped(&[2])?.add(&t)
        };
        let jac = dense_jacobian_linear(f, 2).unwrap();
        assert!(max_abs_diff(&jac, &m) < 1e-15);
    }

    #[test]
    fn fd_matches_exact_on_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Tensor::new(
            vec![6, 6],
            (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let exact = dense_jacobian_linear(apply_matrix(&m), 6).unwrap();
        let x = Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let fd = fd_jacobian(apply_matrix(&m), &x, 1e-5).unwrap();
        assert!(max_abs_diff(&exact, &fd) < 1e-6);
    }

    #[test]
    fn fd_of_identity_is_identity() {
        let x = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.0]).unwrap();
        let jac = fd_jacobian(|v| Ok(v.clone()), &x, 1e-5).unwrap();
        assert!(max_abs_diff(&jac, &Tensor::eye(4)) < 1e-9);
    }

    #[test]
    fn fd_of_elementwise_square_is_the_diagonal() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let jac = fd_jacobian(|v| Ok(v.map(|t| t * t)), &x, 1e-5).unwrap();
        let want = Tensor::new(
            vec![3, 3],
            vec![2.0, 0.0, 0.0, 0.0, -4.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert!(max_abs_diff(&jac, &want) < 1e-8);
    }

    #[test]
    fn brute_logdet_basics() {
        assert_eq!(brute_logdet(&Tensor::eye(5)).unwrap().sign, 1);
        assert_eq!(brute_logdet(&Tensor::eye(5)).unwrap().logabs, 0.0);
        // A permutation matrix: |det| = 1, sign from parity.
        let p = Tensor::new(
            vec![3, 3],
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let s = brute_logdet(&p).unwrap();
        assert_eq!(s.sign, 1); // 3-cycle = even permutation
        assert!(s.logabs.abs() < 1e-15);
        let singular = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert_eq!(brute_logdet(&singular).unwrap().sign, 0);
    }

    /// LU with the opposite pivot tie-break (last maximal row instead of
    /// first). The permutation can differ; |det| must not.
    fn slogdet_alt_tiebreak(a: &Tensor) -> SLogDet {
        let n = a.shape()[0];
        let mut m = a.data().to_vec();
        let mut sign: Real = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = m[k * n + k].abs();
            for r in (k + 1)..n {
                if m[r * n + k].abs() >= best {
                    best = m[r * n + k].abs();
                    p = r;
                }
            }
            if best == 0.0 {
                return SLogDet {
                    sign: 0,
                    logabs: Real::NEG_INFINITY,
                };
            }
            if p != k {
                for j in 0..n {
                    m.swap(k * n + j, p * n + j);
                }
                sign = -sign;
            }
            let d = m[k * n + k];
            for r in (k + 1)..n {
                let l = m[r * n + k] / d;
                for j in k..n {
                    m[r * n + j] -= l * m[k * n + j];
                }
            }
        }
        let mut logabs: Real = 0.0;
        for i in 0..n {
            let d = m[i * n + i];
            if d < 0.0 {
                sign = -sign;
            }
            logabs += d.abs().ln();
        }
        SLogDet {
            sign: if sign > 0.0 { 1 } else { -1 },
            logabs,
        }
    }

    #[test]
    fn logdet_agrees_across_pivot_tiebreaks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a = Tensor::new(
                vec![20, 20],
                (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let ours = brute_logdet(&a).unwrap();
            let alt = slogdet_alt_tiebreak(&a);
            assert_eq!(ours.sign, alt.sign);
            assert!((ours.logabs - alt.logabs).abs() < 1e-10);
        }
    }

    #[test]
    fn oversized_jacobian_is_refused() {
        let err = dense_jacobian_linear(|v| Ok(v.clone()), 4097);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn non_square_map_is_rejected() {
        let err = dense_jacobian_linear(|v| v.slice_axis(0, 0, 1), 3);
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}

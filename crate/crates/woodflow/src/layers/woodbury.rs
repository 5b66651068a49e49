//! Low-rank invertible channel and spatial mixing.
//!
//! The layer applies `y = (I + U_c V_c) x (I + U_s V_s)` on each sample's
//! `(c, n)` view, n = h*w, but never forms either full matrix:
//!
//! - forward multiplies in low-rank order, `x + U_c (V_c x)` then
//!   `x_c + (x_c U_s) V_s`, which is O(d*c*n);
//! - the log-determinant passes through the determinant identity
//!   `det(I + UV) = det(I + VU)`, so only d x d determinants are taken;
//! - the inverse uses the matrix-inversion identity
//!   `(I + UV)^{-1} = I - U (I + VU)^{-1} V`, again only inverting d x d.
//!
//! With both V factors zero-initialized the layer starts as the exact
//! identity with exactly zero log-determinant.

use super::{channel_cols, channel_cols_back, dims4, per_sample};
use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::{inverse_small, matmul, slogdet_lu, Tensor};
use crate::Real;
use rand::Rng;

use super::net::{init_tensor, Init};

pub struct Woodbury {
    label: String,
    pub(crate) u_c: ParamId,
    pub(crate) v_c: ParamId,
    pub(crate) u_s: ParamId,
    pub(crate) v_s: ParamId,
    c: usize,
    h: usize,
    w: usize,
}

impl Woodbury {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        label: &str,
        c: usize,
        h: usize,
        w: usize,
        d_c: usize,
        d_s: usize,
    ) -> Result<Woodbury> {
        let n = h * w;
        if d_c == 0 || d_c > c {
            return Err(Error::Config(format!(
                "{label}: channel rank {d_c} out of range 1..={c}"
            )));
        }
        if d_s == 0 || d_s > n {
            return Err(Error::Config(format!(
                "{label}: spatial rank {d_s} out of range 1..={n}"
            )));
        }
        let u_c = store.register(
            format!("{label}.u_c"),
            init_tensor(rng, &[c, d_c], Init::Gaussian),
        );
        let v_c = store.register(format!("{label}.v_c"), Tensor::zeros(&[d_c, c]));
        let u_s = store.register(
            format!("{label}.u_s"),
            init_tensor(rng, &[n, d_s], Init::Gaussian),
        );
        let v_s = store.register(format!("{label}.v_s"), Tensor::zeros(&[d_s, n]));
        Ok(Woodbury {
            label: label.to_string(),
            u_c,
            v_c,
            u_s,
            v_s,
            c,
            h,
            w,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Zero both V factors: the layer becomes the exact identity.
    pub fn force_identity(&self, store: &mut ParamStore) -> Result<()> {
        let d_c = store.get(self.v_c).shape()[0];
        let d_s = store.get(self.v_s).shape()[0];
        store.set(self.v_c, Tensor::zeros(&[d_c, self.c]))?;
        store.set(self.v_s, Tensor::zeros(&[d_s, self.h * self.w]))?;
        Ok(())
    }

    fn check_dims(&self, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = dims4(t)?;
        if c != self.c || h != self.h || w != self.w {
            return Err(Error::Shape(format!(
                "{}: input ({c}, {h}, {w}) does not match layer ({}, {}, {})",
                self.label, self.c, self.h, self.w
            )));
        }
        Ok((b, c, h, w))
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let dims = self.check_dims(tape.value(x))?;
        let (b, c, h, w) = dims;
        let n = h * w;

        let u_c = tape.param(store, self.u_c);
        let v_c = tape.param(store, self.v_c);
        let u_s = tape.param(store, self.u_s);
        let v_s = tape.param(store, self.v_s);

        // Channel mix, left product on the (c, b*n) view.
        let xv = channel_cols(tape, x, dims)?;
        let vx = tape.matmul(v_c, xv)?;
        let uvx = tape.matmul(u_c, vx)?;
        let xc_v = tape.add(xv, uvx)?;
        let xc = channel_cols_back(tape, xc_v, dims)?;

        // Spatial mix, right product on the (b*c, n) view.
        let xs = tape.reshape(xc, &[b * c, n])?;
        let xu = tape.matmul(xs, u_s)?;
        let xuv = tape.matmul(xu, v_s)?;
        let ys = tape.add(xs, xuv)?;
        let y = tape.reshape(ys, &[b, c, h, w])?;

        // Per-sample logdet through the small inner determinants.
        let ld_c = self.inner_logdet(tape, v_c, u_c, "channel")?;
        let ld_s = self.inner_logdet(tape, v_s, u_s, "spatial")?;
        let term_c = tape.scale(ld_c, n as Real)?;
        let term_s = tape.scale(ld_s, c as Real)?;
        let ld = tape.add(term_c, term_s)?;
        let ld_b = per_sample(tape, ld, b)?;
        Ok((y, ld_b))
    }

    fn inner_logdet(
        &self,
        tape: &mut Tape,
        v: NodeId,
        u: NodeId,
        part: &str,
    ) -> Result<NodeId> {
        let d = tape.value(v).shape()[0];
        let vu = tape.matmul(v, u)?;
        let eye = tape.leaf(Tensor::eye(d));
        let inner = tape.add(eye, vu)?;
        let (ld, _sign) = tape.slogdet(inner).map_err(|e| match e {
            Error::Singular { .. } => Error::Singular {
                context: format!("{}: {part} inner matrix", self.label),
            },
            other => other,
        })?;
        Ok(ld)
    }

    /// The whole inverse edits one owned `(b*c, n)` buffer; the only other
    /// buffers that scale with the input are the two rank-projected
    /// `(d_c, n)` scratch blocks for the channel stage. Keeping the sampling
    /// path this lean is the point of the low-rank structure.
    pub fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = self.check_dims(y)?;
        let n = h * w;
        let mut x = y.data().to_vec();

        // Spatial inverse: x = y - ((y U_s) K_s^{-1}) V_s, K_s = I + V_s U_s,
        // on the (b*c, n) view. Both intermediates are (b*c, d_s).
        let u_s = store.get(self.u_s);
        let v_s = store.get(self.v_s);
        let d_s = v_s.shape()[0];
        let k_s = Tensor::eye(d_s).add(&matmul(v_s, u_s)?)?;
        let k_s_inv = inverse_small(&k_s).map_err(|e| match e {
            Error::Singular { .. } => Error::Singular {
                context: format!("{}: spatial inner matrix", self.label),
            },
            other => other,
        })?;
        let rows = b * c;
        let yu = linalg::gemm(rows, n, d_s, &x, u_s.data());
        let yuk = linalg::gemm(rows, d_s, d_s, &yu, k_s_inv.data());
        linalg::gemm_acc(rows, d_s, n, -1.0, &yuk, d_s, v_s.data(), n, &mut x, n);

        // Channel inverse: x = x_c - U_c ((K_c^{-1} V_c) x_c), applied to
        // each sample's contiguous (c, n) block. Folding K_c^{-1} into V_c
        // up front (a d x c product) leaves one rank-d_c scratch block.
        let u_c = store.get(self.u_c);
        let v_c = store.get(self.v_c);
        let d_c = v_c.shape()[0];
        let k_c = Tensor::eye(d_c).add(&matmul(v_c, u_c)?)?;
        let k_c_inv = inverse_small(&k_c).map_err(|e| match e {
            Error::Singular { .. } => Error::Singular {
                context: format!("{}: channel inner matrix", self.label),
            },
            other => other,
        })?;
        let kv = matmul(&k_c_inv, v_c)?;
        let mut proj = vec![0.0 as Real; d_c * n];
        for s in 0..b {
            let block = &mut x[s * c * n..(s + 1) * c * n];
            proj.fill(0.0);
            linalg::gemm_acc(d_c, c, n, 1.0, kv.data(), c, block, n, &mut proj, n);
            linalg::gemm_acc(c, d_c, n, -1.0, u_c.data(), d_c, &proj, n, block, n);
        }
        Tensor::new(vec![b, c, h, w], x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.u_c, self.v_c, self.u_s, self.v_s]
    }
}

/// Outcome of checking the two low-rank identities densely for one (U, V)
/// pair: how far `(I + UV)(I - U (I + VU)^{-1} V)` is from the identity, and
/// how far the two log-determinants disagree.
#[derive(Debug, Clone, Copy)]
pub enum IdentityCheck {
    Ok {
        inverse_residual: Real,
        logdet_residual: Real,
    },
    /// `I + VU` is singular; the identities do not apply. Reported rather
    /// than raised so property tests can count and skip such draws.
    SingularInner,
}

pub fn woodbury_identity_check(u: &Tensor, v: &Tensor) -> Result<IdentityCheck> {
    if u.ndim() != 2 || v.ndim() != 2 || u.shape()[0] != v.shape()[1] || u.shape()[1] != v.shape()[0]
    {
        return Err(Error::Shape(format!(
            "identity check needs U (n, k) and V (k, n), got {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let n = u.shape()[0];
    let k = u.shape()[1];
    let big = Tensor::eye(n).add(&matmul(u, v)?)?;
    let inner = Tensor::eye(k).add(&matmul(v, u)?)?;
    let inner_inv = match inverse_small(&inner) {
        Ok(m) => m,
        Err(Error::Singular { .. }) => return Ok(IdentityCheck::SingularInner),
        Err(e) => return Err(e),
    };
    let correction = matmul(&matmul(u, &inner_inv)?, v)?;
    let claimed_inverse = Tensor::eye(n).sub(&correction)?;
    let product = matmul(&big, &claimed_inverse)?;
    let inverse_residual = product.sub(&Tensor::eye(n))?.max_abs();

    let ld_big = slogdet_lu(&big)?;
    let ld_inner = slogdet_lu(&inner)?;
    let logdet_residual = (ld_big.logabs - ld_inner.logabs).abs();
    Ok(IdentityCheck::Ok {
        inverse_residual,
        logdet_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{assert_logdet_matches_dense, rand_activation};
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, shape: &[usize], data: &[Real]) {
        store
            .set(id, Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
            .unwrap();
    }

    fn randomize(store: &mut ParamStore, layer: &Woodbury, rng: &mut ChaCha8Rng, scale: Real) {
        for id in layer.params() {
            let shape = store.get(id).shape().to_vec();
            store
                .set(id, rand_activation(rng, &shape).scale(scale))
                .unwrap();
        }
    }

    #[test]
    fn rank_bounds_are_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(
            Woodbury::new(&mut store, &mut rng, "wb", 4, 2, 2, 5, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Woodbury::new(&mut store, &mut rng, "wb", 4, 2, 2, 1, 5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Woodbury::new(&mut store, &mut rng, "wb", 4, 2, 2, 0, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fresh_layer_is_exact_identity_with_exact_zero_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 3, 2, 2, 2, 3).unwrap();
        let x = rand_activation(&mut rng, &[2, 3, 2, 2]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let (y, ld) = layer.forward(&store, &mut tape, xn).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
        assert_eq!(tape.value(ld).data(), &[0.0, 0.0]);
        let back = layer.inverse(&store, tape.value(y)).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn spatial_shear_example() {
        // c=1, n=2: U_s = [[1],[0]], V_s = [[0,1]] is a shear; x = [1, 2]
        // maps to [1, 3] and V_s U_s = 0 makes the logdet exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 1, 1, 2, 1, 1).unwrap();
        set(&mut store, layer.u_c, &[1, 1], &[0.0]);
        set(&mut store, layer.u_s, &[2, 1], &[1.0, 0.0]);
        set(&mut store, layer.v_s, &[1, 2], &[0.0, 1.0]);
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let (y, ld) = layer.forward(&store, &mut tape, xn).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0]);
        assert_eq!(tape.value(ld).data(), &[0.0]); // exact: V_s U_s == 0

        let back = layer.inverse(&store, tape.value(y)).unwrap();
        assert_eq!(back.data(), &[1.0, 2.0]);
        assert_logdet_matches_dense(|s, t, x| layer.forward(s, t, x), &store, &x, 0.0, 1e-12);
    }

    #[test]
    fn channel_example() {
        // c=2, n=1: U_c = [[1],[1]], V_c = [[1,0]] gives the dense transform
        // [[2,0],[1,1]]; x = (3, 4) maps to (6, 7) with logdet ln 2.
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 2, 1, 1, 1, 1).unwrap();
        set(&mut store, layer.u_c, &[2, 1], &[1.0, 1.0]);
        set(&mut store, layer.v_c, &[1, 2], &[1.0, 0.0]);
        set(&mut store, layer.u_s, &[1, 1], &[0.0]);
        let x = Tensor::new(vec![1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let (y, ld) = layer.forward(&store, &mut tape, xn).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0, 7.0]);
        let analytic = tape.value(ld).data()[0];
        assert!((analytic - (2.0 as Real).ln()).abs() < 1e-14);
        assert_logdet_matches_dense(
            |s, t, x| layer.forward(s, t, x),
            &store,
            &x,
            analytic,
            1e-12,
        );
        let back = layer.inverse(&store, tape.value(y)).unwrap();
        assert!(max_abs_diff(&back, &x) < 1e-12);
    }

    #[test]
    fn dense_jacobian_has_kronecker_structure() {
        // For y = W_c X W_s under row-major (c, n) flattening, the Jacobian
        // entry at (i*n+p, u*n+q) must be W_c[i,u] * W_s[q,p].
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 2, 1, 3, 1, 1).unwrap();
        randomize(&mut store, &layer, &mut rng, 0.4);
        let (c, n) = (2, 3);
        let w_c = Tensor::eye(c)
            .add(&matmul(store.get(layer.u_c), store.get(layer.v_c)).unwrap())
            .unwrap();
        let w_s = Tensor::eye(n)
            .add(&matmul(store.get(layer.u_s), store.get(layer.v_s)).unwrap())
            .unwrap();
        let jac = crate::oracle::dense_jacobian_linear(
            crate::layers::testutil::flat_forward(
                |t, x| layer.forward(&store, t, x).map(|(y, _)| y),
                &[1, c, 1, n],
            ),
            c * n,
        )
        .unwrap();
        for i in 0..c {
            for p in 0..n {
                for u in 0..c {
                    for q in 0..n {
                        let want = w_c.at(&[i, u]) * w_s.at(&[q, p]);
                        let got = jac.at(&[i * n + p, u * n + q]);
                        assert!((got - want).abs() < 1e-12, "({i},{p},{u},{q})");
                    }
                }
            }
        }
    }

    #[test]
    fn random_logdet_matches_dense_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for trial in 0..20 {
            let mut store = ParamStore::new();
            let layer = Woodbury::new(&mut store, &mut rng, "wb", 4, 2, 3, 2, 3).unwrap();
            randomize(&mut store, &layer, &mut rng, 0.3);
            let x = rand_activation(&mut rng, &[1, 4, 2, 3]);
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let (_, ld) = layer.forward(&store, &mut tape, xn).unwrap();
            let analytic = tape.value(ld).data()[0];
            assert_logdet_matches_dense(
                |s, t, x| layer.forward(s, t, x),
                &store,
                &x,
                analytic,
                1e-8,
            );
            let _ = trial;
        }
    }

    #[test]
    fn low_rank_forward_matches_dense_materialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 5, 2, 4, 3, 4).unwrap();
        randomize(&mut store, &layer, &mut rng, 0.3);
        let (c, n) = (5, 8);
        let w_c = Tensor::eye(c)
            .add(&matmul(store.get(layer.u_c), store.get(layer.v_c)).unwrap())
            .unwrap();
        let w_s = Tensor::eye(n)
            .add(&matmul(store.get(layer.u_s), store.get(layer.v_s)).unwrap())
            .unwrap();
        let x = rand_activation(&mut rng, &[3, 5, 2, 4]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let (y, _) = layer.forward(&store, &mut tape, xn).unwrap();
        // Dense per-sample application.
        for bi in 0..3 {
            let xi = x.slice_axis(0, bi, bi + 1).unwrap().reshaped(&[c, n]).unwrap();
            let dense = matmul(&matmul(&w_c, &xi).unwrap(), &w_s).unwrap();
            let got = tape
                .value(y)
                .slice_axis(0, bi, bi + 1)
                .unwrap()
                .reshaped(&[c, n])
                .unwrap();
            assert!(max_abs_diff(&dense, &got) < 1e-10);
        }
    }

    #[test]
    fn round_trips_on_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 6, 2, 4, 4, 4).unwrap();
        for _ in 0..100 {
            randomize(&mut store, &layer, &mut rng, 0.3);
            let x = rand_activation(&mut rng, &[2, 6, 2, 4]);
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let (y, _) = layer.forward(&store, &mut tape, xn).unwrap();
            let back = layer.inverse(&store, tape.value(y)).unwrap();
            assert!(max_abs_diff(&back, &x) < 1e-9);
        }
    }

    #[test]
    fn singular_inner_matrix_is_a_named_error() {
        // V_c U_c = -1 makes the channel inner matrix exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 2, 1, 1, 1, 1).unwrap();
        set(&mut store, layer.u_c, &[2, 1], &[1.0, 0.0]);
        set(&mut store, layer.v_c, &[1, 2], &[-1.0, 0.0]);
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        match layer.forward(&store, &mut tape, xn) {
            Err(Error::Singular { context }) => assert!(context.contains("channel")),
            other => panic!("expected singular error, got {other:?}"),
        }
        match layer.inverse(&store, &x) {
            Err(Error::Singular { context }) => assert!(context.contains("channel")),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn identity_check_unipotent_example() {
        let u = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        match woodbury_identity_check(&u, &v).unwrap() {
            IdentityCheck::Ok {
                inverse_residual,
                logdet_residual,
            } => {
                assert!(inverse_residual < 1e-12);
                assert!(logdet_residual < 1e-12);
            }
            IdentityCheck::SingularInner => panic!("inner is 1x1 identity"),
        }
    }

    #[test]
    fn identity_check_rank_one_determinant() {
        // U = (1, 2)^T, V = (3, 4): det(I + UV) = 12 = 1 + VU.
        let u = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let big = Tensor::eye(2).add(&matmul(&u, &v).unwrap()).unwrap();
        let sd = slogdet_lu(&big).unwrap();
        assert_eq!(sd.sign, 1);
        assert!((sd.logabs - (12.0 as Real).ln()).abs() < 1e-12);
        match woodbury_identity_check(&u, &v).unwrap() {
            IdentityCheck::Ok { logdet_residual, .. } => assert!(logdet_residual < 1e-12),
            IdentityCheck::SingularInner => panic!("1 + VU = 12, not singular"),
        }
    }

    #[test]
    fn identity_check_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        for _ in 0..200 {
            let u = rand_activation(&mut rng, &[12, 3]).scale(0.3);
            let v = rand_activation(&mut rng, &[3, 12]).scale(0.3);
            match woodbury_identity_check(&u, &v).unwrap() {
                IdentityCheck::Ok {
                    inverse_residual,
                    logdet_residual,
                } => {
                    assert!(inverse_residual < 1e-9, "inverse residual {inverse_residual}");
                    assert!(logdet_residual < 1e-9, "logdet residual {logdet_residual}");
                }
                IdentityCheck::SingularInner => panic!("draws this small stay nonsingular"),
            }
        }
    }

    #[test]
    fn identity_check_reports_singular_inner() {
        let u = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![-1.0, 0.0]).unwrap();
        assert!(matches!(
            woodbury_identity_check(&u, &v).unwrap(),
            IdentityCheck::SingularInner
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let mut store = ParamStore::new();
        let layer = Woodbury::new(&mut store, &mut rng, "wb", 3, 2, 2, 2, 2).unwrap();
        randomize(&mut store, &layer, &mut rng, 0.3);
        let x = rand_activation(&mut rng, &[2, 3, 2, 2]);
        let report = crate::autodiff::check_gradients(
            &store,
            &layer.params(),
            |s, t| {
                let xn = t.leaf(x.clone());
                let (y, ld) = layer.forward(s, t, xn)?;
                let sq = t.mul(y, y)?;
                let data_term = t.sum(sq, &[0, 1, 2, 3])?;
                let ld_term = t.sum(ld, &[0])?;
                t.add(data_term, ld_term)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}

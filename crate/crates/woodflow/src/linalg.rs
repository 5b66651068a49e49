//! Dense kernels: blocked GEMM, LU with partial pivoting, triangular solves.
//!
//! Everything here works on flat row-major `&[Real]` buffers with explicit row
//! strides so the same code serves whole matrices and submatrix views. The
//! GEMM packs panels and runs a fixed-size register tile, which is enough to
//! keep the O(n^3) benchmark comparator honest on one core without reaching
//! for assembly or an external BLAS.

use crate::Real;
use crate::error::{Error, Result};

/// Register tile height (rows of A per micro-kernel call).
const MR: usize = 4;
/// Register tile width (columns of B per micro-kernel call).
const NR: usize = 16;
/// K-dimension panel depth.
const KC: usize = 256;
/// Row-panel height for A packing.
const MC: usize = 128;
/// Column width of LU / solve panels.
const NB: usize = 64;

/// `c[0..m,0..n] += alpha * a[0..m,0..k] * b[0..k,0..n]`, row-major with row
/// strides `lda`, `ldb`, `ldc`.
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    lda: usize,
    b: &[Real],
    ldb: usize,
    c: &mut [Real],
    ldc: usize,
) {
    if m == 0 || k == 0 || n == 0 || alpha == 0.0 {
        return;
    }
    // Small problems: plain saxpy loops beat the packing overhead.
    if m * k * n <= 128 * 128 * 128 {
        gemm_naive(m, k, n, alpha, a, lda, b, ldb, c, ldc);
        return;
    }
    let n_tiles = n.div_ceil(NR);
    let mut bp = vec![0.0 as Real; KC * n_tiles * NR];
    let mut ap = vec![0.0 as Real; MC * KC];
    let mut pc = 0;
    while pc < k {
        let kc = KC.min(k - pc);
        pack_b(kc, n, &b[pc * ldb..], ldb, &mut bp);
        let mut ic = 0;
        while ic < m {
            let mc = MC.min(m - ic);
            pack_a(mc, kc, &a[ic * lda + pc..], lda, &mut ap);
            for jt in 0..n_tiles {
                let j0 = jt * NR;
                let nr = NR.min(n - j0);
                let btile = &bp[jt * KC * NR..jt * KC * NR + kc * NR];
                let mut it = 0;
                while it < mc {
                    let mr = MR.min(mc - it);
                    let atile = &ap[it * KC..it * KC + kc * MR];
                    let coff = (ic + it) * ldc + j0;
                    if mr == MR && nr == NR {
                        kernel_full(kc, atile, btile, alpha, &mut c[coff..], ldc);
                    } else {
                        kernel_edge(kc, mr, nr, atile, btile, alpha, &mut c[coff..], ldc);
                    }
                    it += MR;
                }
            }
            ic += MC;
        }
        pc += KC;
    }
}

/// Convenience wrapper: freshly allocated `a * b` for contiguous matrices.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[Real], b: &[Real]) -> Vec<Real> {
    let mut c = vec![0.0 as Real; m * n];
    gemm_acc(m, k, n, 1.0, a, k, b, n, &mut c, n);
    c
}

fn gemm_naive(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    lda: usize,
    b: &[Real],
    ldb: usize,
    c: &mut [Real],
    ldc: usize,
) {
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        for p in 0..k {
            let av = alpha * a[i * lda + p];
            if av != 0.0 {
                let brow = &b[p * ldb..p * ldb + n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * *bv;
                }
            }
        }
    }
}

/// Pack a `kc x n` slab of B into NR-wide column tiles, zero padding the
/// right edge so the micro-kernel never branches on width.
fn pack_b(kc: usize, n: usize, b: &[Real], ldb: usize, bp: &mut [Real]) {
    let n_tiles = n.div_ceil(NR);
    for jt in 0..n_tiles {
        let j0 = jt * NR;
        let nr = NR.min(n - j0);
        let tile = &mut bp[jt * KC * NR..(jt * KC * NR) + kc * NR];
        for kk in 0..kc {
            let src = &b[kk * ldb + j0..kk * ldb + j0 + nr];
            let dst = &mut tile[kk * NR..kk * NR + NR];
            dst[..nr].copy_from_slice(src);
            for v in &mut dst[nr..] {
                *v = 0.0;
            }
        }
    }
}

/// Pack an `mc x kc` slab of A into MR-tall row tiles (column-major within a
/// tile so the kernel reads MR coefficients per k step), zero padding the
/// bottom edge.
fn pack_a(mc: usize, kc: usize, a: &[Real], lda: usize, ap: &mut [Real]) {
    let m_tiles = mc.div_ceil(MR);
    for it in 0..m_tiles {
        let i0 = it * MR;
        let mr = MR.min(mc - i0);
        let tile = &mut ap[it * KC * MR..it * KC * MR + kc * MR];
        for kk in 0..kc {
            for r in 0..MR {
                tile[kk * MR + r] = if r < mr { a[(i0 + r) * lda + kk] } else { 0.0 };
            }
        }
    }
}

#[inline]
fn kernel_full(kc: usize, ap: &[Real], bp: &[Real], alpha: Real, c: &mut [Real], ldc: usize) {
    let mut acc = [[0.0 as Real; NR]; MR];
    for kk in 0..kc {
        let av = &ap[kk * MR..kk * MR + MR];
        let bv = &bp[kk * NR..kk * NR + NR];
        for r in 0..MR {
            let ar = av[r];
            let accr = &mut acc[r];
            for j in 0..NR {
                accr[j] += ar * bv[j];
            }
        }
    }
    for r in 0..MR {
        let crow = &mut c[r * ldc..r * ldc + NR];
        for j in 0..NR {
            crow[j] += alpha * acc[r][j];
        }
    }
}

#[inline]
fn kernel_edge(
    kc: usize,
    mr: usize,
    nr: usize,
    ap: &[Real],
    bp: &[Real],
    alpha: Real,
    c: &mut [Real],
    ldc: usize,
) {
    let mut acc = [[0.0 as Real; NR]; MR];
    for kk in 0..kc {
        let av = &ap[kk * MR..kk * MR + MR];
        let bv = &bp[kk * NR..kk * NR + NR];
        for r in 0..MR {
            let ar = av[r];
            let accr = &mut acc[r];
            for j in 0..NR {
                accr[j] += ar * bv[j];
            }
        }
    }
    for r in 0..mr {
        let crow = &mut c[r * ldc..r * ldc + nr];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += alpha * acc[r][j];
        }
    }
}

/// Result of an in-place LU factorization with partial pivoting.
///
/// `piv[j]` is the row swapped into position `j` at elimination step `j`
/// (LAPACK convention). `sign` is the permutation parity, or 0 when an exact
/// zero pivot made the matrix singular (the factorization stops there; the
/// determinant is exactly zero).
pub(crate) struct LuFactors {
    pub piv: Vec<usize>,
    pub sign: i32,
}

/// Factor `a` (n x n, row-major) in place as `P A = L U`.
pub(crate) fn lu_factor_inplace(a: &mut [Real], n: usize) -> LuFactors {
    let mut piv: Vec<usize> = (0..n).collect();
    let mut sign = 1i32;
    let mut prow = vec![0.0 as Real; NB];
    let mut a21 = Vec::new();
    let mut u12 = Vec::new();
    let mut kk = 0;
    while kk < n {
        let kend = (kk + NB).min(n);
        // Unblocked factorization of the panel (columns kk..kend).
        for j in kk..kend {
            let mut p = j;
            let mut best = a[j * n + j].abs();
            for i in j + 1..n {
                let v = a[i * n + j].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            piv[j] = p;
            if p != j {
                let (top, bot) = a.split_at_mut(p * n);
                top[j * n..j * n + n].swap_with_slice(&mut bot[..n]);
                sign = -sign;
            }
            let pivval = a[j * n + j];
            if pivval == 0.0 {
                return LuFactors { piv, sign: 0 };
            }
            let inv = 1.0 / pivval;
            let w = kend - (j + 1);
            prow[..w].copy_from_slice(&a[j * n + j + 1..j * n + kend]);
            for i in j + 1..n {
                let lij = a[i * n + j] * inv;
                a[i * n + j] = lij;
                if lij != 0.0 {
                    let arow = &mut a[i * n + j + 1..i * n + kend];
                    for (av, pv) in arow.iter_mut().zip(&prow[..w]) {
                        *av -= lij * *pv;
                    }
                }
            }
        }
        if kend < n {
            // U12 = L11^{-1} A12: unit lower triangular solve over the panel
            // rows, with a scratch row to sidestep aliasing.
            let width = n - kend;
            let mut trow = vec![0.0 as Real; width];
            for i in kk + 1..kend {
                for t in kk..i {
                    let lit = a[i * n + t];
                    if lit != 0.0 {
                        trow.copy_from_slice(&a[t * n + kend..t * n + n]);
                        let irow = &mut a[i * n + kend..i * n + n];
                        for (iv, tv) in irow.iter_mut().zip(&trow) {
                            *iv -= lit * *tv;
                        }
                    }
                }
            }
            // A22 -= A21 * U12 via packed GEMM (copy the panels out to keep
            // the borrow checker happy; packing would copy them anyway).
            let mrest = n - kend;
            let kwidth = kend - kk;
            a21.clear();
            for i in 0..mrest {
                let off = (kend + i) * n + kk;
                a21.extend_from_slice(&a[off..off + kwidth]);
            }
            u12.clear();
            for t in 0..kwidth {
                let off = (kk + t) * n + kend;
                u12.extend_from_slice(&a[off..off + width]);
            }
            gemm_acc(
                mrest,
                kwidth,
                width,
                -1.0,
                &a21,
                kwidth,
                &u12,
                width,
                &mut a[kend * n + kend..],
                n,
            );
        }
        kk = kend;
    }
    LuFactors { piv, sign }
}

/// Apply the pivot sequence from [`lu_factor_inplace`] to the rows of a
/// row-major `n x nrhs` matrix (forward order, as when solving `A x = b`).
pub(crate) fn apply_pivots_forward(piv: &[usize], b: &mut [Real], nrhs: usize) {
    for (j, &p) in piv.iter().enumerate() {
        if p != j {
            let (top, bot) = b.split_at_mut(p * nrhs);
            top[j * nrhs..j * nrhs + nrhs].swap_with_slice(&mut bot[..nrhs]);
        }
    }
}

/// In-place solve `L X = B` where `L` is the unit lower triangle of `lu`.
/// `b` is `n x nrhs` row-major.
pub(crate) fn solve_unit_lower_rows(lu: &[Real], n: usize, b: &mut [Real], nrhs: usize) {
    let mut trow = vec![0.0 as Real; nrhs];
    let mut kk = 0;
    while kk < n {
        let kend = (kk + NB).min(n);
        if kk > 0 {
            let (done, rest) = b.split_at_mut(kk * nrhs);
            gemm_acc(
                kend - kk,
                kk,
                nrhs,
                -1.0,
                &lu[kk * n..],
                n,
                done,
                nrhs,
                &mut rest[..(kend - kk) * nrhs],
                nrhs,
            );
        }
        for i in kk + 1..kend {
            for t in kk..i {
                let lit = lu[i * n + t];
                if lit != 0.0 {
                    trow.copy_from_slice(&b[t * nrhs..t * nrhs + nrhs]);
                    let irow = &mut b[i * nrhs..i * nrhs + nrhs];
                    for (iv, tv) in irow.iter_mut().zip(&trow) {
                        *iv -= lit * *tv;
                    }
                }
            }
        }
        kk = kend;
    }
}

/// In-place solve `U X = B` where `U` is the upper triangle of `lu`
/// (non-unit diagonal). Errors on an exactly zero diagonal entry.
pub(crate) fn solve_upper_rows(lu: &[Real], n: usize, b: &mut [Real], nrhs: usize) -> Result<()> {
    let mut trow = vec![0.0 as Real; nrhs];
    let starts: Vec<usize> = (0..n).step_by(NB).collect();
    for &kk in starts.iter().rev() {
        let kend = (kk + NB).min(n);
        for i in (kk..kend).rev() {
            for t in i + 1..kend {
                let uit = lu[i * n + t];
                if uit != 0.0 {
                    trow.copy_from_slice(&b[t * nrhs..t * nrhs + nrhs]);
                    let irow = &mut b[i * nrhs..i * nrhs + nrhs];
                    for (iv, tv) in irow.iter_mut().zip(&trow) {
                        *iv -= uit * *tv;
                    }
                }
            }
            let d = lu[i * n + i];
            if d == 0.0 {
                return Err(Error::Singular {
                    context: "upper triangular solve".to_string(),
                });
            }
            let inv = 1.0 / d;
            for v in &mut b[i * nrhs..i * nrhs + nrhs] {
                *v *= inv;
            }
        }
        if kk > 0 {
            let (above, panel) = b.split_at_mut(kk * nrhs);
            gemm_acc(
                kk,
                kend - kk,
                nrhs,
                -1.0,
                &lu[kk..],
                n,
                &panel[..(kend - kk) * nrhs],
                nrhs,
                above,
                nrhs,
            );
        }
    }
    Ok(())
}

/// Compute `A^{-1}` from the factorization of `A`.
pub(crate) fn invert_from_lu(lu: &[Real], piv: &[usize], n: usize) -> Result<Vec<Real>> {
    let mut x = vec![0.0 as Real; n * n];
    for i in 0..n {
        x[i * n + i] = 1.0;
    }
    apply_pivots_forward(piv, &mut x, n);
    solve_unit_lower_rows(lu, n, &mut x, n);
    solve_upper_rows(lu, n, &mut x, n)?;
    Ok(x)
}

/// Solve `A X = B` in place from the factorization of `A`; `b` is `n x nrhs`.
pub(crate) fn lu_solve_rows(
    lu: &[Real],
    piv: &[usize],
    n: usize,
    b: &mut [Real],
    nrhs: usize,
) -> Result<()> {
    apply_pivots_forward(piv, b, nrhs);
    solve_unit_lower_rows(lu, n, b, nrhs);
    solve_upper_rows(lu, n, b, nrhs)
}

/// Out-of-place transpose of an `m x n` row-major matrix.
/// In-place Cholesky factorization of a symmetric positive-definite matrix:
/// `a` becomes the lower-triangular L with A = L L^T (upper part zeroed).
pub(crate) fn cholesky_inplace(a: &mut [Real], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Singular {
                context: format!("cholesky: leading minor {} is not positive", j + 1),
            });
        }
        let l = d.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

pub(crate) fn transpose(a: &[Real], m: usize, n: usize) -> Vec<Real> {
    const TB: usize = 32;
    let mut out = vec![0.0 as Real; m * n];
    let mut ib = 0;
    while ib < m {
        let iend = (ib + TB).min(m);
        let mut jb = 0;
        while jb < n {
            let jend = (jb + TB).min(n);
            for i in ib..iend {
                for j in jb..jend {
                    out[j * m + i] = a[i * n + j];
                }
            }
            jb = jend;
        }
        ib = iend;
    }
    out
}

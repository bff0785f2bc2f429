//! Small dense complex linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage, RawStorageMut};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Operand transform for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    /// Conjugate transpose.
    H,
}

/// Column-major copy of `op(m)`'s source with strides describing `op(m)`.
/// The kernel has no conjugation flag, so `H` operands are conjugated here.
enum Operand<'a> {
    Borrowed(*const Complex64, std::marker::PhantomData<&'a ()>),
    Owned(CMat),
}

fn operand<R: Dim, C: Dim, S: RawStorage<Complex64, R, C>>(
    m: &Matrix<Complex64, R, C, S>,
    op: Op,
) -> (usize, usize, isize, isize, Operand<'_>) {
    let (r, c) = m.shape();
    match op {
        Op::N => {
            let (rs, cs) = m.strides();
            (
                r,
                c,
                rs as isize,
                cs as isize,
                Operand::Borrowed(m.data.ptr(), std::marker::PhantomData),
            )
        }
        Op::H => {
            let conj = CMat::from_fn(r, c, |i, j| m[(i, j)].conj());
            (c, r, r as isize, 1, Operand::Owned(conj))
        }
    }
}

impl Operand<'_> {
    fn ptr(&self) -> *const [f64; 2] {
        match self {
            Operand::Borrowed(p, _) => *p as *const [f64; 2],
            Operand::Owned(m) => m.as_ptr() as *const [f64; 2],
        }
    }
}

/// `c = alpha op(a) op(b) + beta c` through a blocked kernel; accepts views.
pub fn gemm<R1, C1, S1, R2, C2, S2, R3, C3, S3>(
    alpha: Complex64,
    a: &Matrix<Complex64, R1, C1, S1>,
    ta: Op,
    b: &Matrix<Complex64, R2, C2, S2>,
    tb: Op,
    beta: Complex64,
    c: &mut Matrix<Complex64, R3, C3, S3>,
) where
    R1: Dim,
    C1: Dim,
    S1: RawStorage<Complex64, R1, C1>,
    R2: Dim,
    C2: Dim,
    S2: RawStorage<Complex64, R2, C2>,
    R3: Dim,
    C3: Dim,
    S3: RawStorageMut<Complex64, R3, C3>,
{
    let (m, k, rsa, csa, pa) = operand(a, ta);
    let (k2, n, rsb, csb, pb) = operand(b, tb);
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "output shape mismatch");
    let (rsc, csc) = c.strides();
    if m == 0 || n == 0 {
        return;
    }
    let std = matrixmultiply::CGemmOption::Standard;
    // The kernel treats Complex64 as [re, im]; both are repr(C) pairs of f64.
    unsafe {
        matrixmultiply::zgemm(
            std,
            std,
            m,
            k,
            n,
            [alpha.re, alpha.im],
            pa.ptr(),
            rsa,
            csa,
            pb.ptr(),
            rsb,
            csb,
            [beta.re, beta.im],
            c.data.ptr_mut() as *mut [f64; 2],
            rsc as isize,
            csc as isize,
        );
    }
}

/// `op(a) op(b)`.
pub fn matmul<R1, C1, S1, R2, C2, S2>(
    a: &Matrix<Complex64, R1, C1, S1>,
    ta: Op,
    b: &Matrix<Complex64, R2, C2, S2>,
    tb: Op,
) -> CMat
where
    R1: Dim,
    C1: Dim,
    S1: RawStorage<Complex64, R1, C1>,
    R2: Dim,
    C2: Dim,
    S2: RawStorage<Complex64, R2, C2>,
{
    let rows = if ta == Op::N { a.nrows() } else { a.ncols() };
    let cols = if tb == Op::N { b.ncols() } else { b.nrows() };
    let mut c = CMat::zeros(rows, cols);
    gemm(Complex64::new(1.0, 0.0), a, ta, b, tb, Complex64::new(0.0, 0.0), &mut c);
    c
}

pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// One draw from the circularly-symmetric complex Gaussian CN(0, `var`).
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c64(s * re, s * im)
}

pub fn random_cmat<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMat {
    // Column-major fill so the draw order is fixed by the shape alone.
    let mut m = CMat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = complex_gaussian(rng, var);
        }
    }
    m
}

#[inline]
pub fn fro2(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

/// Real inner product `Re Tr(aᴴ b)`.
pub fn real_inner(a: &CMat, b: &CMat) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// Complex inner product `Tr(aᴴ b)`.
pub fn inner(a: &CMat, b: &CMat) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    // Symmetrize so round-off asymmetry does not leak into the solver.
    let h = (m + m.adjoint()).scale(0.5);
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Thin SVD with singular values sorted descending: `m = U diag(s) Vᴴ`.
pub struct SortedSvd {
    pub u: CMat,
    pub s: Vec<f64>,
    pub v: CMat,
}

pub fn sorted_svd(m: &CMat) -> SortedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᴴ");
    let k = svd.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut su = CMat::zeros(u.nrows(), k);
    let mut sv = CMat::zeros(vt.ncols(), k);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        su.set_column(dst, &u.column(src));
        sv.set_column(dst, &vt.row(src).adjoint());
        s.push(svd.singular_values[src]);
    }
    SortedSvd { u: su, s, v: sv }
}

pub fn singular_values(m: &CMat) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn smallest_singular_value(m: &CMat) -> f64 {
    singular_values(m).last().copied().unwrap_or(0.0)
}

/// Numerical rank with a relative threshold on the singular values.
pub fn numerical_rank(m: &CMat, rel_tol: f64) -> usize {
    let s = singular_values(m);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x > rel_tol * top).count()
}

/// Column-major vectorization.
pub fn vec_of(m: &CMat) -> CVec {
    CVec::from_iterator(m.len(), m.iter().copied())
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMat::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == Complex64::new(0.0, 0.0) {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc)).copy_from(&b.map(|z| z * aij));
        }
    }
    out
}

/// Least-squares slope and coefficient of determination of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r2)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_products() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let a = random_cmat(5, 3, 1.0, &mut rng);
        let b = random_cmat(3, 4, 1.0, &mut rng);
        let bt = random_cmat(4, 3, 1.0, &mut rng);
        let at = random_cmat(3, 5, 1.0, &mut rng);
        let tol = 1e-13;
        assert!((matmul(&a, Op::N, &b, Op::N) - &a * &b).norm() < tol);
        assert!((matmul(&a, Op::N, &bt, Op::H) - &a * bt.adjoint()).norm() < tol);
        assert!((matmul(&at, Op::H, &b, Op::N) - at.adjoint() * &b).norm() < tol);
        assert!((matmul(&at, Op::H, &bt, Op::H) - at.adjoint() * bt.adjoint()).norm() < tol);
        // Views into a taller matrix and accumulation into a sub-block.
        let tall = random_cmat(9, 3, 1.0, &mut rng);
        let mut c = random_cmat(7, 4, 1.0, &mut rng);
        let want = c.rows(1, 5) * c64(0.5, 0.0) + tall.rows(2, 5) * &b * c64(0.0, 2.0);
        gemm(
            c64(0.0, 2.0),
            &tall.rows(2, 5),
            Op::N,
            &b,
            Op::N,
            c64(0.5, 0.0),
            &mut c.rows_mut(1, 5),
        );
        assert!((c.rows(1, 5) - want).norm() < tol);
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sorted_svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_cmat(7, 4, 1.0, &mut rng);
        let svd = sorted_svd(&m);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        let sig = CMat::from_diagonal(&CVec::from_iterator(4, svd.s.iter().map(|&x| c64(x, 0.0))));
        let back = &svd.u * sig * svd.v.adjoint();
        assert!((back - m).norm() < 1e-12);
    }

    #[test]
    fn hermitian_eigen_ascending() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_cmat(5, 3, 1.0, &mut rng);
        let h = a.ad_mul(&a);
        let (vals, vecs) = hermitian_eigen(&h);
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let lam = CMat::from_diagonal(&CVec::from_iterator(3, vals.iter().map(|&x| c64(x, 0.0))));
        assert!((&vecs * lam * vecs.adjoint() - h).norm() < 1e-12);
    }

    #[test]
    fn kron_matches_vec_identity() {
        // vec(A X C) = (Cᵀ ⊗ A) vec(X)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_cmat(3, 4, 1.0, &mut rng);
        let x = random_cmat(4, 2, 1.0, &mut rng);
        let cm = random_cmat(2, 5, 1.0, &mut rng);
        let lhs = vec_of(&(&a * &x * &cm));
        let rhs = kron(&cm.transpose(), &a) * vec_of(&x);
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

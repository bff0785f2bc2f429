//! Product of non-compact Stiefel quotients `C_*^{(D+M_1) x L} / U(L)`.
//!
//! A point stores one stacked factor `S_n = [J_n; R_n]` per device, with
//! `J_n` the top `M_1` rows and `R_n` the bottom `D` rows, so that
//! `X_n = J_n R_n^H`. The metric is `g(xi, eta) = 2 Re Tr(xi^H eta)`.

use crate::error::{Error, Result};
use crate::linalg::{hermitian_eigen, real_inner, singular_values, CMat};

/// Relative full-rank threshold: `sigma_min(S) > EPS_RANK ||S||`.
pub const EPS_RANK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FactorPoint {
    pub factors: Vec<CMat>,
    pub m_1: usize,
    pub d: usize,
}

impl FactorPoint {
    pub fn new(factors: Vec<CMat>, m_1: usize, d: usize) -> Result<Self> {
        if let Some(s) = factors.iter().find(|s| s.nrows() != m_1 + d) {
            return Err(Error::ShapeMismatch(format!(
                "factor with {} rows, expected M_1 + D = {}",
                s.nrows(),
                m_1 + d
            )));
        }
        Ok(FactorPoint { factors, m_1, d })
    }

    /// Stacks `[J_n; R_n]` pairs.
    pub fn from_pairs(pairs: &[(CMat, CMat)]) -> Result<Self> {
        let (m_1, d) = pairs
            .first()
            .map(|(j, r)| (j.nrows(), r.nrows()))
            .ok_or_else(|| Error::ShapeMismatch("no factors".into()))?;
        let mut factors = Vec::with_capacity(pairs.len());
        for (j, r) in pairs {
            if j.ncols() != r.ncols() || j.nrows() != m_1 || r.nrows() != d {
                return Err(Error::ShapeMismatch("inconsistent J/R pair".into()));
            }
            let mut s = CMat::zeros(m_1 + d, j.ncols());
            s.rows_mut(0, m_1).copy_from(j);
            s.rows_mut(m_1, d).copy_from(r);
            factors.push(s);
        }
        Ok(FactorPoint { factors, m_1, d })
    }

    pub fn num_devices(&self) -> usize {
        self.factors.len()
    }

    pub fn rank(&self) -> usize {
        self.factors.first().map_or(0, |s| s.ncols())
    }

    pub fn j(&self, n: usize) -> CMat {
        self.factors[n].rows(0, self.m_1).into_owned()
    }

    pub fn r(&self, n: usize) -> CMat {
        self.factors[n].rows(self.m_1, self.d).into_owned()
    }

    /// `X_n = P_1 S_n S_n^H P_2 = J_n R_n^H`.
    pub fn x(&self, n: usize) -> CMat {
        let s = &self.factors[n];
        s.rows(0, self.m_1) * s.rows(self.m_1, self.d).adjoint()
    }

    pub fn xs(&self) -> Vec<CMat> {
        (0..self.num_devices()).map(|n| self.x(n)).collect()
    }
}

fn check_same(a: &CMat, b: &CMat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `Tr(xi^H eta + eta^H xi)`. The base point does not enter this metric.
pub fn metric(xi: &CMat, eta: &CMat) -> Result<f64> {
    check_same(xi, eta)?;
    Ok(2.0 * real_inner(xi, eta))
}

/// `(sigma_min(S), threshold)` for the full-rank test.
pub fn rank_margin(s: &CMat) -> (f64, f64) {
    let sv = singular_values(s);
    let top = sv.first().copied().unwrap_or(0.0);
    let bottom = if s.ncols() > s.nrows() {
        0.0
    } else {
        sv.last().copied().unwrap_or(0.0)
    };
    (bottom, EPS_RANK * top)
}

pub fn is_full_rank(s: &CMat) -> bool {
    let (lo, thr) = rank_margin(s);
    lo > thr && lo > 0.0
}

/// Solves `G B + B G = C` for Hermitian positive definite `G`.
///
/// `ridge` is added to the spectrum of `G`, so a positive ridge keeps the
/// solve defined at rank-deficient points.
pub fn lyapunov_solve(g: &CMat, c: &CMat, ridge: f64) -> CMat {
    let (lam, v) = hermitian_eigen(g);
    let ct = v.ad_mul(c) * &v;
    let l = lam.len();
    let bt = CMat::from_fn(l, l, |i, j| ct[(i, j)] / (lam[i] + lam[j] + 2.0 * ridge));
    &v * bt * v.adjoint()
}

fn project_with(s: &CMat, xi: &CMat, ridge: f64) -> CMat {
    let sts = s.ad_mul(s);
    let shx = s.ad_mul(xi);
    let c = &shx - shx.adjoint();
    let b = lyapunov_solve(&sts, &c, ridge);
    xi - s * b
}

/// Horizontal part `xi - S B` of `xi`, where `B` solves
/// `S^H S B + B S^H S = S^H xi - xi^H S`.
pub fn horizontal_project(s: &CMat, xi: &CMat) -> Result<CMat> {
    check_same(s, xi)?;
    let (lo, thr) = rank_margin(s);
    if !(lo > thr && lo > 0.0) {
        return Err(Error::SingularPoint {
            sigma_min: lo,
            threshold: thr,
        });
    }
    Ok(project_with(s, xi, 0.0))
}

/// Projection with `S^H S` regularized by `eps I`; never fails.
pub fn horizontal_project_regularized(s: &CMat, xi: &CMat, eps: f64) -> CMat {
    project_with(s, xi, eps)
}

/// Vertical component `B` from the projection, `xi = zeta + S B`.
pub fn vertical_component(s: &CMat, xi: &CMat) -> CMat {
    let sts = s.ad_mul(s);
    let shx = s.ad_mul(xi);
    lyapunov_solve(&sts, &(&shx - shx.adjoint()), 0.0)
}

/// `S + mu eta`, rejected when the result loses full column rank.
pub fn retract(s: &CMat, eta: &CMat, mu: f64) -> Result<CMat> {
    check_same(s, eta)?;
    let out = s + eta.scale(mu);
    if !is_full_rank(&out) {
        return Err(Error::DegenerateStep { step: mu });
    }
    Ok(out)
}

/// Transport of `eta` into the horizontal space at `s_new`.
pub fn vector_transport(s_new: &CMat, eta: &CMat) -> Result<CMat> {
    horizontal_project(s_new, eta)
}

/// `Pi_H(G / 2)` for a Euclidean gradient `G = 2 df/d conj(S)`.
pub fn riemannian_gradient(s: &CMat, euclid_grad: &CMat) -> Result<CMat> {
    horizontal_project(s, &euclid_grad.scale(0.5))
}

/// Largest entry of `S^H zeta - zeta^H S`; zero for horizontal vectors.
pub fn horizontality_defect(s: &CMat, zeta: &CMat) -> f64 {
    let m = s.ad_mul(zeta);
    (&m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Random skew-Hermitian `L x L` matrix.
pub fn skew_hermitian_from(a: &CMat) -> CMat {
    (a - a.adjoint()).scale(0.5)
}

//! Sparse-block norm, empirical restricted isometry constants and the
//! measurement-count bounds for simultaneously sparse-block and low-rank
//! recovery.

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fro2, random_cmat, CMat};
use crate::measurement::MeasurementOperator;

/// `sum_n Xi_n p_n^2 L_n` over column blocks of `x`, where `Xi_n` flags a
/// nonzero block.
pub fn sg_norm(x: &CMat, partition: &[Vec<usize>], spreads: &[usize], ranks: &[usize]) -> Result<f64> {
    if partition.len() != spreads.len() || partition.len() != ranks.len() {
        return Err(Error::BadPartition("one spread and one rank per block required".into()));
    }
    let mut seen = vec![false; x.ncols()];
    for block in partition {
        for &c in block {
            if c >= x.ncols() {
                return Err(Error::BadPartition(format!("column {c} outside the matrix")));
            }
            if seen[c] {
                return Err(Error::BadPartition(format!("column {c} in two blocks")));
            }
            seen[c] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::BadPartition("blocks do not cover every column".into()));
    }
    let mut total = 0.0;
    for ((block, &p), &l) in partition.iter().zip(spreads).zip(ranks) {
        if block.iter().any(|&c| x.column(c).iter().any(|z| z.norm_sqr() > 0.0)) {
            total += (p * p * l) as f64;
        }
    }
    Ok(total)
}

/// The same norm for per-device blocks with uniform spread and rank.
pub fn sg_norm_blocks(xs: &[CMat], p: usize, l: usize) -> f64 {
    xs.iter().filter(|x| fro2(x) > 0.0).count() as f64 * (p * p * l) as f64
}

/// Contiguous partition of `n` blocks of `d` columns each.
pub fn contiguous_partition(n: usize, d: usize) -> Vec<Vec<usize>> {
    (0..n).map(|b| (b * d..(b + 1) * d).collect()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    #[serde(rename = "N")]
    pub n: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "M_1")]
    pub m_1: f64,
    pub p_max: f64,
    pub p_min: f64,
    #[serde(rename = "L_max")]
    pub l_max: f64,
    #[serde(rename = "L_min")]
    pub l_min: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub r: f64,
    pub t: f64,
    pub kappa1: f64,
}

impl BoundParams {
    /// Uniform spread `p` and rank `L` with `kappa1 = 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(p: f64, l: f64, k: f64, t: f64, n: f64, d: f64, m_1: f64, r: f64) -> Self {
        BoundParams {
            n,
            d,
            m_1,
            p_max: p,
            p_min: p,
            l_max: l,
            l_min: l,
            k,
            r,
            t,
            kappa1: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t > 1.0) {
            return Err(Error::InvalidConfig("t must exceed 1".into()));
        }
        let counts = [
            self.n, self.d, self.m_1, self.p_max, self.p_min, self.l_max, self.l_min, self.k, self.r,
        ];
        if counts.iter().any(|&c| !(c >= 1.0)) {
            return Err(Error::InvalidConfig("all counts must be at least 1".into()));
        }
        Ok(())
    }

    /// `u = K p_min^2 L_min`.
    pub fn u(&self) -> f64 {
        self.k * self.p_min * self.p_min * self.l_min
    }

    /// `u_bar = [1 + (t - 1) p_max^2 L_max] u`.
    pub fn u_bar(&self) -> f64 {
        (1.0 + (self.t - 1.0) * self.p_max * self.p_max * self.l_max) * self.u()
    }

    /// `Theta = u_bar / (p_min^2 L_min)`.
    pub fn theta(&self) -> f64 {
        self.u_bar() / (self.p_min * self.p_min * self.l_min)
    }
}

/// Sparse-block bound
/// `kappa1 (Th ln(N/Th) + Th + Th pL ln(D/(pL)) + Th pL + (Th pL + M_1 + 1) r)`.
pub fn theorem1_bound(bp: &BoundParams) -> f64 {
    let th = bp.theta();
    let pl = bp.p_max * bp.l_max;
    if th > bp.n {
        warn!("Theta = {th} exceeds N = {}; the log term is negative", bp.n);
    }
    bp.kappa1 * (th * (bp.n / th).ln() + th + th * pl * (bp.d / pl).ln() + th * pl + (th * pl + bp.m_1 + 1.0) * bp.r)
}

/// Sparse and low-rank bound
/// `kappa1 (v ln(N D / v) + v + (v + M_1 + 1) r)` with `v = K p^2 L t`.
pub fn traditional_bound(bp: &BoundParams) -> f64 {
    let v = bp.k * bp.p_max * bp.p_max * bp.l_max * bp.t;
    if v > bp.n * bp.d {
        warn!("K p^2 L t = {v} exceeds N D; the log term is negative");
    }
    bp.kappa1 * (v * (bp.n * bp.d / v).ln() + v + (v + bp.m_1 + 1.0) * bp.r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundComparison {
    pub theorem1: f64,
    pub traditional: f64,
    pub theorem1_smaller: bool,
    /// `ut < N / e`.
    pub small_ut: bool,
    /// `ut < (K p^3 L^2 r - K p L r - Th (pL ln(D/pL) + pL)) / (pL r - r)`.
    pub rank_condition: bool,
    pub conditions_hold: bool,
}

/// Both bounds with the same `kappa1`, plus the two sufficient conditions
/// under which the sparse-block bound is the smaller one.
pub fn compare_bounds(bp: &BoundParams) -> BoundComparison {
    let p = bp.p_max;
    let l = bp.l_max;
    let ut = bp.t * p * p * l * bp.k;
    let th = bp.theta();
    let small_ut = ut < bp.n / std::f64::consts::E;
    let den = p * l * bp.r - bp.r;
    let rank_condition = den > 0.0
        && ut
            < (bp.k * p.powi(3) * l * l * bp.r - bp.k * p * l * bp.r - th * (p * l * (bp.d / (p * l)).ln() + p * l))
                / den;
    let theorem1 = theorem1_bound(bp);
    let traditional = traditional_bound(bp);
    BoundComparison {
        theorem1,
        traditional,
        theorem1_smaller: theorem1 < traditional,
        small_ut,
        rank_condition,
        conditions_hold: small_ut && rank_condition,
    }
}

/// A linear map from `N` blocks of `M_1 x D` matrices to a measurement matrix.
pub trait LinearMap {
    fn num_blocks(&self) -> usize;
    fn block_shape(&self) -> (usize, usize);
    fn apply(&self, xs: &[CMat]) -> Result<CMat>;
}

/// The measurement operator scaled by `1 / sqrt(M_p B_p)`, so that it is an
/// isometry in expectation.
pub struct NormalizedOperator<'a>(pub &'a MeasurementOperator);

impl LinearMap for NormalizedOperator<'_> {
    fn num_blocks(&self) -> usize {
        self.0.num_devices()
    }
    fn block_shape(&self) -> (usize, usize) {
        (self.0.m_1(), self.0.d())
    }
    fn apply(&self, xs: &[CMat]) -> Result<CMat> {
        Ok(self.0.forward(xs)?.unscale((self.0.measurements() as f64).sqrt()))
    }
}

/// A dense matrix acting on the column-major vectorization of `[X_1 ... X_N]`.
pub struct DenseMap {
    pub matrix: CMat,
    pub blocks: usize,
    pub shape: (usize, usize),
}

impl LinearMap for DenseMap {
    fn num_blocks(&self) -> usize {
        self.blocks
    }
    fn block_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn apply(&self, xs: &[CMat]) -> Result<CMat> {
        let len = self.shape.0 * self.shape.1;
        if xs.len() != self.blocks || self.matrix.ncols() != len * self.blocks {
            return Err(Error::ShapeMismatch("dense map and blocks disagree".into()));
        }
        let mut v = crate::linalg::CVec::zeros(len * self.blocks);
        for (n, x) in xs.iter().enumerate() {
            v.rows_mut(n * len, len).copy_from_slice(x.as_slice());
        }
        let out = &self.matrix * v;
        Ok(CMat::from_column_slice(out.len(), 1, out.as_slice()))
    }
}

/// Test matrices for the empirical RIP: `blocks` random nonzero device
/// blocks, `cols_per_block` random nonzero columns in each, and overall rank
/// `rank`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RipFamily {
    pub blocks: usize,
    pub cols_per_block: usize,
    pub rank: usize,
}

impl RipFamily {
    /// Level `u` with spread `p` and `L` clusters per block:
    /// `u / (p^2 L)` blocks of `p L` columns.
    pub fn from_level(u: usize, p: usize, l: usize, rank: usize) -> Self {
        RipFamily {
            blocks: (u / (p * p * l)).max(1),
            cols_per_block: p * l,
            rank,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, m_1: usize, d: usize, rng: &mut R) -> Vec<CMat> {
        let u = random_cmat(m_1, self.rank, 1.0, rng);
        let mut xs = vec![CMat::zeros(m_1, d); n];
        for b in sample(rng, n, self.blocks.min(n)).into_iter() {
            let mut v = CMat::zeros(d, self.rank);
            for c in sample(rng, d, self.cols_per_block.min(d)).into_iter() {
                let row = random_cmat(1, self.rank, 1.0, rng);
                v.set_row(c, &row.row(0));
            }
            xs[b] = &u * v.adjoint();
        }
        xs
    }
}

/// `max(1 - min rho, max rho - 1)` over `trials` draws of
/// `rho = ||A(X)|| / ||X||_F`.
pub fn empirical_rip<M: LinearMap, R: Rng + ?Sized>(
    map: &M,
    family: &RipFamily,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let (m_1, d) = map.block_shape();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for _ in 0..trials.max(1) {
        let xs = family.draw(map.num_blocks(), m_1, d, rng);
        let nx: f64 = xs.iter().map(fro2).sum::<f64>().sqrt();
        if nx == 0.0 {
            continue;
        }
        let rho = fro2(&map.apply(&xs)?).sqrt() / nx;
        lo = lo.min(rho);
        hi = hi.max(rho);
    }
    Ok((1.0 - lo).max(hi - 1.0))
}

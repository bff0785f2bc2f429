//! Pilot and sampling operator `Y = sum_n B X_n A_n + Z`.
//!
//! `B = P_M A_theta` keeps the sampled antenna rows of the angle dictionary
//! and `A_n = A_tau^H P_T diag(alpha_n)` keeps the sampled subcarriers of the
//! delay dictionary weighted by the device pilot.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_model::{build_dictionaries, SystemConfig};
use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian, fro2, gemm, matmul, random_cmat, singular_values, CMat, CVec, Op};

/// Default cap on the number of complex entries of the dense operator.
pub const DEFAULT_DENSE_BUDGET: usize = 1 << 24;

#[derive(Clone, Debug)]
pub struct MeasurementOperator {
    pub pilots: Vec<CVec>,
    pub antenna_set: Vec<usize>,
    pub subcarrier_set: Vec<usize>,
    /// `M_p x M_1`.
    pub b_mat: CMat,
    /// One `D x B_p` matrix per device.
    pub a_mats: Vec<CMat>,
    /// `A_tau^H P_T`, so that `A_n = a_common diag(alpha_n)`.
    pub a_common: CMat,
    /// `B_p M_p x M_1 D N`, only when requested.
    pub dense_form: Option<CMat>,
}

pub fn generate_pilots<R: Rng + ?Sized>(n: usize, b_p: usize, rng: &mut R) -> Vec<CVec> {
    (0..n)
        .map(|_| CVec::from_fn(b_p, |_, _| complex_gaussian(rng, 1.0)))
        .collect()
}

/// Sorted uniform subsets of `M_p` antennas and `B_p` subcarriers.
pub fn sample_subsets<R: Rng + ?Sized>(
    m: usize,
    m_p: usize,
    b: usize,
    b_p: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if m_p > m || b_p > b {
        return Err(Error::InvalidConfig(format!(
            "cannot sample M_p = {m_p} of M = {m} antennas or B_p = {b_p} of B = {b} subcarriers"
        )));
    }
    let mut ant = sample(rng, m, m_p).into_vec();
    let mut sub = sample(rng, b, b_p).into_vec();
    ant.sort_unstable();
    sub.sort_unstable();
    Ok((ant, sub))
}

fn check_set(set: &[usize], limit: usize, what: &str) -> Result<()> {
    let mut s = set.to_vec();
    s.sort_unstable();
    s.dedup();
    if s.len() != set.len() {
        return Err(Error::ShapeMismatch(format!("{what} has duplicate indices")));
    }
    if set.iter().any(|&i| i >= limit) {
        return Err(Error::ShapeMismatch(format!("{what} index outside [0, {limit})")));
    }
    Ok(())
}

pub fn build_operator(
    a_theta: &CMat,
    a_tau: &CMat,
    pilots: &[CVec],
    antenna_set: &[usize],
    subcarrier_set: &[usize],
) -> Result<MeasurementOperator> {
    check_set(antenna_set, a_theta.nrows(), "antenna set")?;
    check_set(subcarrier_set, a_tau.nrows(), "subcarrier set")?;
    let b_p = subcarrier_set.len();
    if let Some(bad) = pilots.iter().find(|p| p.len() != b_p) {
        return Err(Error::ShapeMismatch(format!(
            "pilot of length {} for {b_p} sampled subcarriers",
            bad.len()
        )));
    }
    let m_1 = a_theta.ncols();
    let d = a_tau.ncols();
    let b_mat = CMat::from_fn(antenna_set.len(), m_1, |r, c| a_theta[(antenna_set[r], c)]);
    let a_common = CMat::from_fn(d, b_p, |r, c| a_tau[(subcarrier_set[c], r)].conj());
    let a_mats = pilots
        .iter()
        .map(|alpha| CMat::from_fn(d, b_p, |r, c| a_common[(r, c)] * alpha[c]))
        .collect();
    Ok(MeasurementOperator {
        pilots: pilots.to_vec(),
        antenna_set: antenna_set.to_vec(),
        subcarrier_set: subcarrier_set.to_vec(),
        b_mat,
        a_mats,
        a_common,
        dense_form: None,
    })
}

/// Reproducible description of an operator: pilots, sampled sets and the
/// seed they were drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub seed: u64,
    pub antenna_set: Vec<usize>,
    pub subcarrier_set: Vec<usize>,
    pub pilots: Vec<Vec<Complex64>>,
}

impl OperatorSpec {
    pub fn draw(cfg: &SystemConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (antenna_set, subcarrier_set) = sample_subsets(cfg.m, cfg.m_p, cfg.b, cfg.b_p, &mut rng)?;
        let pilots = generate_pilots(cfg.n, cfg.b_p, &mut rng)
            .into_iter()
            .map(|p| p.iter().copied().collect())
            .collect();
        Ok(OperatorSpec {
            seed,
            antenna_set,
            subcarrier_set,
            pilots,
        })
    }

    pub fn build(&self, cfg: &SystemConfig) -> Result<MeasurementOperator> {
        let (a_theta, a_tau) = build_dictionaries(cfg);
        let pilots: Vec<CVec> = self.pilots.iter().map(|p| CVec::from_vec(p.clone())).collect();
        build_operator(&a_theta, &a_tau, &pilots, &self.antenna_set, &self.subcarrier_set)
    }
}

impl MeasurementOperator {
    /// Operator with fresh pilots and subsets drawn from `rng`.
    pub fn random<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Result<Self> {
        let (a_theta, a_tau) = build_dictionaries(cfg);
        let (ant, sub) = sample_subsets(cfg.m, cfg.m_p, cfg.b, cfg.b_p, rng)?;
        let pilots = generate_pilots(cfg.n, cfg.b_p, rng);
        build_operator(&a_theta, &a_tau, &pilots, &ant, &sub)
    }

    pub fn num_devices(&self) -> usize {
        self.a_mats.len()
    }

    pub fn m_p(&self) -> usize {
        self.b_mat.nrows()
    }

    pub fn m_1(&self) -> usize {
        self.b_mat.ncols()
    }

    pub fn d(&self) -> usize {
        self.a_mats[0].nrows()
    }

    pub fn b_p(&self) -> usize {
        self.a_mats[0].ncols()
    }

    /// Number of scalar measurements `M_p B_p`.
    pub fn measurements(&self) -> usize {
        self.m_p() * self.b_p()
    }

    fn check_blocks(&self, xs: &[CMat]) -> Result<()> {
        if xs.len() != self.num_devices() {
            return Err(Error::ShapeMismatch(format!(
                "{} blocks for {} devices",
                xs.len(),
                self.num_devices()
            )));
        }
        if let Some(x) = xs.iter().find(|x| x.shape() != (self.m_1(), self.d())) {
            return Err(Error::ShapeMismatch(format!(
                "block of shape {:?}, expected {:?}",
                x.shape(),
                (self.m_1(), self.d())
            )));
        }
        Ok(())
    }

    /// `sum_n B X_n A_n`.
    pub fn forward(&self, xs: &[CMat]) -> Result<CMat> {
        self.check_blocks(xs)?;
        let mut inner = CMat::zeros(self.m_1(), self.b_p());
        for (x, a) in xs.iter().zip(&self.a_mats) {
            gemm(
                Complex64::new(1.0, 0.0),
                x,
                Op::N,
                a,
                Op::N,
                Complex64::new(1.0, 0.0),
                &mut inner,
            );
        }
        Ok(matmul(&self.b_mat, Op::N, &inner, Op::N))
    }

    /// Image of one device block, `B X_n A_n`.
    pub fn forward_device(&self, n: usize, x: &CMat) -> CMat {
        &self.b_mat * (x * &self.a_mats[n])
    }

    /// Exact adjoint of [`forward`](Self::forward): `X_n = B^H V A_n^H`.
    pub fn adjoint(&self, v: &CMat) -> Result<Vec<CMat>> {
        if v.shape() != (self.m_p(), self.b_p()) {
            return Err(Error::ShapeMismatch(format!(
                "residual of shape {:?}, expected {:?}",
                v.shape(),
                (self.m_p(), self.b_p())
            )));
        }
        let w = matmul(&self.b_mat, Op::H, v, Op::N);
        Ok(self.a_mats.iter().map(|a| matmul(&w, Op::N, a, Op::H)).collect())
    }

    pub fn adjoint_device(&self, n: usize, v: &CMat) -> CMat {
        self.b_mat.ad_mul(v) * self.a_mats[n].adjoint()
    }

    /// Materializes `A^ = conj([A_1^H ... A_N^H]) kron B`, acting on the
    /// column-major vectorization of `[X_1 ... X_N]`.
    pub fn materialize_dense(&mut self, budget_entries: usize) -> Result<&CMat> {
        let rows = self.measurements();
        let cols = self.m_1() * self.d() * self.num_devices();
        if rows.saturating_mul(cols) > budget_entries {
            return Err(Error::DenseBudget {
                required: rows.saturating_mul(cols),
                budget: budget_entries,
            });
        }
        let (m_p, m_1, d, b_p) = (self.m_p(), self.m_1(), self.d(), self.b_p());
        let mut dense = CMat::zeros(rows, cols);
        for (n, a) in self.a_mats.iter().enumerate() {
            for q in 0..d {
                for bb in 0..b_p {
                    // Entry (q, bb) of A_n^T conj-free: A_n[(q, bb)].
                    let s = a[(q, bb)];
                    for c in 0..m_1 {
                        let col = n * m_1 * d + q * m_1 + c;
                        for r in 0..m_p {
                            dense[(bb * m_p + r, col)] = s * self.b_mat[(r, c)];
                        }
                    }
                }
            }
        }
        self.dense_form = Some(dense);
        Ok(self.dense_form.as_ref().expect("just set"))
    }

    /// A fresh copy of the squared spectral norm `||A||^2` by power iteration.
    pub fn operator_norm_sq(&self, iters: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.num_devices();
        let mut x: Vec<CMat> = (0..n)
            .map(|_| random_cmat(self.m_1(), self.d(), 1.0, &mut rng))
            .collect();
        let mut lambda = 0.0;
        for _ in 0..iters {
            let norm = x.iter().map(fro2).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::LipschitzEstimate(format!("power iterate norm {norm}")));
            }
            x.iter_mut().for_each(|b| *b /= Complex64::new(norm, 0.0));
            let y = self.forward(&x)?;
            lambda = fro2(&y);
            x = self.adjoint(&y)?;
        }
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::LipschitzEstimate(format!("estimate {lambda}")));
        }
        Ok(lambda)
    }

    /// `max_n ||B||^2 ||A_n||^2`, the Lipschitz scale of one device block.
    pub fn block_lipschitz(&self) -> f64 {
        let b2 = singular_values(&self.b_mat)[0].powi(2);
        self.a_mats
            .iter()
            .map(|a| b2 * singular_values(a)[0].powi(2))
            .fold(0.0, f64::max)
    }
}

/// Adds i.i.d. `CN(0, sigma2)` entries.
pub fn add_noise<R: Rng + ?Sized>(y: &CMat, sigma2: f64, rng: &mut R) -> CMat {
    if sigma2 <= 0.0 {
        return y.clone();
    }
    let mut out = y.clone();
    for j in 0..out.ncols() {
        for i in 0..out.nrows() {
            out[(i, j)] += complex_gaussian(rng, sigma2);
        }
    }
    out
}

/// `10 log10(||B X_n A_n||^2 / (M_p B_p sigma2))`.
pub fn snr_of_device(op: &MeasurementOperator, n: usize, x: &CMat, sigma2: f64) -> f64 {
    let signal = fro2(&op.forward_device(n, x));
    10.0 * (signal / (op.measurements() as f64 * sigma2)).log10()
}

/// Noise variance giving the target SNR averaged over the listed devices.
///
/// Returns 0 when the listed devices carry no signal.
pub fn calibrate_noise(op: &MeasurementOperator, xs: &[CMat], devices: &[usize], snr_db: f64) -> f64 {
    if devices.is_empty() {
        return 0.0;
    }
    let mean: f64 = devices
        .iter()
        .map(|&n| fro2(&op.forward_device(n, &xs[n])))
        .sum::<f64>()
        / devices.len() as f64;
    mean / (op.measurements() as f64 * 10f64.powf(snr_db / 10.0))
}

/// Writes a matrix row-major, one quoted `re,im` cell per entry.
pub fn write_matrix_csv<W: Write>(m: &CMat, w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{:e},{:e}", m[(i, j)].re, m[(i, j)].im))
            .collect();
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(r: R) -> Result<CMat> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut rows: Vec<Vec<Complex64>> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|cell| {
                let (re, im) = cell
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("cell {cell:?} is not re,im")))?;
                let re: f64 = re
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad real part {re:?}")))?;
                let im: f64 = im
                    .trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad imaginary part {im:?}")))?;
                Ok(Complex64::new(re, im))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Parse("ragged matrix rows".into()));
    }
    Ok(CMat::from_fn(nr, nc, |i, j| rows[i][j]))
}

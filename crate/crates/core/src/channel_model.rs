//! On-grid delay-angular channel generator.
//!
//! Each device owns `L_n` clusters. A cluster has a mean angle and a mean
//! delay on the grids, `J_n` angle shifts and `I_n` delay shifts drawn
//! without replacement from a window of `p` grid samples, and complex gains
//! with variance `1/mu_bar` where `mu_bar = (4 pi d f_c / c)^2`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complex_gaussian, CMat, CVec};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

fn default_d_min() -> f64 {
    20.0
}

fn default_d_max() -> f64 {
    500.0
}

/// Scenario dimensions and physical constants.
///
/// Serialized field names follow the usual symbols (`N`, `M_p`, `L_max`, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "M_p")]
    pub m_p: usize,
    #[serde(rename = "M_1")]
    pub m_1: usize,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "B_p")]
    pub b_p: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub gamma: f64,
    #[serde(rename = "T_s")]
    pub t_s: f64,
    pub f_c: f64,
    #[serde(rename = "L_max")]
    pub l_max: usize,
    /// Per-device cluster counts; `None` means every device has `L_max`.
    #[serde(rename = "L_n", default, skip_serializing_if = "Option::is_none")]
    pub l_n: Option<Vec<usize>>,
    pub p: usize,
    /// Angle shifts per cluster; `None` means `p`.
    #[serde(rename = "J_n", default, skip_serializing_if = "Option::is_none")]
    pub j_n: Option<usize>,
    /// Delay shifts per cluster; `None` means `p`.
    #[serde(rename = "I_n", default, skip_serializing_if = "Option::is_none")]
    pub i_n: Option<usize>,
    /// Explicit noise variance. Mutually exclusive with `snr_db`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    /// Target average SNR in dB, calibrated per scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "default_d_max")]
    pub d_max: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::new(16, 5, 32, 32, 32, 512, 96, 1.0 / 16.0, 2, 6)
    }
}

/// Noise specification resolved from a [`SystemConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    Noiseless,
    Variance(f64),
    SnrDb(f64),
}

impl SystemConfig {
    /// Builds a config with `D = floor(gamma B)`, a 73 GHz carrier and a
    /// 10 dB target SNR.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        k: usize,
        m: usize,
        m_p: usize,
        m_1: usize,
        b: usize,
        b_p: usize,
        gamma: f64,
        l_max: usize,
        p: usize,
    ) -> Self {
        SystemConfig {
            n,
            k,
            m,
            m_p,
            m_1,
            b,
            b_p,
            d: delay_grid_size(gamma, b),
            gamma,
            t_s: 1e-6,
            f_c: 73e9,
            l_max,
            l_n: None,
            p,
            j_n: None,
            i_n: None,
            sigma2: None,
            snr_db: Some(10.0),
            seed: 0,
            d_min: default_d_min(),
            d_max: default_d_max(),
        }
    }

    /// Sets `gamma` so that `D` equals the requested grid size.
    pub fn with_delay_grid(mut self, d: usize) -> Self {
        self.gamma = d as f64 / self.b as f64;
        self.d = d;
        self
    }

    pub fn noiseless(mut self) -> Self {
        self.sigma2 = None;
        self.snr_db = None;
        self
    }

    pub fn with_snr_db(mut self, snr: f64) -> Self {
        self.sigma2 = None;
        self.snr_db = Some(snr);
        self
    }

    pub fn noise(&self) -> NoiseSpec {
        match (self.sigma2, self.snr_db) {
            (Some(s), _) if s > 0.0 => NoiseSpec::Variance(s),
            (Some(_), _) => NoiseSpec::Noiseless,
            (None, Some(snr)) => NoiseSpec::SnrDb(snr),
            (None, None) => NoiseSpec::Noiseless,
        }
    }

    pub fn clusters_of(&self, device: usize) -> usize {
        match &self.l_n {
            Some(v) => v[device],
            None => self.l_max,
        }
    }

    pub fn angle_shifts(&self) -> usize {
        self.j_n.unwrap_or(self.p)
    }

    pub fn delay_shifts(&self) -> usize {
        self.i_n.unwrap_or(self.p)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 {
            return bad("N must be at least 1".into());
        }
        if self.k > self.n {
            return bad(format!("K = {} exceeds N = {}", self.k, self.n));
        }
        if !(self.m_p >= 1 && self.m_p <= self.m && self.m <= self.m_1) {
            return bad(format!(
                "need 1 <= M_p <= M <= M_1, got M_p = {}, M = {}, M_1 = {}",
                self.m_p, self.m, self.m_1
            ));
        }
        if !(self.b_p >= 1 && self.b_p <= self.b) {
            return bad(format!("need 1 <= B_p <= B, got B_p = {}, B = {}", self.b_p, self.b));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma = {} outside (0, 1]", self.gamma));
        }
        if self.d != delay_grid_size(self.gamma, self.b) {
            return bad(format!(
                "D = {} differs from floor(gamma B) = {}",
                self.d,
                delay_grid_size(self.gamma, self.b)
            ));
        }
        if self.d == 0 {
            return bad("delay grid is empty".into());
        }
        if self.l_max == 0 || self.p == 0 {
            return bad("L_max and p must be at least 1".into());
        }
        if self.p * self.l_max >= self.d.min(self.m_1) {
            return bad(format!(
                "p L_max = {} must be below min(D, M_1) = {}",
                self.p * self.l_max,
                self.d.min(self.m_1)
            ));
        }
        if let Some(l) = &self.l_n {
            if l.len() != self.n {
                return bad(format!("L_n has {} entries for N = {}", l.len(), self.n));
            }
            if l.iter().any(|&x| x == 0 || x > self.l_max) {
                return bad("every L_n must lie in [1, L_max]".into());
            }
        }
        for (name, v) in [("J_n", self.angle_shifts()), ("I_n", self.delay_shifts())] {
            if v == 0 || v > self.p {
                return bad(format!("{name} = {v} must lie in [1, p = {}]", self.p));
            }
        }
        if let Some(s) = self.sigma2 {
            if s < 0.0 || !s.is_finite() {
                return bad(format!("sigma2 = {s} must be finite and non-negative"));
            }
            if self.snr_db.is_some() {
                return bad("set at most one of sigma2 and snr_db".into());
            }
        }
        if !(self.d_min > 0.0 && self.d_min <= self.d_max) {
            return bad("need 0 < d_min <= d_max".into());
        }
        if !(self.f_c > 0.0 && self.t_s > 0.0) {
            return bad("f_c and T_s must be positive".into());
        }
        Ok(())
    }
}

/// `floor(gamma B)`, tolerant to the round-off of fractions such as 1/16.
pub fn delay_grid_size(gamma: f64, b: usize) -> usize {
    (gamma * b as f64 + 1e-9).floor() as usize
}

/// Array response `a(f)`, entry `m` is `exp(-i 2 pi f m)`.
pub fn steering_vector(f: f64, m: usize) -> CVec {
    CVec::from_fn(m, |i, _| Complex64::from_polar(1.0, -2.0 * PI * f * i as f64))
}

/// Frequency response of grid delay `m`, entry `b` is `exp(-i 2 pi m b / B)`.
pub fn delay_vector(m: usize, subcarriers: usize, grid: usize) -> Result<CVec> {
    if m >= grid || grid > subcarriers {
        return Err(Error::InvalidDelaySample { index: m, grid });
    }
    let b = subcarriers as f64;
    Ok(CVec::from_fn(subcarriers, |i, _| {
        // Reduce the phase index modulo B before scaling so large products stay exact.
        let k = (m * i) % subcarriers;
        Complex64::from_polar(1.0, -2.0 * PI * k as f64 / b)
    }))
}

/// Angle dictionary `A_theta` (M x M_1) and delay dictionary `A_tau` (B x D).
pub fn build_dictionaries(cfg: &SystemConfig) -> (CMat, CMat) {
    let mut a_theta = CMat::zeros(cfg.m, cfg.m_1);
    for j in 0..cfg.m_1 {
        a_theta.set_column(j, &steering_vector(j as f64 / cfg.m_1 as f64, cfg.m));
    }
    let mut a_tau = CMat::zeros(cfg.b, cfg.d);
    for j in 0..cfg.d {
        a_tau.set_column(j, &delay_vector(j, cfg.b, cfg.d).expect("index on grid"));
    }
    (a_theta, a_tau)
}

/// One path cluster of one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean_angle: usize,
    pub mean_delay: usize,
    /// Offsets in `[-floor(p/2), ceil(p/2) - 1]`, sorted, distinct.
    pub angle_offsets: Vec<i64>,
    pub delay_offsets: Vec<i64>,
    pub angle_gains: Vec<Complex64>,
    pub delay_gains: Vec<Complex64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub device: usize,
    pub distance: f64,
    pub mu_bar: f64,
    pub spread: usize,
    pub clusters: Vec<Cluster>,
}

/// Grid indices touched by `offsets` around `mean`, with the `p`-wide
/// window slid back inside `[0, grid)` at the edges.
pub fn window_indices(mean: usize, offsets: &[i64], p: usize, grid: usize) -> Vec<usize> {
    let half = (p / 2) as i64;
    let start = (mean as i64 - half).clamp(0, (grid - p) as i64);
    offsets.iter().map(|&o| (start + o + half) as usize).collect()
}

impl Cluster {
    pub fn angle_indices(&self, p: usize, m_1: usize) -> Vec<usize> {
        window_indices(self.mean_angle, &self.angle_offsets, p, m_1)
    }

    pub fn delay_indices(&self, p: usize, d: usize) -> Vec<usize> {
        window_indices(self.mean_delay, &self.delay_offsets, p, d)
    }
}

/// `mu_bar = (4 pi d f_c / c)^2`, the inverse gain variance.
pub fn path_loss(distance: f64, f_c: f64) -> f64 {
    (4.0 * PI * distance * f_c / SPEED_OF_LIGHT).powi(2)
}

fn draw_offsets<R: Rng + ?Sized>(rng: &mut R, p: usize, count: usize) -> Vec<i64> {
    let half = (p / 2) as i64;
    let mut v: Vec<i64> = sample(rng, p, count).into_iter().map(|i| i as i64 - half).collect();
    v.sort_unstable();
    v
}

pub fn sample_clusters<R: Rng + ?Sized>(cfg: &SystemConfig, device: usize, rng: &mut R) -> ClusterParams {
    let distance = rng.random_range(cfg.d_min..=cfg.d_max);
    let mu_bar = path_loss(distance, cfg.f_c);
    let var = 1.0 / mu_bar;
    let clusters = (0..cfg.clusters_of(device))
        .map(|_| {
            let mean_angle = rng.random_range(0..cfg.m_1);
            let mean_delay = rng.random_range(0..cfg.d);
            let angle_offsets = draw_offsets(rng, cfg.p, cfg.angle_shifts());
            let delay_offsets = draw_offsets(rng, cfg.p, cfg.delay_shifts());
            let angle_gains = (0..angle_offsets.len()).map(|_| complex_gaussian(rng, var)).collect();
            let delay_gains = (0..delay_offsets.len()).map(|_| complex_gaussian(rng, var)).collect();
            Cluster {
                mean_angle,
                mean_delay,
                angle_offsets,
                delay_offsets,
                angle_gains,
                delay_gains,
            }
        })
        .collect();
    ClusterParams {
        device,
        distance,
        mu_bar,
        spread: cfg.p,
        clusters,
    }
}

/// `X_n = sum_l s_l x_l^T` on the `M_1 x D` grid.
pub fn assemble_state_matrix(params: &ClusterParams, cfg: &SystemConfig) -> CMat {
    let mut x = CMat::zeros(cfg.m_1, cfg.d);
    for c in &params.clusters {
        let rows = c.angle_indices(params.spread, cfg.m_1);
        let cols = c.delay_indices(params.spread, cfg.d);
        for (&r, &g) in rows.iter().zip(&c.angle_gains) {
            for (&q, &h) in cols.iter().zip(&c.delay_gains) {
                x[(r, q)] += g * h;
            }
        }
    }
    x
}

/// One drawn scene: activity pattern and every device's state matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub activity: Vec<bool>,
    /// `X~_n` for every device, active or not.
    pub state: Vec<CMat>,
    /// Sorted indices of the active devices.
    pub support: Vec<usize>,
    pub params: Vec<ClusterParams>,
}

impl ChannelRealization {
    /// Activity-gated state matrix `X_n = chi_n X~_n`.
    pub fn device_matrix(&self, n: usize) -> CMat {
        if self.activity[n] {
            self.state[n].clone()
        } else {
            CMat::zeros(self.state[n].nrows(), self.state[n].ncols())
        }
    }

    pub fn device_matrices(&self) -> Vec<CMat> {
        (0..self.state.len()).map(|n| self.device_matrix(n)).collect()
    }

    pub fn num_devices(&self) -> usize {
        self.state.len()
    }
}

pub fn generate_scene<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> ChannelRealization {
    let mut support: Vec<usize> = sample(rng, cfg.n, cfg.k).into_vec();
    support.sort_unstable();
    let mut activity = vec![false; cfg.n];
    for &s in &support {
        activity[s] = true;
    }
    let params: Vec<ClusterParams> = (0..cfg.n).map(|n| sample_clusters(cfg, n, rng)).collect();
    let state = params.iter().map(|p| assemble_state_matrix(p, cfg)).collect();
    ChannelRealization {
        activity,
        state,
        support,
        params,
    }
}

/// Count of rows and columns holding at least one nonzero entry.
pub fn nonzero_rows_cols(x: &CMat) -> (usize, usize) {
    let rows = (0..x.nrows())
        .filter(|&i| x.row(i).iter().any(|z| z.norm_sqr() > 0.0))
        .count();
    let cols = (0..x.ncols())
        .filter(|&j| x.column(j).iter().any(|z| z.norm_sqr() > 0.0))
        .count();
    (rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c64, numerical_rank};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SystemConfig {
        SystemConfig::new(6, 3, 8, 8, 8, 32, 16, 0.25, 2, 2)
    }

    #[test]
    fn steering_vector_examples() {
        assert!(steering_vector(0.0, 4)
            .iter()
            .all(|z| (z - c64(1.0, 0.0)).norm() < 1e-15));
        assert_eq!(steering_vector(0.37, 1)[0], c64(1.0, 0.0));
        let a = steering_vector(0.5, 4);
        for (i, want) in [1.0, -1.0, 1.0, -1.0].iter().enumerate() {
            assert!((a[i] - c64(*want, 0.0)).norm() < 1e-12);
        }
        assert!(steering_vector(0.123, 9).iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
    }

    #[test]
    fn delay_vector_examples() {
        assert!(delay_vector(0, 8, 4)
            .unwrap()
            .iter()
            .all(|z| (z - c64(1.0, 0.0)).norm() < 1e-15));
        let v = delay_vector(1, 2, 2).unwrap();
        assert!((v[1] - c64(-1.0, 0.0)).norm() < 1e-12);
        let v = delay_vector(2, 8, 4).unwrap();
        let want = [c64(1.0, 0.0), c64(0.0, -1.0), c64(-1.0, 0.0), c64(0.0, 1.0)];
        for (b, w) in want.iter().enumerate() {
            assert!((v[b] - w).norm() < 1e-12);
            assert!((v[b + 4] - w).norm() < 1e-12);
        }
        assert!(matches!(delay_vector(4, 8, 4), Err(Error::InvalidDelaySample { .. })));
    }

    #[test]
    fn dictionaries_dft_orthogonality() {
        let cfg = small_cfg();
        let (at, au) = build_dictionaries(&cfg);
        let g = at.ad_mul(&at);
        let want = CMat::identity(8, 8).scale(8.0);
        assert!((g - want).norm() < 1e-10);
        assert!(at
            .column(0)
            .iter()
            .chain(au.column(0).iter())
            .all(|z| (z - c64(1.0, 0.0)).norm() < 1e-15));
        assert!(au.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn oversampled_grid_coherence() {
        // M = 4 antennas on an 8-point grid: brute-force Gram matrix.
        let mut cfg = small_cfg();
        cfg.m = 4;
        cfg.m_p = 4;
        let (at, _) = build_dictionaries(&cfg);
        let mut brute: f64 = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    let mut s = c64(0.0, 0.0);
                    for m in 0..4 {
                        let ph = 2.0 * PI * m as f64 * (i as f64 - j as f64) / 8.0;
                        s += Complex64::from_polar(1.0, ph);
                    }
                    brute = brute.max(s.norm() / 4.0);
                }
            }
        }
        let g = at.ad_mul(&at);
        let mut got: f64 = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    got = got.max(g[(i, j)].norm() / 4.0);
                }
            }
        }
        assert!((got - brute).abs() < 1e-12);
        // Adjacent columns of a 2x oversampled 4-element array: |1 + w + w^2 + w^3| / 4, w = e^{i pi/4}.
        let w = Complex64::from_polar(1.0, PI / 4.0);
        let adjacent = (c64(1.0, 0.0) + w + w * w + w * w * w).norm() / 4.0;
        assert!((got - adjacent).abs() < 1e-12);
    }

    #[test]
    fn unit_spread_touches_single_row_and_column() {
        let mut cfg = small_cfg();
        cfg.p = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = sample_clusters(&cfg, 0, &mut rng);
        for c in &params.clusters {
            assert_eq!(c.angle_offsets, vec![0]);
            assert_eq!(c.delay_offsets, vec![0]);
            assert_eq!(c.angle_indices(1, cfg.m_1), vec![c.mean_angle]);
            assert_eq!(c.delay_indices(1, cfg.d), vec![c.mean_delay]);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = small_cfg();
        let a = sample_clusters(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_clusters(&cfg, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let s1 = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(10));
        let s2 = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(10));
        assert_eq!(s1, s2);
    }

    #[test]
    fn gain_variance_matches_path_loss() {
        // Fix the distance so every gain shares one variance.
        let mut cfg = small_cfg();
        cfg.d_min = 100.0;
        cfg.d_max = 100.0;
        cfg.l_max = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut mu = 0.0;
        while count < 10_000 {
            let p = sample_clusters(&cfg, 0, &mut rng);
            mu = p.mu_bar;
            for c in &p.clusters {
                for g in c.angle_gains.iter().chain(&c.delay_gains) {
                    sum += g.norm_sqr();
                    count += 1;
                }
            }
        }
        let var = sum / count as f64;
        assert!((var * mu - 1.0).abs() < 0.05, "variance ratio {}", var * mu);
    }

    #[test]
    fn single_cluster_is_rank_one() {
        let mut cfg = small_cfg();
        cfg.l_max = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = assemble_state_matrix(&sample_clusters(&cfg, 0, &mut rng), &cfg);
        assert_eq!(numerical_rank(&x, 1e-10), 1);
    }

    #[test]
    fn zero_gains_give_zero_matrix() {
        let cfg = small_cfg();
        let mut p = sample_clusters(&cfg, 0, &mut ChaCha8Rng::seed_from_u64(13));
        for c in &mut p.clusters {
            c.angle_gains.iter_mut().for_each(|g| *g = c64(0.0, 0.0));
        }
        assert_eq!(assemble_state_matrix(&p, &cfg).norm(), 0.0);
    }

    #[test]
    fn state_matrix_matches_direct_channel_sum() {
        let cfg = SystemConfig::new(4, 2, 12, 12, 16, 64, 16, 0.25, 3, 3);
        let (at, au) = build_dictionaries(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for dev in 0..4 {
            let p = sample_clusters(&cfg, dev, &mut rng);
            let h = &at * assemble_state_matrix(&p, &cfg) * au.adjoint();
            // Direct evaluation: sum_l (sum_j s_j a(theta_j)) (sum_i x_i b(tau_i))^H
            let mut direct = CMat::zeros(cfg.m, cfg.b);
            for c in &p.clusters {
                let mut a = CVec::zeros(cfg.m);
                for (&r, &g) in c.angle_indices(cfg.p, cfg.m_1).iter().zip(&c.angle_gains) {
                    for m in 0..cfg.m {
                        let ph = -2.0 * PI * (r as f64 / cfg.m_1 as f64) * m as f64;
                        a[m] += g * Complex64::from_polar(1.0, ph);
                    }
                }
                let mut brow = CVec::zeros(cfg.b);
                for (&q, &g) in c.delay_indices(cfg.p, cfg.d).iter().zip(&c.delay_gains) {
                    for b in 0..cfg.b {
                        let tau = q as f64 * cfg.t_s / cfg.b as f64;
                        let ph = 2.0 * PI * b as f64 * tau / cfg.t_s;
                        brow[b] += g * Complex64::from_polar(1.0, ph);
                    }
                }
                direct += &a * brow.transpose();
            }
            let rel = (&h - &direct).norm() / direct.norm();
            assert!(rel < 1e-10, "device {dev}: relative error {rel}");
        }
    }

    #[test]
    fn degenerate_empty_support() {
        let mut cfg = small_cfg();
        cfg.k = 0;
        cfg.validate().unwrap();
        let s = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(15));
        assert!(s.support.is_empty());
        assert!(s.device_matrices().iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn scenes_respect_rank_and_footprint() {
        let cfg = SystemConfig::new(10, 4, 16, 16, 16, 64, 16, 0.25, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..100 {
            let s = generate_scene(&cfg, &mut rng);
            assert_eq!(s.support.len(), cfg.k);
            for (n, x) in s.state.iter().enumerate() {
                let l = cfg.clusters_of(n);
                assert!(numerical_rank(x, 1e-10) <= l);
                let (r, c) = nonzero_rows_cols(x);
                assert!(r <= cfg.p * l && c <= cfg.p * l);
                if !s.activity[n] {
                    assert_eq!(s.device_matrix(n).norm(), 0.0);
                }
            }
        }
    }

    #[test]
    fn config_json_round_trip_and_names() {
        let mut cfg = small_cfg();
        cfg.l_n = Some(vec![1, 2, 2, 1, 2, 2]);
        let text = serde_json::to_string(&cfg).unwrap();
        for key in [
            "\"N\"",
            "\"M_p\"",
            "\"M_1\"",
            "\"B_p\"",
            "\"L_max\"",
            "\"L_n\"",
            "\"T_s\"",
            "\"snr_db\"",
        ] {
            assert!(text.contains(key), "{key} missing from {text}");
        }
        let back: SystemConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = small_cfg();
        base.validate().unwrap();
        let mut c = base.clone();
        c.m_p = 9;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.d = 7;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.p = 4;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.j_n = Some(3);
        assert!(c.validate().is_err());
        let mut c = base;
        c.sigma2 = Some(1.0);
        assert!(c.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn prop_window_stays_on_grid(mean in 0usize..40, p in 1usize..8, grid in 8usize..40) {
            prop_assume!(mean < grid);
            let half = (p / 2) as i64;
            let offsets: Vec<i64> = (0..p as i64).map(|o| o - half).collect();
            let idx = window_indices(mean, &offsets, p, grid);
            prop_assert!(idx.iter().all(|&i| i < grid));
            let mut d = idx.clone();
            d.dedup();
            prop_assert_eq!(d.len(), p);
        }

        #[test]
        fn prop_scene_invariants(seed in any::<u64>(), p in 1usize..4, l in 1usize..3) {
            let cfg = SystemConfig::new(5, 2, 12, 12, 12, 48, 12, 0.25, l, p);
            let s = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(s.support.len(), 2);
            for x in &s.state {
                prop_assert!(numerical_rank(x, 1e-10) <= l);
                let (r, c) = nonzero_rows_cols(x);
                prop_assert!(r <= p * l && c <= p * l);
            }
        }
    }
}

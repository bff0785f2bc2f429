//! Detection, channel reconstruction and scoring.

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel_model::ChannelRealization;
use crate::error::{Error, Result};
use crate::linalg::{fro2, inner, sorted_svd, CMat};
use crate::manifold::FactorPoint;

/// Threshold used when no ground truth is available.
pub const FALLBACK_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub support: Vec<usize>,
    pub energies: Vec<f64>,
    pub threshold: f64,
}

/// Device `n` is declared active iff `||X_n||^2 >= v1 max_m ||X_m||^2`.
pub fn detect_activity(xs: &[CMat], v1: f64) -> DetectionResult {
    let energies: Vec<f64> = xs.iter().map(fro2).collect();
    detect_from_energies(&energies, v1)
}

pub fn detect_from_energies(energies: &[f64], v1: f64) -> DetectionResult {
    let top = energies.iter().copied().fold(0.0, f64::max);
    let support = if top > 0.0 {
        (0..energies.len()).filter(|&n| energies[n] >= v1 * top).collect()
    } else {
        Vec::new()
    };
    DetectionResult {
        support,
        energies: energies.to_vec(),
        threshold: v1,
    }
}

/// Scene-dependent threshold: half the squared ratio of the weakest to the
/// strongest active state matrix norm.
///
/// Falls back to [`FALLBACK_THRESHOLD`] for scenes with no active energy.
pub fn oracle_threshold(scene: &ChannelRealization) -> f64 {
    let norms: Vec<f64> = scene.support.iter().map(|&k| fro2(&scene.state[k]).sqrt()).collect();
    let hi = norms.iter().copied().fold(0.0, f64::max);
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    if hi > 0.0 && lo.is_finite() {
        0.5 * (lo / hi).powi(2)
    } else {
        FALLBACK_THRESHOLD
    }
}

/// `H_k = A_theta X_k A_tau^H` for every listed device.
pub fn estimate_channels(xs: &[CMat], a_theta: &CMat, a_tau: &CMat, devices: &[usize]) -> Vec<CMat> {
    devices.iter().map(|&k| a_theta * &xs[k] * a_tau.adjoint()).collect()
}

/// Missed-detection plus false-alarm probability.
pub fn aer(true_support: &[usize], est_support: &[usize], n: usize) -> f64 {
    let k = true_support.len();
    let miss = true_support.iter().filter(|i| !est_support.contains(i)).count();
    let false_alarm = est_support.iter().filter(|i| !true_support.contains(i)).count();
    let p_miss = if k == 0 { 0.0 } else { miss as f64 / k as f64 };
    let p_fa = if n == k {
        0.0
    } else {
        false_alarm as f64 / (n - k) as f64
    };
    p_miss + p_fa
}

/// `sqrt(sum ||H_k - H^_k||^2) / sqrt(sum ||H^_k||^2)` over the true active set.
///
/// The normalization uses the estimates; a vanishing denominator yields
/// `+inf`.
pub fn nmse(truth: &[CMat], est: &[CMat]) -> f64 {
    let num: f64 = truth.iter().zip(est).map(|(h, e)| fro2(&(h - e))).sum();
    let den: f64 = est.iter().map(fro2).sum();
    if den == 0.0 {
        warn!("NMSE denominator vanished; reporting +inf");
        return f64::INFINITY;
    }
    num.sqrt() / den.sqrt()
}

/// Channel NMSE of a full estimate: channels are reconstructed for the true
/// active set, with devices outside `est_support` contributing zero.
pub fn channel_nmse(
    truth_xs: &[CMat],
    est_xs: &[CMat],
    true_support: &[usize],
    est_support: &[usize],
    a_theta: &CMat,
    a_tau: &CMat,
) -> f64 {
    let h = estimate_channels(truth_xs, a_theta, a_tau, true_support);
    let e: Vec<CMat> = true_support
        .iter()
        .map(|&k| {
            if est_support.contains(&k) {
                a_theta * &est_xs[k] * a_tau.adjoint()
            } else {
                CMat::zeros(a_theta.nrows(), a_tau.nrows())
            }
        })
        .collect();
    nmse(&h, &e)
}

fn scaled_objective(jj: f64, rr: f64, a: Complex64, b: Complex64, t: f64) -> f64 {
    jj / (t * t) + t * t * rr - 2.0 * (a / t + b * t).norm()
}

/// Minimizes `||J / conj(theta) - J*||^2 + ||theta R - R*||^2` over complex
/// `theta`; returns `(minimum, theta)`.
///
/// Both terms share the phase of `theta`, so the phase is solved in closed
/// form and only `t = |theta|` is searched.
pub fn align_scalar(j: &CMat, r: &CMat, j_star: &CMat, r_star: &CMat) -> Result<(f64, Complex64)> {
    let jj = fro2(j);
    let rr = fro2(r);
    let base = fro2(j_star) + fro2(r_star);
    let a = inner(j_star, j);
    let b = inner(r_star, r);
    let h = |u: f64| scaled_objective(jj, rr, a, b, u.exp());
    // The value is recomputed from the residuals: the expanded form cancels
    // catastrophically near the optimum.
    let finish = |u: f64| {
        let t = u.exp();
        let z = a / t + b * t;
        let phase = if z.norm() > 0.0 {
            z.conj() / z.norm()
        } else {
            Complex64::new(1.0, 0.0)
        };
        let theta = phase * t;
        let v = fro2(&(j.map(|x| x / theta.conj()) - j_star)) + fro2(&(r * theta - r_star));
        (v, theta)
    };
    if jj == 0.0 && rr == 0.0 {
        return Ok((base, Complex64::new(1.0, 0.0)));
    }
    // Balanced scale as the grid centre; 401 points over e^{+-20} around it.
    let centre = if jj > 0.0 && rr > 0.0 {
        0.25 * (jj / rr).ln()
    } else {
        0.0
    };
    let half_width = 20.0;
    let steps = 400;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| centre - half_width + 2.0 * half_width * i as f64 / steps as f64)
        .collect();
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(i, &u)| (i, h(u)))
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    if best == 0 || best == steps {
        let (v, th) = finish(grid[best]);
        return Err(Error::AlignmentFailed {
            residual: v.max(th.norm()),
        });
    }
    let (mut lo, mut hi) = (grid[best - 1], grid[best + 1]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (h(x1), h(x2));
    for _ in 0..200 {
        if hi - lo < 1e-13 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = h(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = h(x2);
        }
    }
    Ok(finish(0.5 * (lo + hi)))
}

/// Aligned factor distance over devices with nonzero reference factors.
pub fn aligned_distance(s: &FactorPoint, s_star: &FactorPoint) -> Result<f64> {
    if s.num_devices() != s_star.num_devices() || s.m_1 != s_star.m_1 || s.d != s_star.d {
        return Err(Error::ShapeMismatch("factor points differ in layout".into()));
    }
    let mut total = 0.0;
    for n in 0..s.num_devices() {
        let norm = fro2(&s_star.factors[n]);
        if norm == 0.0 {
            continue;
        }
        let (v, _) = align_scalar(&s.j(n), &s.r(n), &s_star.j(n), &s_star.r(n))?;
        total += v / norm;
    }
    Ok(total.sqrt())
}

/// Unitary `Q` minimizing `||S* Q - S||_F`.
pub fn procrustes(s_star: &CMat, s: &CMat) -> CMat {
    let svd = sorted_svd(&s_star.ad_mul(s));
    &svd.u * svd.v.adjoint()
}

/// Reference factors rotated onto `s` device by device.
pub fn procrustes_align(s_star: &FactorPoint, s: &FactorPoint) -> FactorPoint {
    let factors = s_star
        .factors
        .iter()
        .zip(&s.factors)
        .map(|(a, b)| a * procrustes(a, b))
        .collect();
    FactorPoint {
        factors,
        m_1: s_star.m_1,
        d: s_star.d,
    }
}

/// `max_{n,q} sqrt(measurements) ||b_q^H J_n*|| / ||J_n*||_F` over the rows
/// `b_q^H` of `rows`. Zero factors are skipped.
pub fn incoherence(j_star: &[CMat], rows: &CMat, measurements: usize) -> f64 {
    let scale = (measurements as f64).sqrt();
    let mut beta: f64 = 0.0;
    for j in j_star {
        let nj = fro2(j).sqrt();
        if nj == 0.0 {
            continue;
        }
        let proj = rows * j;
        for q in 0..proj.nrows() {
            beta = beta.max(scale * proj.row(q).norm() / nj);
        }
    }
    beta
}

//! Multi-rank aware sparse recovery (MRAS): smoothed lifted loss, Euclidean
//! gradient, truncated spectral initialization and the Riemannian gradient
//! (RG) and conjugate gradient (RC) iterations.
//!
//! Gradients use the convention `G = 2 df/d conj(S)`, so that
//! `df = Re Tr(G^H dS)` for a real loss `f`.

use std::time::Instant;

use log::{debug, warn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fro2, gemm, matmul, random_cmat, real_inner, sorted_svd, CMat, Op};
use crate::manifold::{
    horizontal_project, horizontal_project_regularized, is_full_rank, metric, retract, FactorPoint, EPS_RANK,
};
use crate::measurement::MeasurementOperator;
use crate::metrics::{aligned_distance, procrustes_align};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "RG")]
    Rg,
    #[serde(rename = "RC")]
    Rc,
}

/// Loss ratio over the best loss so far treated as divergence.
const DIVERGENCE_FACTOR: f64 = 4.0;
const MAX_HALVINGS: usize = 20;

fn default_nu() -> f64 {
    0.3
}
fn default_rho() -> f64 {
    1.0 / 0.039
}
fn default_step_scale() -> f64 {
    4.0
}
fn default_max_iter() -> usize {
    1000
}
fn default_omega() -> f64 {
    3.0
}
fn default_tol() -> f64 {
    1e-8
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    #[serde(default = "default_nu")]
    pub nu: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Absolute step size. When absent the step is `step_scale / lambda`,
    /// with `lambda` the largest per-device block Lipschitz constant.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default = "default_step_scale")]
    pub step_scale: f64,
    #[serde(rename = "T", default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_omega")]
    pub omega_trunc: f64,
    pub variant: Variant,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Assumed rank; `None` means `L_max` of the scenario.
    #[serde(rename = "L_hat", default)]
    pub rank: Option<usize>,
    /// Solve on `Y / s` with `s = ||Y||_F / sqrt(M_p B_p)` and rescale.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Rescale the spectral start by the dictionary gains and a global
    /// least-squares factor.
    #[serde(default = "default_true")]
    pub init_rescale: bool,
    /// Seed for the random perturbation of rank-deficient starts.
    #[serde(default)]
    pub seed: u64,
}

impl SolverConfig {
    pub fn new(variant: Variant) -> Self {
        SolverConfig {
            nu: default_nu(),
            rho: default_rho(),
            mu: None,
            step_scale: default_step_scale(),
            max_iter: default_max_iter(),
            omega_trunc: default_omega(),
            variant,
            tol: default_tol(),
            rank: None,
            normalize: true,
            init_rescale: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.nu >= 0.0) {
            return bad("nu must be non-negative");
        }
        if !(self.rho > 0.0) {
            return bad("rho must be positive");
        }
        if let Some(mu) = self.mu {
            if !(mu > 0.0) {
                return bad("mu must be positive");
            }
        }
        if !(self.step_scale > 0.0) {
            return bad("step_scale must be positive");
        }
        if self.max_iter == 0 {
            return bad("T must be at least 1");
        }
        if self.rank == Some(0) {
            return bad("L_hat must be at least 1");
        }
        if !(self.omega_trunc > 0.0) {
            return bad("omega_trunc must be positive");
        }
        Ok(())
    }

    /// Step size for `op`.
    pub fn step_size(&self, op: &MeasurementOperator) -> f64 {
        self.mu.unwrap_or_else(|| self.step_scale / op.block_lipschitz())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub dist: Vec<f64>,
    pub seconds: Vec<f64>,
}

impl SolverTrace {
    pub fn iterations(&self) -> usize {
        self.loss.len()
    }

    /// CSV with columns iteration, loss, grad_norm, dist, seconds.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "loss", "grad_norm", "dist", "seconds"])?;
        for i in 0..self.loss.len() {
            let dist = self.dist.get(i).map_or(String::new(), |d| d.to_string());
            wr.write_record([
                i.to_string(),
                self.loss[i].to_string(),
                self.grad_norm[i].to_string(),
                dist,
                self.seconds[i].to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `g(x) = |x| - ln(1 + rho |x|) / rho` and its gradient `rho x / (1 + rho |x|)`.
pub fn smooth_abs(x: Complex64, rho: f64) -> (f64, Complex64) {
    let a = x.norm_sqr().sqrt();
    let value = a - (rho * a).ln_1p() / rho;
    (value.max(0.0), x * (rho / (1.0 + rho * a)))
}

struct Eval {
    loss: f64,
    grads: Option<Vec<CMat>>,
}

fn check_point(point: &FactorPoint, op: &MeasurementOperator, y: &CMat) -> Result<()> {
    if point.num_devices() != op.num_devices() || point.m_1 != op.m_1() || point.d != op.d() {
        return Err(Error::ShapeMismatch("factor point does not match the operator".into()));
    }
    if y.shape() != (op.m_p(), op.b_p()) {
        return Err(Error::ShapeMismatch(format!(
            "observation of shape {:?}, expected {:?}",
            y.shape(),
            (op.m_p(), op.b_p())
        )));
    }
    Ok(())
}

fn evaluate(point: &FactorPoint, op: &MeasurementOperator, y: &CMat, nu: f64, rho: f64, grad: bool) -> Result<Eval> {
    check_point(point, op, y)?;
    let (m_1, d) = (point.m_1, point.d);
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    // All devices side by side: J_all = [J_1 ... J_N], R_all likewise, so that
    // the products with the common delay matrix run as single kernels.
    let offsets: Vec<usize> = point
        .factors
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.ncols();
            Some(o)
        })
        .collect();
    let width: usize = point.factors.iter().map(|s| s.ncols()).sum();
    let mut j_all = CMat::zeros(m_1, width);
    let mut r_all = CMat::zeros(d, width);
    for (s, &o) in point.factors.iter().zip(&offsets) {
        j_all.columns_mut(o, s.ncols()).copy_from(&s.rows(0, m_1));
        r_all.columns_mut(o, s.ncols()).copy_from(&s.rows(m_1, d));
    }
    // U_n = A_n^H R_n = diag(conj alpha_n) A_common^H R_n.
    let mut u_all = matmul(&op.a_common, Op::H, &r_all, Op::N);
    let scale_rows = |m: &mut CMat, conj: bool| {
        for (n, s) in point.factors.iter().enumerate() {
            let alpha = &op.pilots[n];
            for c in offsets[n]..offsets[n] + s.ncols() {
                for (z, a) in m.column_mut(c).iter_mut().zip(alpha.iter()) {
                    *z *= if conj { a.conj() } else { *a };
                }
            }
        }
    };
    scale_rows(&mut u_all, true);
    let inner = matmul(&j_all, Op::N, &u_all, Op::H);
    let mut res = -y.clone();
    gemm(one, &op.b_mat, Op::N, &inner, Op::N, one, &mut res);
    let mut loss = 0.5 * fro2(&res);
    let mut ws = Vec::new();
    if nu > 0.0 {
        let mut x = CMat::zeros(m_1, d);
        for s in &point.factors {
            gemm(one, &s.rows(0, m_1), Op::N, &s.rows(m_1, d), Op::H, zero, &mut x);
            let mut w = CMat::zeros(m_1, d);
            let mut acc = 0.0;
            for (dst, &z) in w.iter_mut().zip(x.iter()) {
                let (v, g) = smooth_abs(z, rho);
                acc += v;
                *dst = g;
            }
            loss += nu * acc;
            if grad {
                ws.push(w);
            }
        }
    }
    if !grad {
        return Ok(Eval { loss, grads: None });
    }
    let bres = matmul(&op.b_mat, Op::H, &res, Op::N);
    let top_all = matmul(&bres, Op::N, &u_all, Op::N);
    // A_n (B^H res)^H J_n = A_common diag(alpha_n) (B^H res)^H J_n.
    let mut v_all = matmul(&bres, Op::H, &j_all, Op::N);
    scale_rows(&mut v_all, false);
    let bottom_all = matmul(&op.a_common, Op::N, &v_all, Op::N);
    let nu_c = Complex64::new(nu, 0.0);
    let mut grads = Vec::with_capacity(point.num_devices());
    for (n, s) in point.factors.iter().enumerate() {
        let (o, l) = (offsets[n], s.ncols());
        let mut g = CMat::zeros(m_1 + d, l);
        g.rows_mut(0, m_1).copy_from(&top_all.columns(o, l));
        g.rows_mut(m_1, d).copy_from(&bottom_all.columns(o, l));
        if nu > 0.0 {
            let w = &ws[n];
            gemm(nu_c, w, Op::N, &s.rows(m_1, d), Op::N, one, &mut g.rows_mut(0, m_1));
            gemm(nu_c, w, Op::H, &s.rows(0, m_1), Op::N, one, &mut g.rows_mut(m_1, d));
        }
        grads.push(g);
    }
    Ok(Eval {
        loss,
        grads: Some(grads),
    })
}

/// `1/2 ||sum_n B J_n R_n^H A_n - Y||^2 + nu sum_n sum_ij g((J_n R_n^H)_ij)`.
pub fn loss(point: &FactorPoint, op: &MeasurementOperator, y: &CMat, nu: f64, rho: f64) -> Result<f64> {
    Ok(evaluate(point, op, y, nu, rho, false)?.loss)
}

/// Per-device `[E_n R_n; E_n^H J_n]` with
/// `E_n = B^H (sum_m B X_m A_m - Y) A_n^H + nu rho X_n / (1 + rho |X_n|)`.
pub fn euclidean_gradient(
    point: &FactorPoint,
    op: &MeasurementOperator,
    y: &CMat,
    nu: f64,
    rho: f64,
) -> Result<Vec<CMat>> {
    Ok(evaluate(point, op, y, nu, rho, true)?
        .grads
        .expect("gradient requested"))
}

/// Zeroes entries whose modulus exceeds `omega / (M_p B_p) sum |y|`.
pub fn truncate_observation(y: &CMat, omega: f64) -> CMat {
    let total: f64 = y.iter().map(|z| z.norm()).sum();
    let thr = omega / y.len() as f64 * total;
    // Entries equal to the threshold up to rounding are kept.
    let thr = thr * (1.0 + 1e-12);
    y.map(|z| if z.norm() <= thr { z } else { Complex64::new(0.0, 0.0) })
}

/// Balanced factor `[U sqrt(S); V sqrt(S)]` of the rank-`rank` truncated SVD
/// of `m`. The flag reports that the numerical rank fell short of `rank`.
pub fn balanced_factor(m: &CMat, rank: usize) -> (CMat, bool) {
    let (m_1, d) = m.shape();
    let svd = sorted_svd(m);
    let mut s = CMat::zeros(m_1 + d, rank);
    let top = svd.s.first().copied().unwrap_or(0.0);
    let mut short = false;
    for l in 0..rank {
        let sv = svd.s.get(l).copied().unwrap_or(0.0);
        if sv <= 1e-12 * top || sv == 0.0 {
            short = true;
            continue;
        }
        let w = Complex64::new(sv.sqrt(), 0.0);
        for i in 0..m_1 {
            s[(i, l)] = svd.u[(i, l)] * w;
        }
        for i in 0..d {
            s[(m_1 + i, l)] = svd.v[(i, l)] * w;
        }
    }
    (s, short)
}

/// Spectral start from `B^H Y A_n^H`, one truncated SVD per device.
pub fn spectral_init(op: &MeasurementOperator, y_tru: &CMat, rank: usize) -> Result<FactorPoint> {
    if rank == 0 || rank > op.m_1().min(op.d()) {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} outside [1, min(M_1, D) = {}]",
            op.m_1().min(op.d())
        )));
    }
    let back = op.adjoint(y_tru)?;
    let mut factors = Vec::with_capacity(back.len());
    for (n, m) in back.iter().enumerate() {
        let (s, short) = balanced_factor(m, rank);
        if short {
            warn!("device {n}: back-projection has numerical rank below {rank}; padding with zero directions");
        }
        factors.push(s);
    }
    FactorPoint::new(factors, op.m_1(), op.d())
}

fn project_safe(s: &CMat, xi: &CMat) -> CMat {
    match horizontal_project(s, xi) {
        Ok(z) => z,
        Err(_) => {
            let top = s.norm();
            horizontal_project_regularized(s, xi, (EPS_RANK * top).powi(2).max(f64::MIN_POSITIVE))
        }
    }
}

/// Riemannian gradient `Pi_H(G / 2)` with the regularized fallback.
fn rgrad(s: &CMat, g: &CMat) -> CMat {
    project_safe(s, &g.scale(0.5))
}

fn weight(s: &CMat) -> Option<f64> {
    let w = 2.0 * fro2(s);
    if w > 1e-280 && w.is_finite() {
        Some(w)
    } else {
        None
    }
}

fn retract_halving(s: &CMat, eta: &CMat, mu: f64) -> CMat {
    let mut step = mu;
    for _ in 0..=10 {
        match retract(s, eta, step) {
            Ok(out) => return out,
            Err(_) => step *= 0.5,
        }
    }
    debug!("step stayed degenerate after 10 halvings; accepting the update");
    s + eta.scale(step)
}

fn rg_update(point: &FactorPoint, grads: &[CMat], mu: f64) -> FactorPoint {
    let factors = point
        .factors
        .iter()
        .zip(grads)
        .map(|(s, g)| match weight(s) {
            Some(w) => {
                let eta = rgrad(s, g).scale(-1.0 / w);
                retract_halving(s, &eta, mu)
            }
            None => s.clone(),
        })
        .collect();
    FactorPoint {
        factors,
        m_1: point.m_1,
        d: point.d,
    }
}

/// One RG-MRAS step with step size `cfg.step_size(op)`.
pub fn rg_step(point: &FactorPoint, op: &MeasurementOperator, y: &CMat, cfg: &SolverConfig) -> Result<FactorPoint> {
    let grads = euclidean_gradient(point, op, y, cfg.nu, cfg.rho)?;
    Ok(rg_update(point, &grads, cfg.step_size(op)))
}

/// Conjugate-gradient memory: per-device search directions and weighted
/// Riemannian gradients at the point they were computed.
#[derive(Clone, Debug, PartialEq)]
pub struct RcState {
    pub dirs: Vec<CMat>,
    pub grads: Vec<CMat>,
    pub restarts: usize,
}

fn rc_update(point: &FactorPoint, grads: &[CMat], prev: Option<&RcState>, mu: f64, tol: f64) -> (FactorPoint, RcState) {
    let n = point.num_devices();
    let mut factors = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    let mut wgrads = Vec::with_capacity(n);
    let mut restarts = 0;
    for i in 0..n {
        let s = &point.factors[i];
        let Some(w) = weight(s) else {
            factors.push(s.clone());
            dirs.push(CMat::zeros(s.nrows(), s.ncols()));
            wgrads.push(CMat::zeros(s.nrows(), s.ncols()));
            continue;
        };
        let gh = rgrad(s, &grads[i]).scale(1.0 / w);
        let mut eta = -&gh;
        if let Some(p) = prev {
            let denom = 2.0 * fro2(&p.grads[i]);
            if denom >= tol * tol && denom > 0.0 {
                let g_old = project_safe(s, &p.grads[i]);
                let d_old = project_safe(s, &p.dirs[i]);
                let o = (2.0 * real_inner(&gh, &(&gh - &g_old)) / denom).max(0.0);
                let cand = &eta + d_old.scale(o);
                // Keep the direction a descent direction, else restart.
                if o > 0.0 && real_inner(&cand, &gh) < 0.0 {
                    eta = cand;
                } else {
                    restarts += 1;
                }
            } else {
                restarts += 1;
            }
        }
        factors.push(retract_halving(s, &eta, mu));
        dirs.push(eta);
        wgrads.push(gh);
    }
    (
        FactorPoint {
            factors,
            m_1: point.m_1,
            d: point.d,
        },
        RcState {
            dirs,
            grads: wgrads,
            restarts,
        },
    )
}

/// One RC-MRAS step. Without a previous state this is a gradient step.
///
/// The Polak-Ribiere coefficient is computed from the weighted gradients
/// `grad / g(S, S)`, the quantity the RG step moves along, and clamped at 0.
pub fn rc_step(
    point: &FactorPoint,
    prev: Option<&RcState>,
    op: &MeasurementOperator,
    y: &CMat,
    cfg: &SolverConfig,
) -> Result<(FactorPoint, RcState)> {
    let grads = euclidean_gradient(point, op, y, cfg.nu, cfg.rho)?;
    Ok(rc_update(point, &grads, prev, cfg.step_size(op), cfg.tol))
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    /// Estimates `X_n` in the units of the input observation.
    pub xs: Vec<CMat>,
    /// Final iterate in the (possibly normalized) units of the solve.
    pub point: FactorPoint,
    pub trace: SolverTrace,
    /// Normalization `s`; the solve ran on `Y / s`.
    pub scale: f64,
    pub step: f64,
}

fn global_ls_scale(op: &MeasurementOperator, point: &FactorPoint, y: &CMat) -> Result<f64> {
    let ay = op.forward(&point.xs())?;
    let den = fro2(&ay);
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((real_inner(&ay, y) / den).max(0.0))
}

fn perturb_deficient(point: &mut FactorPoint, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let typical = point
        .factors
        .iter()
        .map(|s| s.norm() / (s.len() as f64).sqrt())
        .fold(0.0, f64::max);
    let scale = if typical > 0.0 { 1e-3 * typical } else { 1e-6 };
    for s in point.factors.iter_mut() {
        if !is_full_rank(s) {
            let noise = random_cmat(s.nrows(), s.ncols(), scale * scale, &mut rng);
            *s += noise;
        }
    }
}

/// Per-iteration summary returned by [`MrasRun::iterate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterInfo {
    /// Loss and gradient norm at the point before the update.
    pub loss: f64,
    pub grad_norm: f64,
    /// True when the gradient norm fell below `tol` and no update was made.
    pub converged: bool,
}

/// Solver state between iterations: the normalized observation, the
/// current iterate and the conjugate-gradient memory.
#[derive(Clone, Debug)]
pub struct MrasRun<'a> {
    op: &'a MeasurementOperator,
    y: CMat,
    cfg: SolverConfig,
    point: FactorPoint,
    rc: Option<RcState>,
    mu: f64,
    scale: f64,
    rank: usize,
    /// Lowest-loss point so far, kept for the divergence guard.
    best: Option<(FactorPoint, f64)>,
    halvings: usize,
}

impl<'a> MrasRun<'a> {
    /// Normalization, truncation and spectral start. `rank` is used when the
    /// config leaves the rank open.
    pub fn new(op: &'a MeasurementOperator, y: &CMat, rank: usize, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let rank = cfg.rank.unwrap_or(rank);
        let ynorm = fro2(y).sqrt();
        let scale = if cfg.normalize && ynorm > 0.0 {
            ynorm / (op.measurements() as f64).sqrt()
        } else {
            1.0
        };
        let y = y.unscale(scale);
        let y_tru = truncate_observation(&y, cfg.omega_trunc);
        let mut point = spectral_init(op, &y_tru, rank)?;
        if cfg.init_rescale {
            for (n, s) in point.factors.iter_mut().enumerate() {
                let gain = op.m_p() as f64 * op.pilots[n].norm_squared();
                if gain > 0.0 {
                    *s = s.unscale(gain.sqrt());
                }
            }
            let c = global_ls_scale(op, &point, &y)?;
            if c > 0.0 {
                let r = c.sqrt();
                point.factors.iter_mut().for_each(|s| *s *= Complex64::new(r, 0.0));
            } else {
                point.factors.iter_mut().for_each(|s| s.fill(Complex64::new(0.0, 0.0)));
            }
        }
        // A zero observation has the zero estimate; keep the start exact.
        if ynorm > 0.0 {
            perturb_deficient(&mut point, cfg.seed);
        }
        Ok(MrasRun {
            op,
            y,
            mu: cfg.step_size(op),
            cfg: cfg.clone(),
            point,
            rc: None,
            scale,
            rank,
            best: None,
            halvings: 0,
        })
    }

    /// One update of the configured variant.
    pub fn iterate(&mut self, iteration: usize) -> Result<IterInfo> {
        if self.point.factors.iter().all(|s| s.iter().all(|z| z.norm_sqr() == 0.0)) {
            return Ok(IterInfo {
                loss: 0.5 * fro2(&self.y),
                grad_norm: 0.0,
                converged: true,
            });
        }
        let mut ev = evaluate(&self.point, self.op, &self.y, self.cfg.nu, self.cfg.rho, true)?;
        // A blow-up returns to the best point and halves the step.
        while !ev.loss.is_finite() || self.best.as_ref().is_some_and(|(_, l)| ev.loss > DIVERGENCE_FACTOR * l) {
            let Some((p, _)) = self.best.as_ref().filter(|_| self.halvings < MAX_HALVINGS) else {
                return Err(Error::NonFiniteLoss {
                    iteration,
                    value: ev.loss,
                });
            };
            self.halvings += 1;
            self.mu *= 0.5;
            self.rc = None;
            debug!(
                "loss jumped to {:.3e} at iteration {iteration}; step halved to {:.3e}",
                ev.loss, self.mu
            );
            self.point = p.clone();
            ev = evaluate(&self.point, self.op, &self.y, self.cfg.nu, self.cfg.rho, true)?;
        }
        let grads = ev.grads.expect("gradient requested");
        let grad_norm = self
            .point
            .factors
            .iter()
            .zip(&grads)
            .map(|(s, g)| {
                let r = rgrad(s, g);
                metric(&r, &r).map(f64::sqrt).unwrap_or(f64::NAN)
            })
            .fold(0.0, f64::max);
        if grad_norm < self.cfg.tol {
            return Ok(IterInfo {
                loss: ev.loss,
                grad_norm,
                converged: true,
            });
        }
        if self.best.as_ref().is_none_or(|(_, l)| ev.loss < *l) {
            self.best = Some((self.point.clone(), ev.loss));
        }
        self.point = match self.cfg.variant {
            Variant::Rg => rg_update(&self.point, &grads, self.mu),
            Variant::Rc => {
                let (p, state) = rc_update(&self.point, &grads, self.rc.as_ref(), self.mu, self.cfg.tol);
                self.rc = Some(state);
                p
            }
        };
        Ok(IterInfo {
            loss: ev.loss,
            grad_norm,
            converged: false,
        })
    }

    /// Current iterate in normalized units.
    pub fn point(&self) -> &FactorPoint {
        &self.point
    }

    /// Current estimates `X_n` in the units of the input observation.
    pub fn estimates(&self) -> Vec<CMat> {
        self.point.xs().into_iter().map(|x| x.scale(self.scale)).collect()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn step(&self) -> f64 {
        self.mu
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Balanced rank-`rank` factors of `xs`, in the normalized units.
    pub fn reference_factors(&self, xs: &[CMat]) -> FactorPoint {
        let factors = xs
            .iter()
            .map(|x| balanced_factor(&x.unscale(self.scale), self.rank).0)
            .collect();
        FactorPoint {
            factors,
            m_1: self.op.m_1(),
            d: self.op.d(),
        }
    }
}

/// Truncation, spectral start and iterations of the configured variant.
///
/// With `truth` the trace records the aligned distance to the balanced
/// factors of the truth, each rotated onto the current iterate first.
pub fn solve(
    op: &MeasurementOperator,
    y: &CMat,
    rank: usize,
    cfg: &SolverConfig,
    truth: Option<&[CMat]>,
) -> Result<SolveOutput> {
    let mut run = MrasRun::new(op, y, rank, cfg)?;
    let star = truth.map(|xs| run.reference_factors(xs));
    let mut trace = SolverTrace::default();
    for it in 0..cfg.max_iter {
        let t0 = Instant::now();
        if let Some(st) = &star {
            let aligned = procrustes_align(st, run.point());
            trace.dist.push(aligned_distance(run.point(), &aligned)?);
        }
        let info = run.iterate(it)?;
        trace.loss.push(info.loss);
        trace.grad_norm.push(info.grad_norm);
        trace.seconds.push(t0.elapsed().as_secs_f64());
        if info.converged {
            break;
        }
    }
    Ok(SolveOutput {
        xs: run.estimates(),
        point: run.point().clone(),
        trace,
        scale: run.scale(),
        step: run.step(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{generate_scene, SystemConfig};
    use crate::linalg::{c64, kron, random_cmat, vec_of};
    use crate::manifold::horizontality_defect;
    use crate::measurement::DEFAULT_DENSE_BUDGET;
    use proptest::prelude::*;

    fn toy() -> (SystemConfig, MeasurementOperator) {
        let cfg = SystemConfig::new(3, 2, 8, 8, 8, 32, 12, 0.25, 2, 2);
        let op = MeasurementOperator::random(&cfg, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        (cfg, op)
    }

    fn random_point(op: &MeasurementOperator, l: usize, rng: &mut ChaCha8Rng) -> FactorPoint {
        let f = (0..op.num_devices())
            .map(|_| random_cmat(op.m_1() + op.d(), l, 0.5, rng))
            .collect();
        FactorPoint::new(f, op.m_1(), op.d()).unwrap()
    }

    fn dense_loss(point: &FactorPoint, op: &MeasurementOperator, y: &CMat, nu: f64, rho: f64) -> f64 {
        let mut acc = -y.clone();
        let mut reg = 0.0;
        for n in 0..point.num_devices() {
            let x = point.x(n);
            acc += &op.b_mat * &x * &op.a_mats[n];
            for z in x.iter() {
                let a = z.norm();
                reg += a - (1.0 + rho * a).ln() / rho;
            }
        }
        0.5 * acc.norm_squared() + nu * reg
    }

    #[test]
    fn smooth_abs_examples() {
        assert_eq!(smooth_abs(c64(0.0, 0.0), 25.0), (0.0, c64(0.0, 0.0)));
        let rho = 1.0 / 0.039;
        let (v, _) = smooth_abs(c64(1.0, 0.0), rho);
        assert!((v - (1.0 - 0.039 * (1.0 + 1.0 / 0.039f64).ln())).abs() < 1e-14);
        let (v, _) = smooth_abs(c64(0.6, 0.8), 1e6);
        assert!((v - 1.0).abs() < 2e-5 * (1.0 + (1.0 + 1e6f64).ln()));
        // Gradient against finite differences of the real and imaginary parts.
        let x = c64(0.3, -0.2);
        let (_, g) = smooth_abs(x, 7.0);
        let h = 1e-7;
        let dre = (smooth_abs(x + h, 7.0).0 - smooth_abs(x - h, 7.0).0) / (2.0 * h);
        let dim = (smooth_abs(x + c64(0.0, h), 7.0).0 - smooth_abs(x - c64(0.0, h), 7.0).0) / (2.0 * h);
        assert!((g.re - dre).abs() < 1e-7 && (g.im - dim).abs() < 1e-7);
    }

    #[test]
    fn loss_examples() {
        let (_, op) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_point(&op, 2, &mut rng);
        let y = op.forward(&p.xs()).unwrap();
        assert!(loss(&p, &op, &y, 0.0, 25.0).unwrap() < 1e-20);
        let zero = FactorPoint::new(vec![CMat::zeros(16, 2); 3], 8, 8).unwrap();
        assert!((loss(&zero, &op, &y, 0.3, 25.0).unwrap() - 0.5 * fro2(&y)).abs() < 1e-12 * fro2(&y));
        let q = random_point(&op, 2, &mut rng);
        let got = loss(&q, &op, &y, 0.3, 25.0).unwrap();
        let want = dense_loss(&q, &op, &y, 0.3, 25.0);
        assert!((got - want).abs() < 1e-10 * want);
    }

    #[test]
    fn gradient_examples() {
        let (_, op) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_point(&op, 2, &mut rng);
        let y = op.forward(&p.xs()).unwrap();
        let g = euclidean_gradient(&p, &op, &y, 0.0, 25.0).unwrap();
        assert!(g.iter().all(|m| m.norm() < 1e-10));
        let y2 = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
        for nu in [0.0, 0.3] {
            let g = euclidean_gradient(&p, &op, &y2, nu, 25.0).unwrap();
            for (s, gn) in p.factors.iter().zip(&g) {
                let m = gn.ad_mul(s);
                assert!((&m - m.adjoint()).norm() < 1e-9 * m.norm().max(1.0));
                assert!(horizontality_defect(s, gn) < 1e-9 * m.norm().max(1.0));
            }
        }
    }

    #[test]
    fn data_gradient_matches_dense_chain_rule() {
        let (_, mut op) = toy();
        let dense = op.materialize_dense(DEFAULT_DENSE_BUDGET).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_point(&op, 2, &mut rng);
        let y = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
        // E = unvec(A^H (A vec X - y)), then [E R; E^H J].
        let mut stacked = CMat::zeros(8, 24);
        for n in 0..3 {
            stacked.columns_mut(n * 8, 8).copy_from(&p.x(n));
        }
        let r = &dense * vec_of(&stacked) - vec_of(&y);
        let e = dense.ad_mul(&r);
        let g = euclidean_gradient(&p, &op, &y, 0.0, 25.0).unwrap();
        for n in 0..3 {
            let en = CMat::from_column_slice(8, 8, &e.as_slice()[n * 64..(n + 1) * 64]);
            let mut want = CMat::zeros(16, 2);
            want.rows_mut(0, 8).copy_from(&(&en * p.r(n)));
            want.rows_mut(8, 8).copy_from(&(en.adjoint() * p.j(n)));
            assert!((&g[n] - &want).norm() < 1e-9 * want.norm());
        }
        let _ = kron(&CMat::identity(1, 1), &CMat::identity(1, 1));
    }

    #[test]
    fn truncation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random_cmat(4, 4, 1.0, &mut rng);
        let mean = y.iter().map(|z| z.norm()).sum::<f64>() / 16.0;
        let maxabs = y.iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert_eq!(truncate_observation(&y, 10.0 * 16.0 * maxabs / mean), y);
        let flat = CMat::from_fn(4, 4, |i, j| Complex64::from_polar(2.0, (i * 4 + j) as f64));
        assert_eq!(truncate_observation(&flat, 1.0), flat);
        let mut spiky = CMat::from_element(4, 4, c64(1.0, 0.0));
        spiky[(2, 1)] = c64(0.0, 100.0);
        let t = truncate_observation(&spiky, 3.0);
        // Threshold 3 (15 + 100) / 16 = 21.6: only the outlier goes.
        assert_eq!(t[(2, 1)], c64(0.0, 0.0));
        assert_eq!(t.iter().filter(|z| z.norm() == 0.0).count(), 1);
    }

    #[test]
    fn spectral_init_is_best_low_rank_approximation() {
        let (_, op) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
        let p = spectral_init(&op, &y, 2).unwrap();
        for n in 0..3 {
            let m = op.adjoint_device(n, &y);
            let svd = sorted_svd(&m);
            let mut best = CMat::zeros(8, 8);
            for l in 0..2 {
                best += (svd.u.column(l) * svd.v.column(l).adjoint()).scale(svd.s[l]);
            }
            assert!((p.x(n) - &best).norm() < 1e-10 * best.norm());
            let err2 = fro2(&(p.x(n) - &m));
            let tail: f64 = svd.s[2..].iter().map(|s| s * s).sum();
            assert!((err2 - tail).abs() < 1e-9 * tail);
        }
        let zero = spectral_init(&op, &CMat::zeros(op.m_p(), op.b_p()), 2).unwrap();
        assert!(zero.factors.iter().all(|s| s.norm() == 0.0));
    }

    #[test]
    fn spectral_init_correlates_with_single_device() {
        let cfg = SystemConfig::new(4, 1, 16, 16, 16, 256, 240, 1.0 / 16.0, 2, 2).noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = generate_scene(&cfg, &mut rng);
        let op = MeasurementOperator::random(&cfg, &mut rng).unwrap();
        let xs = scene.device_matrices();
        let y = op.forward(&xs).unwrap();
        let p = spectral_init(&op, &truncate_observation(&y, 1e9), 2).unwrap();
        let k = scene.support[0];
        let x0 = p.x(k);
        let corr = crate::linalg::inner(&x0, &xs[k]).norm() / (x0.norm() * xs[k].norm());
        assert!(corr > 0.9, "correlation {corr}");
    }

    #[test]
    fn steps_at_stationary_point_do_nothing() {
        let (_, op) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_point(&op, 2, &mut rng);
        let y = op.forward(&p.xs()).unwrap();
        let mut cfg = SolverConfig::new(Variant::Rg);
        cfg.nu = 0.0;
        let q = rg_step(&p, &op, &y, &cfg).unwrap();
        assert!(p.factors.iter().zip(&q.factors).all(|(a, b)| (a - b).norm() < 1e-12));
        let (q, state) = rc_step(&p, None, &op, &y, &cfg).unwrap();
        assert!(p.factors.iter().zip(&q.factors).all(|(a, b)| (a - b).norm() < 1e-12));
        assert_eq!(state.restarts, 0);
    }

    #[test]
    fn rg_step_decreases_loss() {
        let (_, op) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_point(&op, 2, &mut rng);
        let y = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
        let mut cfg = SolverConfig::new(Variant::Rg);
        cfg.step_scale = 0.1;
        let before = loss(&p, &op, &y, cfg.nu, cfg.rho).unwrap();
        let after = loss(&rg_step(&p, &op, &y, &cfg).unwrap(), &op, &y, cfg.nu, cfg.rho).unwrap();
        assert!(after < before);
    }

    #[test]
    fn rg_weight_scales_with_factor_norm() {
        let (_, op) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = random_point(&op, 2, &mut rng);
        let s = &p.factors[0];
        let c = 3.0;
        assert!((weight(&s.scale(c)).unwrap() - c * c * weight(s).unwrap()).abs() < 1e-10 * weight(s).unwrap() * c * c);
    }

    #[test]
    fn rc_first_step_is_gradient_step_and_equal_gradients_restart() {
        let (_, op) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_point(&op, 2, &mut rng);
        let y = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
        let cfg = SolverConfig::new(Variant::Rc);
        let a = rg_step(&p, &op, &y, &cfg).unwrap();
        let (b, state) = rc_step(&p, None, &op, &y, &cfg).unwrap();
        assert!(a.factors.iter().zip(&b.factors).all(|(x, z)| (x - z).norm() < 1e-14));
        // Feeding the current gradient back as the previous one zeroes o.
        let grads = euclidean_gradient(&p, &op, &y, cfg.nu, cfg.rho).unwrap();
        let same = RcState {
            dirs: state.dirs.clone(),
            grads: p
                .factors
                .iter()
                .zip(&grads)
                .map(|(s, g)| rgrad(s, g).scale(1.0 / weight(s).unwrap()))
                .collect(),
            restarts: 0,
        };
        let (c, _) = rc_update(&p, &grads, Some(&same), cfg.step_size(&op), cfg.tol);
        assert!(a
            .factors
            .iter()
            .zip(&c.factors)
            .all(|(x, z)| (x - z).norm() < 1e-10 * x.norm()));
    }

    #[test]
    fn solve_recovers_single_device_noiseless() {
        let cfg = SystemConfig::new(8, 1, 16, 16, 16, 256, 240, 1.0 / 16.0, 2, 2).noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = generate_scene(&cfg, &mut rng);
        let op = MeasurementOperator::random(&cfg, &mut rng).unwrap();
        let xs = scene.device_matrices();
        let y = op.forward(&xs).unwrap();
        let mut sc = SolverConfig::new(Variant::Rg);
        sc.nu = 0.0;
        sc.max_iter = 500;
        let out = solve(&op, &y, 2, &sc, None).unwrap();
        let num: f64 = out.xs.iter().zip(&xs).map(|(a, b)| fro2(&(a - b))).sum();
        let den: f64 = xs.iter().map(fro2).sum();
        let rel = (num / den).sqrt();
        assert!(rel < 1e-3, "relative error {rel}");
    }

    #[test]
    fn solve_zero_observation_gives_zero() {
        let (_, op) = toy();
        let y = CMat::zeros(op.m_p(), op.b_p());
        let mut sc = SolverConfig::new(Variant::Rg);
        sc.max_iter = 50;
        let out = solve(&op, &y, 2, &sc, None).unwrap();
        assert!(out.xs.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn oversized_step_is_halved_instead_of_diverging() {
        let cfg = SystemConfig::new(6, 2, 16, 16, 16, 64, 32, 0.25, 2, 2).noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = generate_scene(&cfg, &mut rng);
        let op = MeasurementOperator::random(&cfg, &mut rng).unwrap();
        let y = op.forward(&scene.device_matrices()).unwrap();
        let mut sc = SolverConfig::new(Variant::Rg);
        sc.step_scale = 1e4;
        sc.max_iter = 200;
        for variant in [Variant::Rg, Variant::Rc] {
            sc.variant = variant;
            let out = solve(&op, &y, 2, &sc, None).unwrap();
            assert!(out.step < sc.step_size(&op));
            let l = &out.trace.loss;
            assert!(l.last().unwrap() < &l[0]);
        }
    }

    #[test]
    fn rg_trace_is_nearly_monotone() {
        let cfg = SystemConfig::new(6, 2, 16, 16, 16, 64, 32, 0.25, 2, 2).noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = generate_scene(&cfg, &mut rng);
        let op = MeasurementOperator::random(&cfg, &mut rng).unwrap();
        let y = op.forward(&scene.device_matrices()).unwrap();
        let mut sc = SolverConfig::new(Variant::Rg);
        sc.step_scale = 0.2;
        sc.max_iter = 300;
        let out = solve(&op, &y, 2, &sc, None).unwrap();
        let l = &out.trace.loss;
        let ups = l.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
        assert!(ups as f64 <= 0.01 * l.len() as f64, "{ups} increases in {}", l.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prop_gauge_invariance(seed in any::<u64>()) {
            let (_, op) = toy();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_point(&op, 2, &mut rng);
            let y = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
            let qs: Vec<CMat> = (0..3).map(|_| {
                let s = sorted_svd(&random_cmat(2, 2, 1.0, &mut rng));
                &s.u * s.v.adjoint()
            }).collect();
            let rotated = FactorPoint::new(p.factors.iter().zip(&qs).map(|(s, q)| s * q).collect(), 8, 8).unwrap();
            let l0 = loss(&p, &op, &y, 0.3, 25.0).unwrap();
            let l1 = loss(&rotated, &op, &y, 0.3, 25.0).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-10 * l0.max(1.0));
            let g0 = euclidean_gradient(&p, &op, &y, 0.3, 25.0).unwrap();
            let g1 = euclidean_gradient(&rotated, &op, &y, 0.3, 25.0).unwrap();
            for n in 0..3 {
                prop_assert!((&g0[n] * &qs[n] - &g1[n]).norm() < 1e-10 * g0[n].norm().max(1.0));
                prop_assert!((p.x(n) - rotated.x(n)).norm() < 1e-10);
            }
        }

        #[test]
        fn prop_gradient_finite_differences(seed in any::<u64>(), nu in prop_oneof![Just(0.0), Just(0.3)]) {
            let (_, op) = toy();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_point(&op, 2, &mut rng);
            let y = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
            let g = euclidean_gradient(&p, &op, &y, nu, 25.0).unwrap();
            for _ in 0..5 {
                let eta: Vec<CMat> = (0..3).map(|_| random_cmat(16, 2, 1.0, &mut rng)).collect();
                let t = 1e-6;
                let shift = |sign: f64| FactorPoint::new(p.factors.iter().zip(&eta).map(|(s, e)| s + e.scale(sign * t)).collect(), 8, 8).unwrap();
                let fd = (loss(&shift(1.0), &op, &y, nu, 25.0).unwrap() - loss(&shift(-1.0), &op, &y, nu, 25.0).unwrap()) / (2.0 * t);
                let an: f64 = g.iter().zip(&eta).map(|(a, b)| real_inner(a, b)).sum();
                prop_assert!((fd - an).abs() < 1e-5 * an.abs().max(1e-3), "fd {} analytic {}", fd, an);
            }
        }
    }
}

//! Reference recovery algorithms: FISTA with a group (or entrywise) soft
//! threshold, and orthogonal matching pursuit over device blocks or single
//! state-matrix entries.

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fro2, CMat, CVec};
use crate::measurement::MeasurementOperator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineAlgorithm {
    #[serde(rename = "FISTA")]
    Fista,
    #[serde(rename = "OMP")]
    Omp,
}

/// Atom granularity of OMP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmpAtoms {
    /// Whole device blocks, least squares over the union of blocks.
    Block,
    /// Single entries of the state matrices.
    Entry,
}

fn default_lambda_rel() -> f64 {
    0.1
}
fn default_fista_iter() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-6
}
fn default_ridge_rel() -> f64 {
    0.01
}
fn default_atoms() -> OmpAtoms {
    OmpAtoms::Block
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub algorithm: BaselineAlgorithm,
    /// Absolute regularization weight; overrides `lambda_rel`.
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Weight relative to `max_n ||A_n^*(y)||` (group prox) or
    /// `max |A^*(y)|` (entrywise prox).
    #[serde(default = "default_lambda_rel")]
    pub lambda_rel: f64,
    #[serde(default = "default_fista_iter")]
    pub max_iter: usize,
    /// OMP selection budget: blocks for block atoms, entries for entry atoms.
    /// `None` means `K` blocks, or `K p^2 L_max` entries.
    #[serde(default)]
    pub sparsity_budget: Option<usize>,
    /// Relative change tolerance (FISTA) or residual tolerance (OMP).
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Entrywise l1 prox instead of the group norm.
    #[serde(default)]
    pub elementwise: bool,
    #[serde(default = "default_atoms")]
    pub omp_atoms: OmpAtoms,
    /// Ridge weight, relative to the largest block Lipschitz constant, used by
    /// block OMP once the selected union has at least as many unknowns as
    /// there are measurements.
    #[serde(default = "default_ridge_rel")]
    pub ridge_rel: f64,
}

impl BaselineConfig {
    pub fn fista() -> Self {
        BaselineConfig {
            algorithm: BaselineAlgorithm::Fista,
            lambda: None,
            lambda_rel: default_lambda_rel(),
            max_iter: default_fista_iter(),
            sparsity_budget: None,
            tol: default_tol(),
            elementwise: false,
            omp_atoms: default_atoms(),
            ridge_rel: default_ridge_rel(),
        }
    }

    pub fn omp(budget: usize) -> Self {
        BaselineConfig {
            algorithm: BaselineAlgorithm::Omp,
            sparsity_budget: Some(budget),
            ..Self::fista()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l >= 0.0) {
                return Err(Error::InvalidConfig("lambda must be non-negative".into()));
            }
        }
        if !(self.lambda_rel >= 0.0) || !(self.ridge_rel >= 0.0) {
            return Err(Error::InvalidConfig(
                "lambda_rel and ridge_rel must be non-negative".into(),
            ));
        }
        if self.max_iter == 0 || self.sparsity_budget == Some(0) {
            return Err(Error::InvalidConfig("budgets must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BaselineOutput {
    pub xs: Vec<CMat>,
    pub iterations: usize,
    /// Final objective (FISTA) or residual energy `1/2 ||r||^2` (OMP).
    pub objective: f64,
    /// Per-iteration objective (FISTA) or per-round residual norm (OMP).
    pub history: Vec<f64>,
}

fn group_prox(x: &CMat, thr: f64) -> CMat {
    let n = fro2(x).sqrt();
    if n <= thr {
        CMat::zeros(x.nrows(), x.ncols())
    } else {
        x.scale(1.0 - thr / n)
    }
}

fn entry_prox(x: &CMat, thr: f64) -> CMat {
    x.map(|z| {
        let a = z.norm();
        if a <= thr {
            Complex64::new(0.0, 0.0)
        } else {
            z * (1.0 - thr / a)
        }
    })
}

fn penalty(xs: &[CMat], elementwise: bool) -> f64 {
    if elementwise {
        xs.iter().map(|x| x.iter().map(|z| z.norm()).sum::<f64>()).sum()
    } else {
        xs.iter().map(|x| fro2(x).sqrt()).sum()
    }
}

/// Regularization weight resolved for an observation.
pub fn resolve_lambda(op: &MeasurementOperator, y: &CMat, cfg: &BaselineConfig) -> Result<f64> {
    if let Some(l) = cfg.lambda {
        return Ok(l);
    }
    let back = op.adjoint(y)?;
    let top = if cfg.elementwise {
        back.iter().flat_map(|b| b.iter().map(|z| z.norm())).fold(0.0, f64::max)
    } else {
        back.iter().map(|b| fro2(b).sqrt()).fold(0.0, f64::max)
    };
    Ok(cfg.lambda_rel * top)
}

/// Accelerated proximal gradient for
/// `1/2 ||A(X) - y||^2 + lambda sum_n ||X_n||_F`, with a function-value
/// restart that keeps the objective non-increasing.
pub fn fista_solve(op: &MeasurementOperator, y: &CMat, cfg: &BaselineConfig) -> Result<BaselineOutput> {
    cfg.validate()?;
    let lip = op.operator_norm_sq(60, 0x5eed)? * 1.01;
    let step = 1.0 / lip;
    let lambda = resolve_lambda(op, y, cfg)?;
    let objective = |xs: &[CMat]| -> Result<f64> {
        let r = op.forward(xs)? - y;
        Ok(0.5 * fro2(&r) + lambda * penalty(xs, cfg.elementwise))
    };
    let zero = || vec![CMat::zeros(op.m_1(), op.d()); op.num_devices()];
    let mut x = zero();
    let mut z = zero();
    let mut t = 1.0f64;
    let mut f_x = objective(&x)?;
    let mut history = vec![f_x];
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let r = op.forward(&z)? - y;
        let g = op.adjoint(&r)?;
        let x_new: Vec<CMat> = z
            .iter()
            .zip(&g)
            .map(|(zz, gg)| {
                let v = zz - gg.scale(step);
                if cfg.elementwise {
                    entry_prox(&v, lambda * step)
                } else {
                    group_prox(&v, lambda * step)
                }
            })
            .collect();
        let f_new = objective(&x_new)?;
        let change: f64 = x_new.iter().zip(&x).map(|(a, b)| fro2(&(a - b))).sum::<f64>().sqrt();
        let size: f64 = x.iter().map(fro2).sum::<f64>().sqrt();
        if f_new > f_x {
            // Momentum overshoot: restart from the last accepted point.
            t = 1.0;
            z = x.clone();
            history.push(f_x);
            continue;
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_new;
        z = x_new.iter().zip(&x).map(|(a, b)| a + (a - b).scale(beta)).collect();
        x = x_new;
        t = t_new;
        f_x = f_new;
        history.push(f_x);
        if change <= cfg.tol * size.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(BaselineOutput {
        xs: x,
        iterations,
        objective: f_x,
        history,
    })
}

/// CGLS on the blocks in `sel`, warm-started from `x0`. The residual norm
/// never exceeds the one at the start.
fn cgls_blocks(
    op: &MeasurementOperator,
    y: &CMat,
    sel: &[usize],
    x0: Vec<CMat>,
    damping: f64,
    max_iter: usize,
    tol: f64,
) -> (Vec<CMat>, f64) {
    let fwd = |xs: &[CMat]| -> CMat {
        let mut out = CMat::zeros(op.m_p(), op.b_p());
        for (x, &n) in xs.iter().zip(sel) {
            out += op.forward_device(n, x);
        }
        out
    };
    let adj = |v: &CMat| -> Vec<CMat> {
        let w = op.b_mat.ad_mul(v);
        sel.iter().map(|&n| &w * op.a_mats[n].adjoint()).collect()
    };
    let mut x = x0;
    let mut r = y - fwd(&x);
    let mut s: Vec<CMat> = adj(&r)
        .into_iter()
        .zip(&x)
        .map(|(a, xx)| a - xx.scale(damping))
        .collect();
    let mut p = s.clone();
    let mut gamma: f64 = s.iter().map(fro2).sum();
    let gamma0 = gamma;
    for _ in 0..max_iter {
        if gamma <= tol * tol * gamma0 || gamma == 0.0 {
            break;
        }
        let q = fwd(&p);
        let den = fro2(&q) + damping * p.iter().map(fro2).sum::<f64>();
        if den <= 0.0 {
            break;
        }
        let alpha = gamma / den;
        for (xx, pp) in x.iter_mut().zip(&p) {
            *xx += pp.scale(alpha);
        }
        r -= q.scale(alpha);
        s = adj(&r)
            .into_iter()
            .zip(&x)
            .map(|(a, xx)| a - xx.scale(damping))
            .collect();
        let gamma_new: f64 = s.iter().map(fro2).sum();
        let beta = gamma_new / gamma;
        for (pp, ss) in p.iter_mut().zip(&s) {
            *pp = ss + pp.scale(beta);
        }
        gamma = gamma_new;
    }
    let res = fro2(&r).sqrt();
    (x, res)
}

fn block_omp(op: &MeasurementOperator, y: &CMat, budget: usize, tol: f64, ridge_rel: f64) -> Result<BaselineOutput> {
    let n_dev = op.num_devices();
    let budget = budget.min(n_dev);
    let mut sel: Vec<usize> = Vec::new();
    let mut coef: Vec<CMat> = Vec::new();
    let mut r = y.clone();
    let mut history = vec![fro2(y).sqrt()];
    let y_norm = history[0];
    while sel.len() < budget && history.last().copied().unwrap_or(0.0) > tol * y_norm {
        let back = op.adjoint(&r)?;
        let pick = (0..n_dev)
            .filter(|n| !sel.contains(n))
            .map(|n| (n, fro2(&back[n])))
            .fold((usize::MAX, -1.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        if pick.0 == usize::MAX || pick.1 <= 0.0 {
            break;
        }
        sel.push(pick.0);
        let mut x0 = coef.clone();
        x0.push(CMat::zeros(op.m_1(), op.d()));
        let prev = *history.last().expect("non-empty");
        // An underdetermined union would fit the noise exactly.
        let damping = if sel.len() * op.m_1() * op.d() >= op.measurements() {
            ridge_rel * op.block_lipschitz()
        } else {
            0.0
        };
        let (mut x, mut res) = cgls_blocks(op, y, &sel, x0.clone(), damping, 400, 1e-10);
        if damping == 0.0 && (!res.is_finite() || res > prev * (1.0 + 1e-9)) {
            warn!("block least squares stalled; retrying with ridge damping");
            let damping = 1e-8 * op.block_lipschitz();
            (x, res) = cgls_blocks(op, y, &sel, x0, damping, 400, 1e-10);
        }
        coef = x;
        let mut fit = CMat::zeros(op.m_p(), op.b_p());
        for (xx, &n) in coef.iter().zip(&sel) {
            fit += op.forward_device(n, xx);
        }
        r = y - fit;
        history.push(res.min(prev));
    }
    let mut xs = vec![CMat::zeros(op.m_1(), op.d()); n_dev];
    for (x, &n) in coef.into_iter().zip(&sel) {
        xs[n] = x;
    }
    Ok(BaselineOutput {
        objective: 0.5 * fro2(&r),
        iterations: sel.len(),
        xs,
        history,
    })
}

/// Measurement-space atom of entry `(i, q)` of device `n`:
/// `vec(b_i a_q^T)` with `b_i` column `i` of `B` and `a_q` row `q` of `A_n`.
fn entry_atom(op: &MeasurementOperator, n: usize, i: usize, q: usize) -> CVec {
    let m_p = op.m_p();
    let a = &op.a_mats[n];
    CVec::from_fn(m_p * op.b_p(), |k, _| {
        let (r, c) = (k % m_p, k / m_p);
        op.b_mat[(r, i)] * a[(q, c)]
    })
}

fn entry_omp(op: &MeasurementOperator, y: &CMat, budget: usize, tol: f64) -> Result<BaselineOutput> {
    let (m_1, d, n_dev) = (op.m_1(), op.d(), op.num_devices());
    let dim = op.measurements();
    let budget = budget.min(dim).min(m_1 * d * n_dev);
    let yv = CVec::from_column_slice(y.as_slice());
    let y_norm = yv.norm();
    let mut r = yv.clone();
    // Modified Gram-Schmidt basis of the selected atoms and the triangular
    // factor of the atom matrix.
    let mut q_basis: Vec<CVec> = Vec::new();
    let mut r_fac: Vec<Vec<Complex64>> = Vec::new();
    let mut chosen: Vec<(usize, usize, usize)> = Vec::new();
    let mut taken = vec![false; m_1 * d * n_dev];
    let mut history = vec![y_norm];
    while chosen.len() < budget && r.norm() > tol * y_norm {
        let rm = CMat::from_column_slice(op.m_p(), op.b_p(), r.as_slice());
        let back = op.adjoint(&rm)?;
        let mut best = (usize::MAX, -1.0);
        for (n, b) in back.iter().enumerate() {
            for (idx, z) in b.iter().enumerate() {
                let flat = n * m_1 * d + idx;
                if !taken[flat] && z.norm_sqr() > best.1 {
                    best = (flat, z.norm_sqr());
                }
            }
        }
        if best.0 == usize::MAX || best.1 <= 0.0 {
            break;
        }
        taken[best.0] = true;
        let n = best.0 / (m_1 * d);
        let idx = best.0 % (m_1 * d);
        let (i, q) = (idx % m_1, idx / m_1);
        let atom = entry_atom(op, n, i, q);
        let mut v = atom.clone();
        let mut col = Vec::with_capacity(q_basis.len() + 1);
        for qb in &q_basis {
            let c = qb.dotc(&v);
            v -= qb * c;
            col.push(c);
        }
        // Second pass for numerical orthogonality.
        for (k, qb) in q_basis.iter().enumerate() {
            let c = qb.dotc(&v);
            v -= qb * c;
            col[k] += c;
        }
        let nv = v.norm();
        if nv <= 1e-10 * atom.norm() {
            // Dependent atom: it cannot lower the residual.
            continue;
        }
        col.push(Complex64::new(nv, 0.0));
        let qn = v.unscale(nv);
        let c = qn.dotc(&r);
        r -= &qn * c;
        q_basis.push(qn);
        r_fac.push(col);
        chosen.push((n, i, q));
        history.push(r.norm());
    }
    // Back substitution R c = Q^H y.
    let k = chosen.len();
    let rhs: Vec<Complex64> = q_basis.iter().map(|qb| qb.dotc(&yv)).collect();
    let mut c = vec![Complex64::new(0.0, 0.0); k];
    for row in (0..k).rev() {
        let mut acc = rhs[row];
        for (col, rc) in r_fac.iter().enumerate().skip(row + 1) {
            acc -= rc[row] * c[col];
        }
        c[row] = acc / r_fac[row][row];
    }
    let mut xs = vec![CMat::zeros(m_1, d); n_dev];
    for (&(n, i, q), v) in chosen.iter().zip(&c) {
        xs[n][(i, q)] = *v;
    }
    Ok(BaselineOutput {
        objective: 0.5 * r.norm_squared(),
        iterations: k,
        xs,
        history,
    })
}

/// Greedy pursuit with least-squares refits on the selected support.
///
/// `default_budget` is used when the config leaves the budget open.
pub fn omp_solve(
    op: &MeasurementOperator,
    y: &CMat,
    cfg: &BaselineConfig,
    default_budget: usize,
) -> Result<BaselineOutput> {
    cfg.validate()?;
    let budget = cfg.sparsity_budget.unwrap_or(default_budget).max(1);
    match cfg.omp_atoms {
        OmpAtoms::Block => {
            if budget > op.num_devices() {
                return Err(Error::InvalidConfig(format!(
                    "block budget {budget} exceeds N = {}",
                    op.num_devices()
                )));
            }
            block_omp(op, y, budget, cfg.tol, cfg.ridge_rel)
        }
        OmpAtoms::Entry => entry_omp(op, y, budget, cfg.tol),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{generate_scene, SystemConfig};
    use crate::linalg::{random_cmat, vec_of};
    use crate::measurement::DEFAULT_DENSE_BUDGET;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk(k: usize, b_p: usize) -> (SystemConfig, MeasurementOperator, Vec<CMat>, Vec<usize>) {
        let cfg = SystemConfig::new(8, k, 16, 16, 16, 256, b_p, 1.0 / 16.0, 2, 2).noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scene = generate_scene(&cfg, &mut rng);
        let op = MeasurementOperator::random(&cfg, &mut rng).unwrap();
        let xs = scene.device_matrices();
        (cfg, op, xs, scene.support)
    }

    #[test]
    fn fista_large_lambda_gives_zero() {
        let (_, op, xs, _) = desk(2, 64);
        let y = op.forward(&xs).unwrap();
        let mut cfg = BaselineConfig::fista();
        cfg.lambda_rel = 2.0;
        let out = fista_solve(&op, &y, &cfg).unwrap();
        assert!(out.xs.iter().all(|x| x.norm() == 0.0));
        cfg.elementwise = true;
        let out = fista_solve(&op, &y, &cfg).unwrap();
        assert!(out.xs.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn fista_zero_lambda_matches_least_squares() {
        // Overdetermined: one device, 4 x 4 grid, 96 measurements.
        let cfg = SystemConfig::new(1, 1, 4, 4, 4, 16, 12, 0.25, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut op = MeasurementOperator::random(&cfg, &mut rng).unwrap();
        let dense = op.materialize_dense(DEFAULT_DENSE_BUDGET).unwrap().clone();
        let y = random_cmat(op.m_p(), op.b_p(), 1.0, &mut rng);
        let normal = dense.ad_mul(&dense);
        let rhs = dense.ad_mul(&vec_of(&y));
        let ls = normal.cholesky().unwrap().solve(&rhs);
        let res_ls = (&dense * &ls - vec_of(&y)).norm();
        let mut bc = BaselineConfig::fista();
        bc.lambda = Some(0.0);
        bc.max_iter = 20_000;
        bc.tol = 1e-14;
        let out = fista_solve(&op, &y, &bc).unwrap();
        let res = (op.forward(&out.xs).unwrap() - &y).norm();
        assert!((res - res_ls).abs() < 1e-6 * res_ls.max(1.0), "{res} vs {res_ls}");
    }

    #[test]
    fn fista_objective_never_increases() {
        let (_, op, xs, _) = desk(2, 64);
        let y = op.forward(&xs).unwrap();
        let out = fista_solve(&op, &y, &BaselineConfig::fista()).unwrap();
        assert!(out.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }

    #[test]
    fn fista_finds_single_active_device() {
        let (_, op, xs, support) = desk(1, 240);
        let y = op.forward(&xs).unwrap();
        let out = fista_solve(&op, &y, &BaselineConfig::fista()).unwrap();
        let top = (0..8)
            .max_by(|&a, &b| fro2(&out.xs[a]).total_cmp(&fro2(&out.xs[b])))
            .unwrap();
        assert_eq!(top, support[0]);
    }

    #[test]
    fn block_omp_support_and_monotone_residual() {
        let (_, op, xs, support) = desk(1, 240);
        let y = op.forward(&xs).unwrap();
        let out = omp_solve(&op, &y, &BaselineConfig::omp(1), 1).unwrap();
        let got: Vec<usize> = (0..8).filter(|&n| out.xs[n].norm() > 0.0).collect();
        assert_eq!(got, support);
        let (_, op, xs, _) = desk(3, 96);
        let y = op.forward(&xs).unwrap();
        let full = omp_solve(&op, &y, &BaselineConfig::omp(8), 8).unwrap();
        assert!(full.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        for b in 1..8 {
            let part = omp_solve(&op, &y, &BaselineConfig::omp(b), b).unwrap();
            assert!(full.history.last().unwrap() <= &(part.history.last().unwrap() * (1.0 + 1e-9)));
        }
        assert!(omp_solve(&op, &y, &BaselineConfig::omp(9), 9).is_err());
    }

    #[test]
    fn entry_omp_recovers_sparse_block() {
        let (_, op, xs, support) = desk(1, 240);
        let y = op.forward(&xs).unwrap();
        let mut cfg = BaselineConfig::omp(16);
        cfg.omp_atoms = OmpAtoms::Entry;
        let out = omp_solve(&op, &y, &cfg, 16).unwrap();
        assert!(out.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let k = support[0];
        let rel = (&out.xs[k] - &xs[k]).norm() / xs[k].norm();
        assert!(rel < 1e-6, "relative error {rel}");
    }
}

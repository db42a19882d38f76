//! ℓ1-regularized least squares (basis pursuit denoising) by gradient
//! projection with Barzilai-Borwein steps.
//!
//! Minimizes `½‖y − A x‖² + τ‖x‖₁`. With `nonneg` the feasible set is the
//! orthant `x ≥ 0` and `‖x‖₁ = Σx`; otherwise `x = u − v` with `u, v ≥ 0`.
//! Each step is the exact minimizer of the quadratic along a feasible
//! segment, so the objective never increases.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::model::{GridSpec, JointDistribution};
use crate::sensing::LinearOperator;

/// `auto` τ as a fraction of `‖Aᵀy‖∞`.
pub const AUTO_TAU_FRACTION: f64 = 0.05;

const ALPHA_MIN: f64 = 1e-30;
const ALPHA_MAX: f64 = 1e30;
const BACKTRACK_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tau {
    Auto,
    #[serde(untagged)]
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tau: Tau,
    pub max_iters: usize,
    pub rel_obj_tol: f64,
    pub nonneg: bool,
    pub debias: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tau: Tau::Auto,
            max_iters: 2000,
            rel_obj_tol: 1e-6,
            nonneg: true,
            debias: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Tau::Value(t) = self.tau {
            if !(t > 0.0 && t.is_finite()) {
                return param(format!("tau must be positive, got {t}"));
            }
        }
        if self.max_iters == 0 {
            return param("max_iters must be at least 1");
        }
        if !(self.rel_obj_tol > 0.0) {
            return param("rel_obj_tol must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconResult {
    pub x_hat: Vec<f64>,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub tau_used: f64,
    pub converged: bool,
    /// Objective after the optional debiasing refit.
    pub final_objective: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

fn check_dims<O: LinearOperator + ?Sized>(op: &O, y: &[f64], x: Option<&[f64]>) -> Result<()> {
    if y.len() != op.rows() {
        return Err(Error::Dimension {
            expected: op.rows(),
            got: y.len(),
        });
    }
    if let Some(x) = x {
        if x.len() != op.cols() {
            return Err(Error::Dimension {
                expected: op.cols(),
                got: x.len(),
            });
        }
    }
    Ok(())
}

/// `½‖y − A x‖² + τ‖x‖₁`.
pub fn objective<O: LinearOperator + ?Sized>(op: &O, y: &[f64], x: &[f64], tau: f64) -> Result<f64> {
    check_dims(op, y, Some(x))?;
    let ax = op.forward(x)?;
    let fit: f64 = ax.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    Ok(0.5 * fit + tau * l1)
}

/// `0.05 · ‖Aᵀy‖∞`.
pub fn auto_tau<O: LinearOperator + ?Sized>(op: &O, y: &[f64]) -> Result<f64> {
    check_dims(op, y, None)?;
    if y.is_empty() || y.iter().all(|v| *v == 0.0) {
        return Err(Error::NoSignal("measurement vector is all zero".into()));
    }
    let aty = op.adjoint(y)?;
    let inf = aty.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(inf > 0.0) {
        return Err(Error::NoSignal("back-projection of y is zero".into()));
    }
    Ok(AUTO_TAU_FRACTION * inf)
}

/// Largest violation of the nonnegative ℓ1 optimality conditions:
/// `|∇f|` on positive entries, `max(0, −∇f)` on zero entries, where
/// `∇f = Aᵀ(Ax − y) + τ`.
pub fn kkt_residual<O: LinearOperator + ?Sized>(op: &O, y: &[f64], x: &[f64], tau: f64) -> Result<f64> {
    check_dims(op, y, Some(x))?;
    let ax = op.forward(x)?;
    let r: Vec<f64> = ax.iter().zip(y).map(|(a, b)| a - b).collect();
    let g = op.adjoint(&r)?;
    Ok(x.iter().zip(&g).fold(0.0f64, |worst, (&xi, &gi)| {
        let v = if xi > 0.0 { (gi + tau).abs() } else { (-(gi + tau)).max(0.0) };
        worst.max(v)
    }))
}

/// Split iterate `z = [u; v] ≥ 0` with `x = u − v`; `v` is absent when
/// nonnegative, so `‖x‖₁ = Σz` on the iterates the solver produces.
struct Split {
    cols: usize,
    signed: bool,
}

impl Split {
    fn x(&self, z: &[f64]) -> Vec<f64> {
        if self.signed {
            z[..self.cols].iter().zip(&z[self.cols..]).map(|(a, b)| a - b).collect()
        } else {
            z.to_vec()
        }
    }

    fn gradient(&self, atr: &[f64], tau: f64) -> Vec<f64> {
        let mut g: Vec<f64> = atr.iter().map(|v| v + tau).collect();
        if self.signed {
            g.extend(atr.iter().map(|v| -v + tau));
        }
        g
    }
}

/// KKT violation of `z ≥ 0` against the split gradient `g`.
fn split_kkt(z: &[f64], g: &[f64]) -> f64 {
    z.iter().zip(g).fold(0.0f64, |worst, (&zi, &gi)| {
        worst.max(if zi > 0.0 { gi.abs() } else { (-gi).max(0.0) })
    })
}

/// Euclidean projection onto `{z ≥ 0, Σz = mass}`.
fn project_simplex(v: &[f64], mass: f64) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - mass) / (k + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Solve the BPDN problem for counts `y`.
///
/// Rows of 0/1 patterns share a large common mean, which puts one dominant
/// eigenvalue in `AᵀA` along the total mass `Σz`. Each iteration therefore
/// splits into a BB gradient-projection step on the face `Σz = const`
/// (where the ℓ1 term is constant and the dominant eigenvalue is absent)
/// and an exact rescaling of the mass. Both are exact minimizations over a
/// feasible segment, so the objective never increases; jointly their fixed
/// points are the optimality conditions of the full problem.
pub fn solve_bpdn<O: LinearOperator + ?Sized>(op: &O, y: &[f64], config: &SolverConfig) -> Result<ReconResult> {
    config.validate()?;
    check_dims(op, y, None)?;
    if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
        return param(format!("measurement contains non-finite value {bad}"));
    }
    let cols = op.cols();
    let split = Split {
        cols,
        signed: !config.nonneg,
    };

    if y.iter().all(|v| *v == 0.0) {
        // x = 0 is optimal for every τ > 0
        let tau = match config.tau {
            Tau::Value(t) => t,
            Tau::Auto => 0.0,
        };
        return Ok(ReconResult {
            x_hat: vec![0.0; cols],
            objective_history: vec![0.0],
            iterations: 0,
            tau_used: tau,
            converged: true,
            final_objective: 0.0,
        });
    }

    let tau = match config.tau {
        Tau::Value(t) => t,
        Tau::Auto => auto_tau(op, y)?,
    };

    let dim = if split.signed { 2 * cols } else { cols };
    let mut z = vec![0.0; dim];
    let mut ax = vec![0.0; y.len()];
    let mut f = 0.5 * norm_sq(y);
    let mut history = vec![f];
    let mut alpha: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut stalled = false;
    let mut at_floor = false;
    let mut kkt_bound = 0.0;

    let eval = |z: &[f64], ax: &[f64]| -> f64 {
        let fit: f64 = ax.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * fit + tau * z.iter().sum::<f64>()
    };

    for _ in 0..config.max_iters {
        iterations += 1;
        let r: Vec<f64> = ax.iter().zip(y).map(|(a, b)| a - b).collect();
        let atr = op.adjoint(&r)?;
        if iterations == 1 {
            // z = 0 here, so Aᵀr = −Aᵀy
            kkt_bound = 10.0 * config.rel_obj_tol * atr.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        }
        let g = split.gradient(&atr, tau);
        if stalled && split_kkt(&z, &g) <= kkt_bound {
            converged = true;
            break;
        }
        if at_floor {
            log::debug!("objective reached rounding floor before the KKT certificate");
            break;
        }
        let mass: f64 = z.iter().sum();

        // From zero mass, step into the orthant; otherwise stay on the face.
        let on_face = mass > 0.0;
        let target = |alpha: f64| -> Vec<f64> {
            let moved: Vec<f64> = z.iter().zip(&g).map(|(zi, gi)| zi - alpha * gi).collect();
            if on_face {
                project_simplex(&moved, mass)
            } else {
                moved.into_iter().map(|v| v.max(0.0)).collect()
            }
        };
        let a = match alpha {
            Some(a) if on_face => a,
            _ => {
                // Cauchy step along the projected negative gradient
                let d: Vec<f64> = target(1.0).iter().zip(&z).map(|(t, zi)| t - zi).collect();
                let ad = op.forward(&split.x(&d))?;
                let den = norm_sq(&ad);
                if den > 0.0 {
                    (norm_sq(&d) / den).clamp(ALPHA_MIN, ALPHA_MAX)
                } else {
                    1.0
                }
            }
        };
        let d: Vec<f64> = target(a).iter().zip(&z).map(|(t, zi)| t - zi).collect();
        let gd = dot(&g, &d);

        let mut moved = false;
        if gd < 0.0 {
            let ad = op.forward(&split.x(&d))?;
            let dad = norm_sq(&ad);
            let mut lambda = if dad > 0.0 { (-gd / dad).clamp(0.0, 1.0) } else { 1.0 };
            while lambda >= BACKTRACK_FLOOR {
                let nz: Vec<f64> = z.iter().zip(&d).map(|(a, b)| (a + lambda * b).max(0.0)).collect();
                let nax: Vec<f64> = ax.iter().zip(&ad).map(|(a, b)| a + lambda * b).collect();
                let f_new = eval(&nz, &nax);
                if f_new <= f {
                    let s_sq = lambda * lambda * norm_sq(&d);
                    let as_sq = lambda * lambda * dad;
                    alpha = Some(if as_sq > 0.0 { (s_sq / as_sq).clamp(ALPHA_MIN, ALPHA_MAX) } else { ALPHA_MAX });
                    z = nz;
                    ax = nax;
                    f = f_new;
                    moved = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !moved {
                log::debug!("backtracking floor reached at iteration {iterations}");
            }
        }

        // exact rescaling c·z, c ≥ 0
        let l1: f64 = z.iter().sum();
        let axx = norm_sq(&ax);
        let mut rescaled = false;
        if axx > 0.0 {
            let c = ((dot(y, &ax) - tau * l1) / axx).max(0.0);
            let nz: Vec<f64> = z.iter().map(|v| c * v).collect();
            let nax: Vec<f64> = ax.iter().map(|v| c * v).collect();
            let f_new = eval(&nz, &nax);
            if f_new < f {
                z = nz;
                ax = nax;
                f = f_new;
                rescaled = true;
            }
        }

        let prev = *history.last().expect("history starts non-empty");
        if !moved && !rescaled {
            converged = gd >= 0.0;
            break;
        }
        history.push(f);
        let rel = (prev - f).abs() / prev.abs().max(f64::MIN_POSITIVE);
        // a small objective change alone can hide slow progress; the next
        // gradient must also certify optimality
        stalled = rel < config.rel_obj_tol;
        at_floor = prev == f;
    }

    let mut x_hat = split.x(&z);
    if config.debias {
        debias(op, y, &mut x_hat)?;
        if config.nonneg {
            for v in x_hat.iter_mut() {
                *v = v.max(0.0);
            }
        }
    }
    let final_objective = if config.debias { objective(op, y, &x_hat, tau)? } else { f };

    Ok(ReconResult {
        x_hat,
        objective_history: history,
        iterations,
        tau_used: tau,
        converged,
        final_objective,
    })
}

const DEBIAS_MAX_ITERS: usize = 200;
const DEBIAS_TOL: f64 = 1e-10;

/// Conjugate-gradient least-squares refit of `x` on its nonzero support.
pub fn debias<O: LinearOperator + ?Sized>(op: &O, y: &[f64], x: &mut [f64]) -> Result<usize> {
    check_dims(op, y, Some(x))?;
    let support: Vec<bool> = x.iter().map(|v| *v != 0.0).collect();
    if !support.iter().any(|s| *s) {
        return Ok(0);
    }
    let restrict = |g: &mut Vec<f64>| {
        for (gi, s) in g.iter_mut().zip(&support) {
            if !s {
                *gi = 0.0;
            }
        }
    };
    let ax = op.forward(x)?;
    let mut r: Vec<f64> = y.iter().zip(&ax).map(|(a, b)| a - b).collect();
    let mut s = op.adjoint(&r)?;
    restrict(&mut s);
    let mut p = s.clone();
    let mut gamma = norm_sq(&s);
    let gamma0 = gamma;
    let mut iters = 0;
    while iters < DEBIAS_MAX_ITERS && gamma > DEBIAS_TOL * DEBIAS_TOL * gamma0 && gamma > 0.0 {
        iters += 1;
        let q = op.forward(&p)?;
        let qq = norm_sq(&q);
        if qq == 0.0 {
            break;
        }
        let step = gamma / qq;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += step * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= step * qi;
        }
        s = op.adjoint(&r)?;
        restrict(&mut s);
        let gamma_new = norm_sq(&s);
        let beta = gamma_new / gamma;
        for (pi, si) in p.iter_mut().zip(&s) {
            *pi = si + beta * *pi;
        }
        gamma = gamma_new;
    }
    Ok(iters)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    UnitSum,
    /// Divide by the photon budget, then rescale to unit sum.
    PerFlux(f64),
}

/// Clip negatives, apply the flux scaling and rescale to unit sum.
pub fn normalize_weights(x_hat: &[f64], mode: NormalizeMode) -> Result<Vec<f64>> {
    let mut x: Vec<f64> = x_hat.iter().map(|v| v.max(0.0)).collect();
    if let NormalizeMode::PerFlux(flux) = mode {
        if !(flux > 0.0) {
            return param(format!("flux must be positive, got {flux}"));
        }
        for v in x.iter_mut() {
            *v /= flux;
        }
    }
    let total: f64 = x.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NoSignal("reconstruction has no positive entries".into()));
    }
    for v in x.iter_mut() {
        *v /= total;
    }
    Ok(x)
}

/// [`normalize_weights`] into a [`JointDistribution`] on the given grids.
pub fn normalize(
    x_hat: &[f64],
    mode: NormalizeMode,
    grid_signal: GridSpec,
    grid_idler: GridSpec,
) -> Result<JointDistribution> {
    let x = normalize_weights(x_hat, mode)?;
    JointDistribution::from_vec(grid_signal, grid_idler, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Basis;
    use crate::sensing::{generate_patterns, SensingOperator};

    fn grid(side: usize) -> GridSpec {
        GridSpec::new(side, 1.0, Basis::Position).unwrap()
    }

    #[test]
    fn objective_trivial_cases() {
        let op = SensingOperator::new(generate_patterns(1, 6, 4).unwrap());
        let y = [1.0, 2.0, 0.0, 3.0, 1.0, 1.0];
        let zero = vec![0.0; 16];
        assert_eq!(objective(&op, &y, &zero, 0.7).unwrap(), 0.5 * 16.0);
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let ax = op.forward_apply(&x).unwrap();
        assert!(objective(&op, &ax, &x, 0.0).unwrap().abs() < 1e-24);
        assert!(objective(&op, &y[..5], &x, 0.0).is_err());
    }

    #[test]
    fn zero_measurements_give_zero() {
        let op = SensingOperator::new(generate_patterns(2, 10, 4).unwrap());
        let r = solve_bpdn(&op, &[0.0; 10], &SolverConfig::default()).unwrap();
        assert!(r.x_hat.iter().all(|v| *v == 0.0));
        assert!(r.converged);
    }

    #[test]
    fn rejects_non_finite_measurements() {
        let op = SensingOperator::new(generate_patterns(2, 3, 2).unwrap());
        assert!(solve_bpdn(&op, &[1.0, f64::NAN, 0.0], &SolverConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SolverConfig::default();
        c.tau = Tau::Value(0.0);
        assert!(c.validate().is_err());
        c = SolverConfig {
            max_iters: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = SolverConfig {
            rel_obj_tol: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn tau_serde_forms() {
        assert_eq!(serde_json::to_string(&Tau::Auto).unwrap(), "\"auto\"");
        assert_eq!(serde_json::to_string(&Tau::Value(0.5)).unwrap(), "0.5");
        assert_eq!(serde_json::from_str::<Tau>("\"auto\"").unwrap(), Tau::Auto);
        assert_eq!(serde_json::from_str::<Tau>("2.5").unwrap(), Tau::Value(2.5));
    }

    #[test]
    fn auto_tau_single_photon_and_homogeneity() {
        let op = SensingOperator::new(generate_patterns(4, 20, 9).unwrap());
        let mut y = vec![0.0; 20];
        assert!(auto_tau(&op, &y).is_err());
        // pick a row with at least one active pixel pair
        let i = (0..20).find(|&i| op.explicit_row(i).unwrap().contains(&1)).unwrap();
        y[i] = 1.0;
        let t = auto_tau(&op, &y).unwrap();
        assert!(t > 0.0 && t.is_finite());
        let y2: Vec<f64> = (0..20).map(|k| (k % 5) as f64).collect();
        let y3: Vec<f64> = y2.iter().map(|v| 3.5 * v).collect();
        let (t2, t3) = (auto_tau(&op, &y2).unwrap(), auto_tau(&op, &y3).unwrap());
        assert!((t3 - 3.5 * t2).abs() < 1e-12 * t3);
    }

    #[test]
    fn signed_mode_recovers_mixed_signs() {
        let op = SensingOperator::new(generate_patterns(6, 160, 8).unwrap());
        let mut xs = vec![0.0; 64];
        xs[3] = 2.0;
        xs[40] = -1.5;
        xs[17] = 1.0;
        let y = op.forward_apply(&xs).unwrap();
        let cfg = SolverConfig {
            tau: Tau::Value(1e-3),
            nonneg: false,
            max_iters: 20_000,
            rel_obj_tol: 1e-14,
            ..Default::default()
        };
        let r = solve_bpdn(&op, &y, &cfg).unwrap();
        for (a, b) in r.x_hat.iter().zip(&xs) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
        for w in r.objective_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_weights(&[2.0, 2.0], NormalizeMode::UnitSum).unwrap(), vec![0.5, 0.5]);
        assert_eq!(normalize_weights(&[3.0, -1.0], NormalizeMode::UnitSum).unwrap(), vec![1.0, 0.0]);
        assert_eq!(
            normalize_weights(&[10.0, 30.0], NormalizeMode::PerFlux(5.0)).unwrap(),
            vec![0.25, 0.75]
        );
        assert!(normalize_weights(&[0.0, 0.0], NormalizeMode::UnitSum).is_err());
        assert!(normalize_weights(&[-1.0], NormalizeMode::UnitSum).is_err());
        assert!(normalize_weights(&[1.0], NormalizeMode::PerFlux(0.0)).is_err());
        let g = grid(1);
        let j = normalize(&[2.0], NormalizeMode::UnitSum, g, g).unwrap();
        assert_eq!(j.matrix()[[0, 0]], 1.0);
        assert!(normalize(&[1.0, 1.0], NormalizeMode::UnitSum, g, g).is_err());
    }
}

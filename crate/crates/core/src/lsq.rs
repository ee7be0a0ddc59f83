//! Damped (Levenberg–Marquardt) nonlinear least squares.
//!
//! The caller supplies weighted residuals r_i = (model_i − data_i)/σ_i as a
//! function of the parameters. Positive parameters can be fitted on a log
//! scale; the reported covariance is always for the parameters themselves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// How a parameter is represented inside the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    /// Optimized as ln x; keeps x > 0.
    Log,
}

impl Scale {
    fn to_internal(self, x: f64) -> f64 {
        match self {
            Scale::Linear => x,
            Scale::Log => x.ln(),
        }
    }

    fn to_external(self, u: f64) -> f64 {
        match self {
            Scale::Linear => u,
            Scale::Log => u.exp(),
        }
    }

    /// dx/du at the internal value u.
    fn derivative(self, u: f64) -> f64 {
        match self {
            Scale::Linear => 1.0,
            Scale::Log => u.exp(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LsqOptions {
    pub max_iterations: usize,
    /// Converged when every relative parameter step falls below this.
    pub step_tol: f64,
    /// Converged when an accepted step changes the cost by less than this, relatively.
    pub cost_tol: f64,
    /// Relative finite-difference step for the Jacobian (central differences).
    pub diff_step: f64,
    pub initial_damping: f64,
}

impl Default for LsqOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            step_tol: 1e-8,
            cost_tol: 1e-10,
            diff_step: 1e-6,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LsqSolution {
    pub params: Vec<f64>,
    /// Σ r_i² at the solution.
    pub cost: f64,
    /// (JᵀJ)⁻¹ for the external parameters, not rescaled by the fit
    /// quality; the error says why it could not be formed.
    pub covariance: std::result::Result<DMatrix<f64>, String>,
    pub n_residuals: usize,
    pub iterations: usize,
}

impl LsqSolution {
    /// cost/(N − p), or 0 with no degrees of freedom left.
    pub fn reduced_chi_squared(&self) -> f64 {
        let dof = self.n_residuals.saturating_sub(self.params.len());
        if dof == 0 {
            0.0
        } else {
            self.cost / dof as f64
        }
    }

    /// Covariance scaled by max(1, χ²_ν), so that a model that underfits
    /// does not report optimistic errors.
    pub fn scaled_covariance(&self) -> Result<DMatrix<f64>> {
        match &self.covariance {
            Ok(c) => Ok(c * self.reduced_chi_squared().max(1.0)),
            Err(why) => Err(Error::RankDeficient(why.clone())),
        }
    }

    /// Square roots of the diagonal of [`Self::scaled_covariance`].
    pub fn scaled_errors(&self) -> Result<Vec<f64>> {
        let c = self.scaled_covariance()?;
        Ok((0..self.params.len())
            .map(|i| c[(i, i)].max(0.0).sqrt())
            .collect())
    }
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn jacobian<F>(f: &F, u: &[f64], scales: &[Scale], r0: &[f64], h_rel: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let m = r0.len();
    let mut jac = DMatrix::zeros(m, u.len());
    let mut probe = u.to_vec();
    for j in 0..u.len() {
        let h = h_rel * u[j].abs().max(1.0);
        let mut eval = |shift: f64| -> Result<Option<Vec<f64>>> {
            probe[j] = u[j] + shift;
            let ext: Vec<f64> = probe
                .iter()
                .zip(scales)
                .map(|(v, s)| s.to_external(*v))
                .collect();
            probe[j] = u[j];
            match f(&ext) {
                Ok(r) if r.len() != m => Err(Error::InvalidData(
                    "residual count changed between evaluations".into(),
                )),
                Ok(r) if r.iter().all(|v| v.is_finite()) => Ok(Some(r)),
                Ok(_) => Ok(None),
                Err(e) if e.is_numerical() => Ok(None),
                Err(e) => Err(e),
            }
        };
        // Central differences, one-sided next to a region the model rejects.
        let (plus, minus, span) = match (eval(h)?, eval(-h)?) {
            (Some(p), Some(q)) => (p, q, 2.0 * h),
            (Some(p), None) => (p, r0.to_vec(), h),
            (None, Some(q)) => (r0.to_vec(), q, h),
            (None, None) => {
                return Err(Error::Unidentifiable(format!(
                    "model undefined around parameter {j}"
                )))
            }
        };
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / span;
        }
    }
    Ok(jac)
}

/// Minimizes Σ r_i(x)² from `x0`.
///
/// `scales` gives the representation of each parameter (`x0` entries on a
/// log scale must be positive). Errors with [`Error::NoConvergence`] after
/// `max_iterations`. A singular JᵀJ at the solution is not an error here;
/// it surfaces when the covariance is requested.
pub fn levenberg_marquardt<F>(
    f: F,
    x0: &[f64],
    scales: &[Scale],
    opts: LsqOptions,
) -> Result<LsqSolution>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = x0.len();
    if scales.len() != p {
        return Err(Error::param("scales", "one scale per parameter"));
    }
    for (x, s) in x0.iter().zip(scales) {
        if !x.is_finite() || (*s == Scale::Log && *x <= 0.0) {
            return Err(Error::param("x0", format!("invalid starting value {x}")));
        }
    }
    let mut u: Vec<f64> = x0
        .iter()
        .zip(scales)
        .map(|(x, s)| s.to_internal(*x))
        .collect();
    let external = |u: &[f64]| -> Vec<f64> {
        u.iter()
            .zip(scales)
            .map(|(v, s)| s.to_external(*v))
            .collect()
    };

    let mut r = f(&external(&u))?;
    let m = r.len();
    if m < p {
        return Err(Error::InsufficientData {
            needed: p,
            available: m,
        });
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(
            "residuals not finite at the starting point".into(),
        ));
    }
    let mut cost = cost_of(&r);
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let jac = jacobian(&f, &u, scales, &r, opts.diff_step)?;
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let diag_floor = a.diagonal().max() * 1e-12 + 1e-300;

        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = a.clone();
            for i in 0..p {
                damped[(i, i)] += lambda * a[(i, i)].max(diag_floor);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let r_trial = match f(&external(&trial)) {
                Ok(v) if v.iter().all(|x| x.is_finite()) => v,
                Ok(_) => {
                    lambda *= 4.0;
                    continue;
                }
                Err(e) if e.is_numerical() => {
                    lambda *= 4.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let c_trial = cost_of(&r_trial);
            if c_trial <= cost {
                let rel_step = step
                    .iter()
                    .zip(&u)
                    .map(|(d, x)| d.abs() / x.abs().max(1e-12))
                    .fold(0.0, f64::max);
                let rel_cost = (cost - c_trial) / cost.max(1e-300);
                u = trial;
                r = r_trial;
                cost = c_trial;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_step < opts.step_tol || rel_cost < opts.cost_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // No descent direction left at any damping: a stationary point.
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations, cost });
    }

    let jac_u = jacobian(&f, &u, scales, &r, opts.diff_step)?;
    let mut jac_x = jac_u;
    for (j, s) in scales.iter().enumerate() {
        let d = s.derivative(u[j]);
        jac_x.column_mut(j).scale_mut(1.0 / d);
    }
    let covariance = invert_normal(&jac_x);
    Ok(LsqSolution {
        params: external(&u),
        cost,
        covariance,
        n_residuals: m,
        iterations,
    })
}

/// (JᵀJ)⁻¹ through the SVD of J, rejecting numerically singular problems.
fn invert_normal(jac: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, String> {
    let p = jac.ncols();
    // Column equilibration keeps the conditioning test meaningful across units.
    let norms: Vec<f64> = (0..p).map(|j| jac.column(j).norm()).collect();
    if let Some(j) = norms.iter().position(|n| *n == 0.0 || !n.is_finite()) {
        return Err(format!("parameter {j} does not affect the residuals"));
    }
    let mut scaled = jac.clone();
    for (j, norm) in norms.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / norm);
    }
    let svd = scaled.svd(false, true);
    let sv = &svd.singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    if smin <= 1e-10 * smax {
        return Err(format!("condition number {:.3e}", smax / smin.max(1e-300)));
    }
    let v_t = svd.v_t.expect("requested V");
    let mut inv = DMatrix::zeros(p, p);
    for k in 0..p {
        let w = 1.0 / (sv[k] * sv[k]);
        for i in 0..p {
            for j in 0..p {
                inv[(i, j)] += v_t[(k, i)] * v_t[(k, j)] * w;
            }
        }
    }
    for i in 0..p {
        for j in 0..p {
            inv[(i, j)] /= norms[i] * norms[j];
        }
    }
    Ok(inv)
}

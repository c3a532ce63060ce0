use nalgebra::DMatrix;

use crate::data::{MetricHyperParams, MetricMatrix};
use crate::error::{Result, TeamError};

use super::constraints::{symmetrize, ScatterPair};
use super::loss::{eam_objective_raw, gradient_with, system_matrix_with};

/// Output of [`closed_form_metric`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    pub metric: MetricMatrix,
    /// Diagonal shift added to the system matrix when its smallest
    /// eigenvalue fell below `pd_floor`.
    pub repair_shift: Option<f64>,
}

impl ClosedForm {
    pub fn repaired(&self) -> bool {
        self.repair_shift.is_some()
    }
}

/// `M = Y^-1 + alpha * cov` with `Y = M0^-1 + gamma M~ - gamma lambda C~`.
///
/// If `Y` has an eigenvalue below `hp.pd_floor` it is shifted by
/// `(pd_floor - min_eig) I` first; the shift is reported in the result.
pub fn closed_form_metric(sp: &ScatterPair, cov: &DMatrix<f64>, hp: &MetricHyperParams) -> Result<ClosedForm> {
    hp.validate()?;
    let d = sp.dim();
    if cov.nrows() != d || cov.ncols() != d {
        return Err(TeamError::Parameter(format!(
            "covariance is {}x{}, expected {d}x{d}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let prior_inv = hp.prior.inverse(d)?;
    let mut y = system_matrix_with(sp, hp, &prior_inv);

    // Cholesky of Y - floor*I succeeds exactly when min_eig(Y) > floor.
    let floor_shift = DMatrix::identity(d, d) * hp.pd_floor;
    let mut repair_shift = None;
    if (&y - &floor_shift).cholesky().is_none() {
        let min_eig = y.clone().symmetric_eigenvalues().min();
        if min_eig < hp.pd_floor {
            let shift = hp.pd_floor - min_eig;
            y += DMatrix::identity(d, d) * shift;
            repair_shift = Some(shift);
        }
    }

    let inv = y
        .cholesky()
        .ok_or_else(|| TeamError::Consistency("system matrix not PD after repair".into()))?
        .inverse();
    let m = symmetrize(inv + cov * hp.alpha);
    Ok(ClosedForm {
        metric: MetricMatrix::new(m)?,
        repair_shift,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub metric: MetricMatrix,
    pub objective: f64,
    /// Frobenius norm of the gradient at the returned iterate.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Gradient norm at which the oracle stops.
pub const ORACLE_GRAD_TOL: f64 = 1e-10;

/// Projected gradient descent on `tr(M Y) - log det M` over the SPD cone,
/// starting from the prior. After each step the iterate is projected by
/// clamping its eigenvalues to at least `pd_floor`. Step sizes start at
/// `step_size` and adapt by backtracking on the projected sufficient-decrease
/// condition. `alpha` is ignored: this solves the covariance-free problem.
pub fn oracle_solve(sp: &ScatterPair, hp: &MetricHyperParams, steps: usize, step_size: f64) -> Result<OracleResult> {
    hp.validate()?;
    if !(step_size > 0.0) {
        return Err(TeamError::Parameter("step_size must be positive".into()));
    }
    let d = sp.dim();
    let prior_inv = hp.prior.inverse(d)?;
    let y = system_matrix_with(sp, hp, &prior_inv);
    let objective = |m: &DMatrix<f64>| eam_objective_raw(m, sp, hp, &prior_inv);

    let mut m = project_spd(hp.prior.matrix(d)?, hp.pd_floor);
    let mut f = objective(&m)?;
    let mut grad = gradient_with(&m, &y)?;
    let mut step = step_size;
    let mut iterations = 0;
    let mut converged = grad.norm() < ORACLE_GRAD_TOL;

    while !converged && iterations < steps {
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = project_spd(&m - &grad * step, hp.pd_floor);
            let delta = &candidate - &m;
            let bound = f + grad.dot(&delta) + delta.norm_squared() / (2.0 * step);
            match objective(&candidate) {
                Ok(fc) if fc <= bound + 1e-15 * f.abs().max(1.0) => {
                    m = candidate;
                    f = fc;
                    accepted = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            break;
        }
        grad = gradient_with(&m, &y)?;
        converged = grad.norm() < ORACLE_GRAD_TOL;
        step *= 1.5;
    }

    Ok(OracleResult {
        objective: f,
        grad_norm: grad.norm(),
        metric: MetricMatrix::new(m)?,
        iterations,
        converged,
    })
}

/// Nearest symmetric matrix with eigenvalues at least `floor`.
pub(crate) fn project_spd(m: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let clamped = eig.eigenvalues.map(|v| v.max(floor));
    let v = &eig.eigenvectors;
    symmetrize(v * DMatrix::from_diagonal(&clamped) * v.transpose())
}

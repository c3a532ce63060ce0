use nalgebra::{DMatrix, DVector};

use crate::data::{MetricHyperParams, MetricMatrix, Prior};
use crate::error::{Result, TeamError};

use super::constraints::ScatterPair;

/// Quadratic forms more negative than this are treated as a bug rather than
/// rounding noise.
const NEGATIVE_FORM_TOLERANCE: f64 = 1e-9;

/// Mahalanobis distance `sqrt((x - y)^T M (x - y))`.
pub fn metric_distance(m: &MetricMatrix, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let d = m.dim();
    if x.len() != d || y.len() != d {
        return Err(TeamError::Parameter(format!(
            "dimension mismatch: metric {d}, points {} and {}",
            x.len(),
            y.len()
        )));
    }
    let v = x - y;
    let q = quad_form(m.as_matrix(), &v);
    if q < -NEGATIVE_FORM_TOLERANCE {
        return Err(TeamError::Consistency(format!("negative quadratic form {q}")));
    }
    Ok(q.max(0.0).sqrt())
}

pub(crate) fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// tr(A B).
pub(crate) fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(&b.transpose())
}

/// log det of a symmetric matrix via Cholesky; fails when not PD.
pub(crate) fn log_det(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| TeamError::Domain("log det undefined: matrix is not positive definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn check_dims(m: &DMatrix<f64>, sp: &ScatterPair) -> Result<()> {
    if m.nrows() != sp.dim() {
        return Err(TeamError::Parameter(format!(
            "metric dimension {} does not match scatter dimension {}",
            m.nrows(),
            sp.dim()
        )));
    }
    Ok(())
}

/// Pair-constrained loss `tr(M M~) - lambda * tr(M C~)`.
pub fn pair_loss(m: &MetricMatrix, sp: &ScatterPair, lambda: f64) -> Result<f64> {
    pair_loss_raw(m.as_matrix(), sp, lambda)
}

fn pair_loss_raw(m: &DMatrix<f64>, sp: &ScatterPair, lambda: f64) -> Result<f64> {
    check_dims(m, sp)?;
    Ok(trace_product(m, &sp.m_tilde) - lambda * trace_product(m, &sp.c_tilde))
}

/// Log-det regulariser `tr(M0^-1 M) - log det M` (the M0-only constant omitted).
pub fn reg_loss(m: &MetricMatrix, prior: &Prior) -> Result<f64> {
    reg_loss_raw(m.as_matrix(), &prior.inverse(m.dim())?)
}

fn reg_loss_raw(m: &DMatrix<f64>, prior_inv: &DMatrix<f64>) -> Result<f64> {
    Ok(trace_product(prior_inv, m) - log_det(m)?)
}

/// The adaptive-metric objective composed as `reg_loss + gamma * pair_loss`.
pub fn eam_objective(m: &MetricMatrix, sp: &ScatterPair, hp: &MetricHyperParams) -> Result<f64> {
    let prior_inv = hp.prior.inverse(m.dim())?;
    eam_objective_raw(m.as_matrix(), sp, hp, &prior_inv)
}

pub(crate) fn eam_objective_raw(
    m: &DMatrix<f64>,
    sp: &ScatterPair,
    hp: &MetricHyperParams,
    prior_inv: &DMatrix<f64>,
) -> Result<f64> {
    Ok(reg_loss_raw(m, prior_inv)? + hp.gamma * pair_loss_raw(m, sp, hp.lambda)?)
}

/// `Y = M0^-1 + gamma * M~ - gamma * lambda * C~`, without any repair.
pub fn system_matrix(sp: &ScatterPair, hp: &MetricHyperParams) -> Result<DMatrix<f64>> {
    let prior_inv = hp.prior.inverse(sp.dim())?;
    Ok(system_matrix_with(sp, hp, &prior_inv))
}

pub(crate) fn system_matrix_with(sp: &ScatterPair, hp: &MetricHyperParams, prior_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let y = prior_inv + &sp.m_tilde * hp.gamma - &sp.c_tilde * (hp.gamma * hp.lambda);
    super::constraints::symmetrize(y)
}

/// The same objective written as `tr(M Y) - log det M`.
pub fn eam_objective_reformulated(m: &MetricMatrix, sp: &ScatterPair, hp: &MetricHyperParams) -> Result<f64> {
    check_dims(m.as_matrix(), sp)?;
    let y = system_matrix(sp, hp)?;
    Ok(trace_product(m.as_matrix(), &y) - log_det(m.as_matrix())?)
}

/// Gradient of the objective with respect to M: `Y - M^-1`.
pub fn objective_gradient(m: &MetricMatrix, sp: &ScatterPair, hp: &MetricHyperParams) -> Result<DMatrix<f64>> {
    check_dims(m.as_matrix(), sp)?;
    let y = system_matrix(sp, hp)?;
    gradient_with(m.as_matrix(), &y)
}

pub(crate) fn gradient_with(m: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = m
        .clone()
        .cholesky()
        .ok_or_else(|| TeamError::Domain("gradient undefined: metric is not positive definite".into()))?
        .inverse();
    Ok(super::constraints::symmetrize(y - inv))
}

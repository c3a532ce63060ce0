//! The episodic-wise adaptive metric.
//!
//! For one episode we collect must-link pairs (same-class support pairs,
//! support points with their prototype, and support points with their nearest
//! transductive neighbours) and cannot-link pairs (distinct prototypes, and
//! prototypes against a bank of seen-class means), average their difference
//! outer products into `M~` and `C~`, and solve
//!
//! ```text
//! min_M  tr(M0^-1 M) - log det M + gamma * (tr(M M~) - lambda * tr(M C~))
//! ```
//!
//! in closed form as `M = (M0^-1 + gamma M~ - gamma lambda C~)^-1`, finally
//! adding `alpha` times the covariance of every point in the episode. A
//! projected-gradient solver for the same objective is kept as an oracle.

mod constraints;
mod factor;
mod loss;
mod solve;

pub use constraints::{build_constraints, compute_prototypes, scatter_matrices, task_covariance, ConstraintSets, ScatterPair};
pub use factor::{factor_metric, sparsity_report, Sparsity, SparsityReport};
pub use loss::{
    eam_objective, eam_objective_reformulated, metric_distance, objective_gradient, pair_loss, reg_loss, system_matrix,
};
pub use solve::{closed_form_metric, oracle_solve, ClosedForm, OracleResult, ORACLE_GRAD_TOL};

use nalgebra::DVector;

use crate::data::{Episode, MetricHyperParams, PrototypeBank};
use crate::error::Result;

/// Intermediate products of one metric construction, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct AdaptedMetric {
    pub prototypes: Vec<DVector<f64>>,
    pub scatter: ScatterPair,
    pub closed_form: ClosedForm,
}

/// Full transductive pipeline for one episode: prototypes, constraints,
/// scatter matrices, task covariance and the closed-form metric.
pub fn adapt_metric(episode: &Episode, bank: &PrototypeBank, hp: &MetricHyperParams) -> Result<AdaptedMetric> {
    let prototypes = compute_prototypes(episode);
    let cs = build_constraints(episode, &prototypes, bank, hp.knn_k, true)?;
    let scatter = scatter_matrices(&cs)?;
    let cov = task_covariance(episode)?;
    let closed_form = closed_form_metric(&scatter, &cov, hp)?;
    Ok(AdaptedMetric {
        prototypes,
        scatter,
        closed_form,
    })
}

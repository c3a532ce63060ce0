//! Transductive query classification against class prototypes.
//!
//! The positive direction normalises over prototypes for each query, the
//! negative direction normalises over the whole query set for each prototype,
//! and the bi-directional similarity is their product.

use nalgebra::{DMatrix, DVector};

use crate::data::MetricMatrix;
use crate::error::{Result, TeamError};
use crate::metric::factor_metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityMode {
    PositiveOnly,
    #[default]
    Bisim,
}

/// Whether similarities use the metric distance or its square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    Plain,
    Squared,
}

/// Query-by-prototype similarity tables (rows: queries, columns: classes).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    /// Softmax over classes of the negated distance; rows sum to one.
    pub positive: DMatrix<f64>,
    /// Softmax over queries of the negated distance; columns sum to one.
    pub negative: DMatrix<f64>,
    pub bisim: DMatrix<f64>,
    pub predictions: Vec<usize>,
}

pub fn classify(
    queries: &[DVector<f64>],
    prototypes: &[DVector<f64>],
    m: &MetricMatrix,
    mode: SimilarityMode,
) -> Result<SimilarityTable> {
    classify_with(queries, prototypes, m, mode, DistanceKind::Plain)
}

pub fn classify_with(
    queries: &[DVector<f64>],
    prototypes: &[DVector<f64>],
    m: &MetricMatrix,
    mode: SimilarityMode,
    kind: DistanceKind,
) -> Result<SimilarityTable> {
    let dist = distance_table(queries, prototypes, m)?;
    let dist = match kind {
        DistanceKind::Plain => dist,
        DistanceKind::Squared => dist.map(|v| v * v),
    };
    Ok(similarities(&dist, mode))
}

/// Metric distances between every query (rows) and prototype (columns).
pub fn distance_table(queries: &[DVector<f64>], prototypes: &[DVector<f64>], m: &MetricMatrix) -> Result<DMatrix<f64>> {
    if queries.is_empty() {
        return Err(TeamError::Parameter("no queries to classify".into()));
    }
    if prototypes.len() < 2 {
        return Err(TeamError::Parameter("need at least 2 prototypes".into()));
    }
    let d = m.dim();
    if let Some(bad) = queries.iter().chain(prototypes).find(|v| v.len() != d) {
        return Err(TeamError::Parameter(format!("point of dimension {} under a {d}-dimensional metric", bad.len())));
    }
    let l = factor_metric(m)?;
    let proj_q: Vec<DVector<f64>> = queries.iter().map(|q| &l * q).collect();
    let proj_p: Vec<DVector<f64>> = prototypes.iter().map(|p| &l * p).collect();
    Ok(DMatrix::from_fn(queries.len(), prototypes.len(), |i, c| (&proj_q[i] - &proj_p[c]).norm()))
}

/// Builds all tables from a distance matrix.
pub fn similarities(dist: &DMatrix<f64>, mode: SimilarityMode) -> SimilarityTable {
    let (rows, cols) = dist.shape();
    let mut positive = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let soft = softmax_neg(dist.row(i).iter().copied());
        for (c, v) in soft.into_iter().enumerate() {
            positive[(i, c)] = v;
        }
    }
    let mut negative = DMatrix::zeros(rows, cols);
    for c in 0..cols {
        let soft = softmax_neg(dist.column(c).iter().copied());
        for (i, v) in soft.into_iter().enumerate() {
            negative[(i, c)] = v;
        }
    }
    let bisim = positive.component_mul(&negative);
    let decision = match mode {
        SimilarityMode::PositiveOnly => &positive,
        SimilarityMode::Bisim => &bisim,
    };
    let predictions = (0..rows).map(|i| argmax_first(decision.row(i).iter().copied())).collect();
    SimilarityTable {
        positive,
        negative,
        bisim,
        predictions,
    }
}

/// Softmax of the negated inputs, shifted by the minimum for stability.
fn softmax_neg(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let min = values.clone().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.map(|v| (min - v).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Fraction of predictions equal to the true labels.
pub fn score(table: &SimilarityTable, true_labels: &[usize]) -> Result<f64> {
    accuracy(&table.predictions, true_labels)
}

pub fn accuracy(predictions: &[usize], true_labels: &[usize]) -> Result<f64> {
    if predictions.len() != true_labels.len() {
        return Err(TeamError::Parameter(format!(
            "{} predictions but {} labels",
            predictions.len(),
            true_labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(TeamError::Parameter("cannot score an empty query set".into()));
    }
    let hits = predictions.iter().zip(true_labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

use nalgebra::DMatrix;

use crate::data::MetricMatrix;
use crate::error::{Result, TeamError};

/// A projection `L` with `L^T L = M`, so that the metric distance equals the
/// Euclidean distance between `L x` and `L y`.
pub fn factor_metric(m: &MetricMatrix) -> Result<DMatrix<f64>> {
    let chol = m
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| TeamError::Domain("cannot factor a non-PD metric".into()))?;
    Ok(chol.unpack().transpose())
}

/// Entry statistics of a metric after min-max scaling to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub diag_mean: f64,
    pub offdiag_mean: f64,
    /// `diag_mean / offdiag_mean`; infinite when the off-diagonal mean is 0.
    pub gap_ratio: f64,
    /// All scaled entries in descending order.
    pub sorted_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sparsity {
    Scaled(SparsityReport),
    /// Every entry equal: scaling is undefined.
    Constant,
}

impl Sparsity {
    pub fn gap_ratio(&self) -> Option<f64> {
        match self {
            Sparsity::Scaled(r) => Some(r.gap_ratio),
            Sparsity::Constant => None,
        }
    }
}

pub fn sparsity_report(m: &DMatrix<f64>) -> Sparsity {
    let (min, max) = m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    if !(range > 0.0) {
        return Sparsity::Constant;
    }
    let d = m.nrows();
    let scaled = m.map(|v| (v - min) / range);
    let diag_mean = scaled.diagonal().mean();
    let offdiag_mean = if d > 1 {
        (scaled.sum() - scaled.trace()) / (d * d - d) as f64
    } else {
        0.0
    };
    let gap_ratio = if offdiag_mean == 0.0 {
        f64::INFINITY
    } else {
        diag_mean / offdiag_mean
    };
    let mut sorted_values: Vec<f64> = scaled.iter().copied().collect();
    sorted_values.sort_by(|a, b| b.total_cmp(a));
    Sparsity::Scaled(SparsityReport {
        diag_mean,
        offdiag_mean,
        gap_ratio,
        sorted_values,
    })
}

//! Shared domain types: embeddings, episodes, metric matrices and the
//! hyperparameters that drive metric construction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TeamError};

/// A d-dimensional feature vector with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    /// `None` marks an unlabeled record.
    pub label: Option<u32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, label: Option<u32>) -> Self {
        Self { values, label }
    }

    pub fn labeled(values: Vec<f64>, label: u32) -> Self {
        Self::new(values, Some(label))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// A non-empty collection of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    records: Vec<EmbeddingVector>,
}

impl Dataset {
    pub fn new(records: Vec<EmbeddingVector>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| TeamError::Format("no records".into()))?;
        let dim = first.dim();
        if dim == 0 {
            return Err(TeamError::Format("row 0: dimension must be at least 1".into()));
        }
        for (row, rec) in records.iter().enumerate() {
            if rec.dim() != dim {
                return Err(TeamError::Format(format!(
                    "row {row}: dimension {} does not match dimension {dim} of row 0",
                    rec.dim()
                )));
            }
            if let Some(col) = rec.values.iter().position(|v| !v.is_finite()) {
                return Err(TeamError::Format(format!(
                    "row {row}: non-finite value at column {col}"
                )));
            }
            if rec.label == Some(u32::MAX) {
                return Err(TeamError::Format(format!(
                    "row {row}: label {} is reserved for unlabeled records",
                    u32::MAX
                )));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingVector] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EmbeddingVector> {
        self.records
    }

    /// Row indices of every labeled class, in ascending label and row order.
    pub fn class_index(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (row, rec) in self.records.iter().enumerate() {
            if let Some(label) = rec.label {
                index.entry(label).or_default().push(row);
            }
        }
        index
    }
}

/// Shape of an N-way K-shot episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query_per_class: usize,
    pub seed: u64,
}

impl EpisodeConfig {
    pub fn new(n_way: usize, k_shot: usize, n_query_per_class: usize, seed: u64) -> Self {
        Self {
            n_way,
            k_shot,
            n_query_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(TeamError::Parameter(format!("n_way must be >= 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 {
            return Err(TeamError::Parameter("k_shot must be >= 1".into()));
        }
        if self.n_query_per_class < 1 {
            return Err(TeamError::Parameter("n_query_per_class must be >= 1".into()));
        }
        Ok(())
    }

    /// Total number of queries, M = N * n_query_per_class.
    pub fn n_queries(&self) -> usize {
        self.n_way * self.n_query_per_class
    }
}

/// A labeled episode member. `row` points back at the dataset record it
/// came from; synthetic (mixed) items have no row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeItem {
    pub x: DVector<f64>,
    pub class: usize,
    pub row: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledItem {
    pub x: DVector<f64>,
    pub row: Option<usize>,
}

/// One N-way task. Query labels are kept for scoring only.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    pub unlabeled: Vec<UnlabeledItem>,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support.first().map(|s| s.x.len()).unwrap_or(0)
    }

    /// Support items per class, assuming the episode is balanced.
    pub fn shots(&self) -> usize {
        self.support.len() / self.n_way.max(1)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|q| q.class).collect()
    }

    /// Query and unlabeled points: the transductive pool.
    pub fn transductive_pool(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.query
            .iter()
            .map(|q| &q.x)
            .chain(self.unlabeled.iter().map(|u| &u.x))
    }

    pub fn without_unlabeled(&self) -> Episode {
        Episode {
            unlabeled: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(TeamError::Parameter("episode needs at least 2 classes".into()));
        }
        let mut per_class = vec![0usize; self.n_way];
        for item in &self.support {
            if item.class >= self.n_way {
                return Err(TeamError::Parameter(format!(
                    "support class {} outside 0..{}",
                    item.class, self.n_way
                )));
            }
            per_class[item.class] += 1;
        }
        let k = per_class[0];
        if k == 0 || per_class.iter().any(|&c| c != k) {
            return Err(TeamError::Parameter(format!(
                "unbalanced support: per-class counts {per_class:?}"
            )));
        }
        if let Some(q) = self.query.iter().find(|q| q.class >= self.n_way) {
            return Err(TeamError::Parameter(format!(
                "query class {} outside 0..{}",
                q.class, self.n_way
            )));
        }
        let d = self.dim();
        let all = self
            .support
            .iter()
            .map(|s| &s.x)
            .chain(self.transductive_pool());
        for x in all {
            if x.len() != d {
                return Err(TeamError::Parameter("mixed dimensions within episode".into()));
            }
        }
        let support_rows: std::collections::HashSet<usize> =
            self.support.iter().filter_map(|s| s.row).collect();
        if let Some(q) = self
            .query
            .iter()
            .find(|q| q.row.is_some_and(|r| support_rows.contains(&r)))
        {
            return Err(TeamError::Parameter(format!(
                "query row {:?} also appears in support",
                q.row
            )));
        }
        Ok(())
    }
}

/// A symmetric positive-definite matrix parameterising a Mahalanobis distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix(DMatrix<f64>);

impl MetricMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(TeamError::Domain(format!(
                "metric must be a non-empty square matrix, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(TeamError::Domain("metric has non-finite entries".into()));
        }
        let d = entries.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                    return Err(TeamError::Domain(format!(
                        "metric is not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        if entries.clone().cholesky().is_none() {
            return Err(TeamError::Domain("metric is not positive definite".into()));
        }
        Ok(Self(entries))
    }

    pub fn identity(d: usize) -> Self {
        Self(DMatrix::identity(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// The prior metric M0 the adaptive metric is regularised towards.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Prior {
    #[default]
    Identity,
    Explicit(MetricMatrix),
}

impl Prior {
    /// M0 materialised at dimension `d`.
    pub fn matrix(&self, d: usize) -> Result<DMatrix<f64>> {
        match self {
            Prior::Identity => Ok(DMatrix::identity(d, d)),
            Prior::Explicit(m) => {
                check_prior_dim(m, d)?;
                Ok(m.as_matrix().clone())
            }
        }
    }

    /// M0^-1 at dimension `d`.
    pub fn inverse(&self, d: usize) -> Result<DMatrix<f64>> {
        match self {
            Prior::Identity => Ok(DMatrix::identity(d, d)),
            Prior::Explicit(m) => {
                check_prior_dim(m, d)?;
                let chol = m
                    .as_matrix()
                    .clone()
                    .cholesky()
                    .ok_or_else(|| TeamError::Parameter("prior is not SPD".into()))?;
                let inv = chol.inverse();
                Ok((&inv + inv.transpose()) * 0.5)
            }
        }
    }
}

fn check_prior_dim(m: &MetricMatrix, d: usize) -> Result<()> {
    if m.dim() != d {
        return Err(TeamError::Parameter(format!(
            "prior has dimension {} but embeddings have dimension {d}",
            m.dim()
        )));
    }
    Ok(())
}

/// Trade-off parameters for the episodic metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricHyperParams {
    /// Weight of the task covariance term.
    pub alpha: f64,
    /// Weight of the pair-constrained loss against the log-det regulariser.
    pub gamma: f64,
    /// Lagrange multiplier on the cannot-link scatter.
    pub lambda: f64,
    pub prior: Prior,
    /// Neighbours per support point drawn from the transductive pool.
    pub knn_k: usize,
    /// Eigenvalue floor used when repairing an indefinite system matrix.
    pub pd_floor: f64,
}

impl Default for MetricHyperParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            gamma: 0.2,
            lambda: 0.01,
            prior: Prior::Identity,
            knn_k: 3,
            pd_floor: 1e-6,
        }
    }
}

impl MetricHyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TeamError::Parameter(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        if self.knn_k == 0 {
            return Err(TeamError::Parameter("knn_k must be positive".into()));
        }
        if !(self.pd_floor > 0.0 && self.pd_floor.is_finite()) {
            return Err(TeamError::Parameter("pd_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Class means of the seen (training) classes, used as cannot-link anchors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeBank {
    entries: BTreeMap<u32, DVector<f64>>,
}

impl PrototypeBank {
    pub fn new(entries: BTreeMap<u32, DVector<f64>>) -> Result<Self> {
        let mut dims = entries.values().map(|v| v.len());
        if let Some(d) = dims.next() {
            if dims.any(|other| other != d) {
                return Err(TeamError::Parameter("prototype bank has mixed dimensions".into()));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Per-class means of every labeled class in `dataset`.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let entries = dataset
            .class_index()
            .into_iter()
            .map(|(label, rows)| {
                let mut mean = DVector::zeros(dataset.dim());
                for &r in &rows {
                    mean += dataset.records()[r].to_dvector();
                }
                (label, mean / rows.len() as f64)
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prototypes(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.entries.values()
    }
}

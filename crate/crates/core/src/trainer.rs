//! Episodic training of a small embedding (linear map or one-hidden-layer
//! MLP) by minimising the negative log-probability of the true query labels.
//!
//! When the adaptive metric is enabled it is rebuilt from the embedded
//! episode at every step and held constant during the backward pass.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, EmbeddingVector, Episode, EpisodeConfig, MetricHyperParams, MetricMatrix, PrototypeBank};
use crate::error::{Result, TeamError};
use crate::metric::{adapt_metric, compute_prototypes};
use crate::sampler::sample_episode;
use crate::tim::{augment_episode, TimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp1,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Linear => "linear",
            ModelKind::Mlp1 => "mlp1",
        })
    }
}

impl FromStr for ModelKind {
    type Err = TeamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ModelKind::Linear),
            "mlp1" => Ok(ModelKind::Mlp1),
            other => Err(TeamError::Parameter(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Parameters are stored flat: for `Linear` W (out x in, row-major) then b;
/// for `Mlp1` W1 (hidden x in), b1, W2 (out x hidden), b2.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub kind: ModelKind,
    pub in_dim: usize,
    /// Zero for linear models.
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub params: Vec<f64>,
}

pub fn param_count(kind: ModelKind, in_dim: usize, hidden_dim: usize, out_dim: usize) -> usize {
    match kind {
        ModelKind::Linear => out_dim * in_dim + out_dim,
        ModelKind::Mlp1 => hidden_dim * in_dim + hidden_dim + out_dim * hidden_dim + out_dim,
    }
}

/// Forward-pass intermediates of one point.
struct Forward {
    hidden_pre: Option<DVector<f64>>,
    hidden: Option<DVector<f64>>,
    out: DVector<f64>,
}

impl EmbeddingModel {
    pub fn new(kind: ModelKind, in_dim: usize, hidden_dim: usize, out_dim: usize, params: Vec<f64>) -> Result<Self> {
        let hidden_dim = if kind == ModelKind::Linear { 0 } else { hidden_dim };
        if in_dim == 0 || out_dim == 0 || (kind == ModelKind::Mlp1 && hidden_dim == 0) {
            return Err(TeamError::Parameter("model dimensions must be positive".into()));
        }
        let expected = param_count(kind, in_dim, hidden_dim, out_dim);
        if params.len() != expected {
            return Err(TeamError::Parameter(format!(
                "{kind} model {in_dim}->{out_dim} needs {expected} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(TeamError::Parameter("model parameters must be finite".into()));
        }
        Ok(Self {
            kind,
            in_dim,
            hidden_dim,
            out_dim,
            params,
        })
    }

    /// Seeded initialisation, each layer uniform in +-1/sqrt(fan_in).
    pub fn init(kind: ModelKind, in_dim: usize, hidden_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        let hidden_dim = if kind == ModelKind::Linear { 0 } else { hidden_dim };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize, out: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            out.extend((0..n).map(|_| rng.random_range(-bound..=bound)));
        };
        let mut params = Vec::with_capacity(param_count(kind, in_dim, hidden_dim, out_dim));
        match kind {
            ModelKind::Linear => draw(out_dim * in_dim + out_dim, in_dim, &mut params),
            ModelKind::Mlp1 => {
                draw(hidden_dim * in_dim + hidden_dim, in_dim, &mut params);
                draw(out_dim * hidden_dim + out_dim, hidden_dim, &mut params);
            }
        }
        Self::new(kind, in_dim, hidden_dim, out_dim, params)
    }

    /// Linear model `x -> W x + b` from an explicit matrix and bias.
    pub fn linear(w: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self> {
        let mut params: Vec<f64> = Vec::with_capacity(w.len() + b.len());
        for i in 0..w.nrows() {
            params.extend(w.row(i).iter());
        }
        params.extend(b.iter());
        Self::new(ModelKind::Linear, w.ncols(), 0, w.nrows(), params)
    }

    fn layer(&self, offset: usize, rows: usize, cols: usize) -> (DMatrix<f64>, DVector<f64>) {
        let w = DMatrix::from_row_slice(rows, cols, &self.params[offset..offset + rows * cols]);
        let b = DVector::from_column_slice(&self.params[offset + rows * cols..offset + rows * cols + rows]);
        (w, b)
    }

    fn layers(&self) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        match self.kind {
            ModelKind::Linear => vec![self.layer(0, self.out_dim, self.in_dim)],
            ModelKind::Mlp1 => {
                let first = self.layer(0, self.hidden_dim, self.in_dim);
                let off = self.hidden_dim * self.in_dim + self.hidden_dim;
                vec![first, self.layer(off, self.out_dim, self.hidden_dim)]
            }
        }
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.in_dim {
            return Err(TeamError::Parameter(format!(
                "input dimension {} does not match model input {}",
                x.len(),
                self.in_dim
            )));
        }
        Ok(())
    }

    fn forward(&self, layers: &[(DMatrix<f64>, DVector<f64>)], x: &DVector<f64>) -> Forward {
        match self.kind {
            ModelKind::Linear => Forward {
                hidden_pre: None,
                hidden: None,
                out: &layers[0].0 * x + &layers[0].1,
            },
            ModelKind::Mlp1 => {
                let pre = &layers[0].0 * x + &layers[0].1;
                let act = pre.map(|v| v.max(0.0));
                let out = &layers[1].0 * &act + &layers[1].1;
                Forward {
                    hidden_pre: Some(pre),
                    hidden: Some(act),
                    out,
                }
            }
        }
    }

    pub fn embed_vector(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.forward(&self.layers(), x).out)
    }

    /// Accumulates dLoss/dparams for one point given dLoss/dout.
    fn backward(
        &self,
        layers: &[(DMatrix<f64>, DVector<f64>)],
        x: &DVector<f64>,
        fwd: &Forward,
        grad_out: &DVector<f64>,
        grad: &mut [f64],
    ) {
        let accumulate = |grad: &mut [f64], offset: usize, g: &DVector<f64>, input: &DVector<f64>| {
            let (rows, cols) = (g.len(), input.len());
            for r in 0..rows {
                for c in 0..cols {
                    grad[offset + r * cols + c] += g[r] * input[c];
                }
                grad[offset + rows * cols + r] += g[r];
            }
        };
        match self.kind {
            ModelKind::Linear => accumulate(grad, 0, grad_out, x),
            ModelKind::Mlp1 => {
                let act = fwd.hidden.as_ref().expect("mlp forward keeps activations");
                let pre = fwd.hidden_pre.as_ref().expect("mlp forward keeps activations");
                let off = self.hidden_dim * self.in_dim + self.hidden_dim;
                accumulate(grad, off, grad_out, act);
                let mut g_hidden = layers[1].0.transpose() * grad_out;
                for (g, p) in g_hidden.iter_mut().zip(pre.iter()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
                accumulate(grad, 0, &g_hidden, x);
            }
        }
    }
}

pub fn embed(model: &EmbeddingModel, x: &EmbeddingVector) -> Result<EmbeddingVector> {
    let out = model.embed_vector(&x.to_dvector())?;
    Ok(EmbeddingVector::new(out.iter().copied().collect(), x.label))
}

pub fn embed_dataset(model: &EmbeddingModel, dataset: &Dataset) -> Result<Dataset> {
    let records = dataset.records().iter().map(|r| embed(model, r)).collect::<Result<Vec<_>>>()?;
    Dataset::new(records)
}

pub fn embed_episode(model: &EmbeddingModel, episode: &Episode) -> Result<Episode> {
    let mut out = episode.clone();
    for item in out.support.iter_mut().chain(out.query.iter_mut()) {
        item.x = model.embed_vector(&item.x)?;
    }
    for item in &mut out.unlabeled {
        item.x = model.embed_vector(&item.x)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricMode {
    #[default]
    Euclidean,
    Eam,
}

/// The metric a training step uses, computed from the embedded episode.
pub fn training_metric(
    model: &EmbeddingModel,
    episode: &Episode,
    hp: &MetricHyperParams,
    mode: MetricMode,
) -> Result<MetricMatrix> {
    match mode {
        MetricMode::Euclidean => Ok(MetricMatrix::identity(model.out_dim)),
        MetricMode::Eam => {
            let embedded = embed_episode(model, episode)?;
            Ok(adapt_metric(&embedded, &PrototypeBank::empty(), hp)?.closed_form.metric)
        }
    }
}

/// Mean negative log-probability of the true query labels.
pub fn episode_loss(model: &EmbeddingModel, episode: &Episode, hp: &MetricHyperParams, mode: MetricMode) -> Result<f64> {
    let metric = training_metric(model, episode, hp, mode)?;
    loss_and_gradient_with_metric(model, episode, &metric, false).map(|(l, _)| l)
}

pub fn loss_gradient(
    model: &EmbeddingModel,
    episode: &Episode,
    hp: &MetricHyperParams,
    mode: MetricMode,
) -> Result<Vec<f64>> {
    let metric = training_metric(model, episode, hp, mode)?;
    loss_and_gradient_with_metric(model, episode, &metric, true).map(|(_, g)| g)
}

pub fn episode_loss_with_metric(model: &EmbeddingModel, episode: &Episode, metric: &MetricMatrix) -> Result<f64> {
    loss_and_gradient_with_metric(model, episode, metric, false).map(|(l, _)| l)
}

/// Loss and (optionally) its gradient with the metric held fixed.
pub fn loss_and_gradient_with_metric(
    model: &EmbeddingModel,
    episode: &Episode,
    metric: &MetricMatrix,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if episode.query.is_empty() {
        return Err(TeamError::Parameter("episode has no queries".into()));
    }
    if metric.dim() != model.out_dim {
        return Err(TeamError::Parameter("metric dimension differs from model output".into()));
    }
    let layers = model.layers();
    let mut support_fwd = Vec::with_capacity(episode.support.len());
    for s in &episode.support {
        model.check_input(&s.x)?;
        support_fwd.push(model.forward(&layers, &s.x));
    }
    let mut query_fwd = Vec::with_capacity(episode.query.len());
    for q in &episode.query {
        model.check_input(&q.x)?;
        query_fwd.push(model.forward(&layers, &q.x));
    }

    let embedded_support = Episode {
        n_way: episode.n_way,
        support: episode
            .support
            .iter()
            .zip(&support_fwd)
            .map(|(s, f)| crate::data::EpisodeItem {
                x: f.out.clone(),
                class: s.class,
                row: s.row,
            })
            .collect(),
        query: Vec::new(),
        unlabeled: Vec::new(),
    };
    let prototypes = compute_prototypes(&embedded_support);
    let mut class_counts = vec![0usize; episode.n_way];
    for s in &episode.support {
        class_counts[s.class] += 1;
    }

    let m = metric.as_matrix();
    let n_q = episode.query.len() as f64;
    let n_way = episode.n_way;
    let mut loss = 0.0;
    let mut grad_query: Vec<DVector<f64>> = Vec::with_capacity(episode.query.len());
    let mut grad_proto = vec![DVector::zeros(model.out_dim); n_way];

    for (q, fwd) in episode.query.iter().zip(&query_fwd) {
        let diffs: Vec<DVector<f64>> = prototypes.iter().map(|p| &fwd.out - p).collect();
        let mdiffs: Vec<DVector<f64>> = diffs.iter().map(|v| m * v).collect();
        let dists: Vec<f64> = diffs.iter().zip(&mdiffs).map(|(v, mv)| v.dot(mv).max(0.0).sqrt()).collect();
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        // log sum_c exp(-d_c)
        let log_z = -min + dists.iter().map(|d| (min - d).exp()).sum::<f64>().ln();
        loss += dists[q.class] + log_z;

        if want_grad {
            let mut g_q = DVector::zeros(model.out_dim);
            for c in 0..n_way {
                let p = (-dists[c] - log_z).exp();
                let coeff = ((c == q.class) as u8 as f64 - p) / n_q;
                if dists[c] > 0.0 {
                    let g = &mdiffs[c] * (coeff / dists[c]);
                    g_q += &g;
                    grad_proto[c] -= &g;
                }
            }
            grad_query.push(g_q);
        }
    }
    loss /= n_q;

    let mut grad = vec![0.0; model.params.len()];
    if want_grad {
        for ((q, fwd), g) in episode.query.iter().zip(&query_fwd).zip(&grad_query) {
            model.backward(&layers, &q.x, fwd, g, &mut grad);
        }
        for (s, fwd) in episode.support.iter().zip(&support_fwd) {
            let g = &grad_proto[s.class] / class_counts[s.class] as f64;
            model.backward(&layers, &s.x, fwd, &g, &mut grad);
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub episodes: usize,
    pub tim: Option<TimConfig>,
    pub lr_halving_every: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub metric_mode: MetricMode,
    /// Fixed episodes the checkpoint loss is averaged over.
    pub eval_episodes: usize,
}

impl TrainConfig {
    pub fn new(episode: EpisodeConfig, episodes: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            episodes,
            tim: None,
            lr_halving_every: 10_000,
            eval_every: 500,
            seed: episode.seed,
            episode,
            metric_mode: MetricMode::Euclidean,
            eval_episodes: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TeamError::Parameter("learning_rate must be a non-negative real".into()));
        }
        if self.episodes == 0 || self.lr_halving_every == 0 || self.eval_every == 0 {
            return Err(TeamError::Parameter("episodes, lr_halving_every and eval_every must be positive".into()));
        }
        if let Some(tim) = &self.tim {
            tim.validate()?;
        }
        self.episode.validate()
    }

    pub fn learning_rate_at(&self, episode_index: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((episode_index / self.lr_halving_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    /// Mean loss over the fixed evaluation episodes, before training and
    /// after every `eval_every` episodes.
    pub loss_trace: Vec<f64>,
    /// Training loss of every episode (on the possibly mixed episode).
    pub episode_losses: Vec<f64>,
}

const EVAL_STREAM: u64 = 0x7e4d_0e7a_1ba5_e5ed;

/// Plain SGD over sampled (and optionally mixed) episodes.
pub fn train(model: &EmbeddingModel, dataset: &Dataset, cfg: &TrainConfig, hp: &MetricHyperParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    hp.validate()?;
    let mut model = model.clone();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
    let eval_set = (0..cfg.eval_episodes.max(1))
        .map(|_| sample_episode(dataset, &cfg.episode, &mut eval_rng))
        .collect::<Result<Vec<_>>>()?;
    let evaluate = |model: &EmbeddingModel| -> Result<f64> {
        let mut total = 0.0;
        for ep in &eval_set {
            total += episode_loss(model, ep, hp, cfg.metric_mode)?;
        }
        Ok(total / eval_set.len() as f64)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut loss_trace = vec![evaluate(&model)?];
    let mut episode_losses = Vec::with_capacity(cfg.episodes);
    for t in 0..cfg.episodes {
        let episode = sample_episode(dataset, &cfg.episode, &mut rng)?;
        let episode = match &cfg.tim {
            Some(tim) => augment_episode(&episode, tim, t, &mut rng)?,
            None => episode,
        };
        let metric = training_metric(&model, &episode, hp, cfg.metric_mode)?;
        let (loss, grad) = loss_and_gradient_with_metric(&model, &episode, &metric, true)?;
        if !loss.is_finite() {
            return Err(TeamError::Diverged { episode: t, loss });
        }
        episode_losses.push(loss);
        let lr = cfg.learning_rate_at(t);
        for (p, g) in model.params.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(TeamError::Diverged { episode: t, loss: f64::NAN });
        }
        if (t + 1) % cfg.eval_every == 0 {
            let l = evaluate(&model)?;
            if !l.is_finite() {
                return Err(TeamError::Diverged { episode: t, loss: l });
            }
            loss_trace.push(l);
        }
    }
    Ok(TrainOutcome {
        model,
        loss_trace,
        episode_losses,
    })
}

/// Checkpoint: ASCII header line `TEAMMODEL1 <kind> <in> <hidden> <out>`
/// followed by the parameters as little-endian f64.
pub fn encode_model(model: &EmbeddingModel) -> Vec<u8> {
    let mut out = format!(
        "TEAMMODEL1 {} {} {} {}\n",
        model.kind, model.in_dim, model.hidden_dim, model.out_dim
    )
    .into_bytes();
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<EmbeddingModel> {
    let newline = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| TeamError::Format("model checkpoint has no header line".into()))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| TeamError::Format("model header is not ASCII".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "TEAMMODEL1" {
        return Err(TeamError::Format(format!("bad model header `{header}`")));
    }
    let kind: ModelKind = fields[1].parse().map_err(|_| TeamError::Format(format!("unknown model kind `{}`", fields[1])))?;
    let dim = |s: &str| s.parse::<usize>().map_err(|_| TeamError::Format(format!("bad dimension `{s}`")));
    let (in_dim, hidden_dim, out_dim) = (dim(fields[2])?, dim(fields[3])?, dim(fields[4])?);
    let body = &bytes[newline + 1..];
    if body.len() % 8 != 0 {
        return Err(TeamError::Format("model parameter block is not a whole number of f64".into()));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    EmbeddingModel::new(kind, in_dim, hidden_dim, out_dim, params).map_err(|e| TeamError::Format(e.to_string()))
}

pub fn save_model(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| TeamError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| TeamError::io(path, e))?;
    decode_model(&bytes)
}

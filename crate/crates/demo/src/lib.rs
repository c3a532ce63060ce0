//! Browser demo. The plain functions below do the work and are tested
//! natively; the `#[wasm_bindgen]` wrappers only adapt argument types.

use nalgebra::DVector;
use team_core::data::EpisodeItem;
use team_core::harness::{predict_episode, run_trials, trial_rng, AblationSpec, EvalOptions};
use team_core::metric::{adapt_metric, sparsity_report};
use team_core::sampler::sample_episode;
use team_core::synth::{generate, SynthConfig};
use team_core::{Dataset, Episode, EpisodeConfig, MetricHyperParams, PrototypeBank, Result, TeamError};
use wasm_bindgen::prelude::*;

fn hyper(alpha: f64, gamma: f64, lambda: f64) -> MetricHyperParams {
    MetricHyperParams {
        alpha,
        gamma,
        lambda,
        ..MetricHyperParams::default()
    }
}

fn benchmark() -> Result<Dataset> {
    generate(&SynthConfig::an16())
}

/// Adapted metric of one 5-way 1-shot benchmark episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub dim: usize,
    /// Row-major entries.
    pub entries: Vec<f64>,
    /// NaN when the metric is constant.
    pub gap_ratio: f64,
    pub repaired: bool,
}

pub fn metric_heatmap(alpha: f64, gamma: f64, lambda: f64, episode_seed: u64) -> Result<Heatmap> {
    let data = benchmark()?;
    let episode = sample_episode(&data, &EpisodeConfig::new(5, 1, 15, 0), &mut trial_rng(episode_seed, 0))?;
    let adapted = adapt_metric(&episode, &PrototypeBank::empty(), &hyper(alpha, gamma, lambda))?;
    let m = adapted.closed_form.metric.as_matrix();
    let dim = m.nrows();
    Ok(Heatmap {
        dim,
        entries: (0..dim * dim).map(|i| m[(i / dim, i % dim)]).collect(),
        gap_ratio: sparsity_report(m).gap_ratio().unwrap_or(f64::NAN),
        repaired: adapted.closed_form.repaired(),
    })
}

/// Predictions for a hand-placed 2-D episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneResult {
    pub euclidean: Vec<usize>,
    pub adaptive: Vec<usize>,
    /// Row-major 2x2 adapted metric.
    pub metric: Vec<f64>,
}

/// `support_xy` and `query_xy` are interleaved x,y coordinates. Labels must
/// cover 0..n for some n >= 2.
pub fn classify_plane(
    support_xy: &[f64],
    support_labels: &[u32],
    query_xy: &[f64],
    alpha: f64,
    gamma: f64,
    lambda: f64,
) -> Result<PlaneResult> {
    if support_xy.len() != 2 * support_labels.len() || query_xy.len() % 2 != 0 || query_xy.is_empty() {
        return Err(TeamError::Parameter("coordinates must come in x,y pairs, one pair per label".into()));
    }
    let n_way = support_labels.iter().max().map_or(0, |m| *m as usize + 1);
    if n_way < 2 || (0..n_way as u32).any(|c| !support_labels.contains(&c)) {
        return Err(TeamError::Parameter("place support points for at least two consecutive classes".into()));
    }
    let point = |xy: &[f64]| DVector::from_column_slice(xy);
    let episode = Episode {
        n_way,
        support: support_xy
            .chunks(2)
            .zip(support_labels)
            .map(|(xy, &c)| EpisodeItem {
                x: point(xy),
                class: c as usize,
                row: None,
            })
            .collect(),
        query: query_xy
            .chunks(2)
            .map(|xy| EpisodeItem {
                x: point(xy),
                class: 0,
                row: None,
            })
            .collect(),
        unlabeled: Vec::new(),
    };
    let mut opts = EvalOptions::new(EpisodeConfig::new(n_way, 1, 1, 0));
    opts.hp = hyper(alpha, gamma, lambda);
    opts.hp.knn_k = opts.hp.knn_k.min(episode.query.len());
    opts.parallel = false;
    let adapted = adapt_metric(&episode, &opts.bank, &opts.hp)?;
    let m = adapted.closed_form.metric.as_matrix();
    Ok(PlaneResult {
        euclidean: predict_episode(&episode, &opts, &AblationSpec::BASELINE)?,
        adaptive: predict_episode(&episode, &opts, &AblationSpec::EAM_BISIM)?,
        metric: vec![m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]],
    })
}

/// Mean accuracy and 95% half-width of the baseline and the adaptive
/// pipeline on paired benchmark episodes.
pub fn compare_accuracy(trials: usize, k_shot: usize, alpha: f64, gamma: f64, lambda: f64, seed: u64) -> Result<[f64; 4]> {
    let data = benchmark()?;
    let mut opts = EvalOptions::new(EpisodeConfig::new(5, k_shot, 15, seed));
    opts.hp = hyper(alpha, gamma, lambda);
    opts.parallel = false;
    let base = run_trials(&data, &opts, AblationSpec::BASELINE, trials, seed)?;
    let team = run_trials(&data, &opts, AblationSpec::EAM_BISIM, trials, seed)?;
    Ok([base.mean_accuracy, base.ci95_halfwidth, team.mean_accuracy, team.ci95_halfwidth])
}

fn js_err(e: TeamError) -> JsError {
    JsError::new(&e.to_string())
}

/// Returns `[dim, gap_ratio, repaired, entries...]`.
#[wasm_bindgen(js_name = metricHeatmap)]
pub fn metric_heatmap_js(alpha: f64, gamma: f64, lambda: f64, episode_seed: u32) -> Result<Vec<f64>, JsError> {
    let h = metric_heatmap(alpha, gamma, lambda, u64::from(episode_seed)).map_err(js_err)?;
    let mut out = vec![h.dim as f64, h.gap_ratio, if h.repaired { 1.0 } else { 0.0 }];
    out.extend(h.entries);
    Ok(out)
}

/// Returns `[m00, m01, m10, m11, euclidean..., adaptive...]`.
#[wasm_bindgen(js_name = classifyPlane)]
pub fn classify_plane_js(
    support_xy: &[f64],
    support_labels: &[u32],
    query_xy: &[f64],
    alpha: f64,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, JsError> {
    let r = classify_plane(support_xy, support_labels, query_xy, alpha, gamma, lambda).map_err(js_err)?;
    let mut out = r.metric;
    out.extend(r.euclidean.iter().chain(&r.adaptive).map(|&p| p as f64));
    Ok(out)
}

/// Returns `[baseline, baseline_ci, adaptive, adaptive_ci]`.
#[wasm_bindgen(js_name = compareAccuracy)]
pub fn compare_accuracy_js(
    trials: u32,
    k_shot: u32,
    alpha: f64,
    gamma: f64,
    lambda: f64,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    compare_accuracy(trials as usize, k_shot as usize, alpha, gamma, lambda, u64::from(seed))
        .map(|r| r.to_vec())
        .map_err(js_err)
}

//! Trial batches, ablations, shot sweeps and the semi-supervised protocol.
//!
//! Every comparative run evaluates all arms on identical episodes: trial `t`
//! of a run seeded with `seed` always draws its episode from ChaCha stream
//! `t` of that seed.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bisim::{accuracy, classify_with, DistanceKind, SimilarityMode};
use crate::data::{Dataset, Episode, EpisodeConfig, MetricHyperParams, MetricMatrix, Prior, PrototypeBank};
use crate::error::{Result, TeamError};
use crate::metric::{adapt_metric, compute_prototypes};
use crate::sampler::{sample_episode, sample_semi_episode, SemiSplit, SemiSplitConfig};

/// Which pipeline stages are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationSpec {
    pub tim: bool,
    pub eam: bool,
    pub bisim: bool,
}

impl AblationSpec {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const TIM: Self = Self::new(true, false, false);
    pub const TIM_EAM: Self = Self::new(true, true, false);
    pub const TEAM: Self = Self::new(true, true, true);
    /// Adaptive metric and bi-directional similarity without training-time mixing.
    pub const EAM_BISIM: Self = Self::new(false, true, true);

    pub const fn new(tim: bool, eam: bool, bisim: bool) -> Self {
        Self { tim, eam, bisim }
    }

    pub fn name(&self) -> &'static str {
        match (self.tim, self.eam, self.bisim) {
            (false, false, false) => "baseline",
            (true, false, false) => "baseline+tim",
            (true, true, false) => "baseline+tim+eam",
            (true, true, true) => "team",
            (false, true, true) => "eam+bisim",
            (false, true, false) => "eam",
            (false, false, true) => "bisim",
            (true, false, true) => "tim+bisim",
        }
    }
}

/// Everything a trial needs besides the dataset.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episode: EpisodeConfig,
    pub hp: MetricHyperParams,
    pub bank: PrototypeBank,
    pub distance: DistanceKind,
    /// Run trials on the rayon pool; results are identical either way.
    pub parallel: bool,
}

impl EvalOptions {
    pub fn new(episode: EpisodeConfig) -> Self {
        Self {
            episode,
            hp: MetricHyperParams::default(),
            bank: PrototypeBank::empty(),
            distance: DistanceKind::Plain,
            parallel: true,
        }
    }

    fn echo(&self, spec: &AblationSpec, n_trials: usize, seed: u64) -> Vec<(String, String)> {
        let prior = match &self.hp.prior {
            Prior::Identity => "identity".to_string(),
            Prior::Explicit(m) => format!("explicit(d={})", m.dim()),
        };
        [
            ("n_way", self.episode.n_way.to_string()),
            ("k_shot", self.episode.k_shot.to_string()),
            ("n_query", self.episode.n_query_per_class.to_string()),
            ("alpha", self.hp.alpha.to_string()),
            ("gamma", self.hp.gamma.to_string()),
            ("lambda", self.hp.lambda.to_string()),
            ("knn_k", self.hp.knn_k.to_string()),
            ("pd_floor", self.hp.pd_floor.to_string()),
            ("prior", prior),
            ("bank_size", self.bank.len().to_string()),
            ("distance", format!("{:?}", self.distance).to_lowercase()),
            ("tim", spec.tim.to_string()),
            ("eam", spec.eam.to_string()),
            ("bisim", spec.bisim.to_string()),
            ("trials", n_trials.to_string()),
            ("seed", seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Mean accuracy with a normal-approximation 95% interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub n_trials: usize,
    /// Set when n_trials = 1 and no spread can be estimated.
    pub degenerate_ci: bool,
    pub per_trial_accuracies: Vec<f64>,
    pub config_echo: Vec<(String, String)>,
}

impl TrialReport {
    pub fn from_accuracies(per_trial_accuracies: Vec<f64>, config_echo: Vec<(String, String)>) -> Result<Self> {
        let n = per_trial_accuracies.len();
        if n == 0 {
            return Err(TeamError::Parameter("a report needs at least one trial".into()));
        }
        let (mean, half) = mean_ci95(&per_trial_accuracies);
        Ok(Self {
            mean_accuracy: mean,
            ci95_halfwidth: half,
            n_trials: n,
            degenerate_ci: n == 1,
            per_trial_accuracies,
            config_echo,
        })
    }

    pub fn ci_low(&self) -> f64 {
        self.mean_accuracy - self.ci95_halfwidth
    }

    pub fn ci_high(&self) -> f64 {
        self.mean_accuracy + self.ci95_halfwidth
    }

    /// True when this report's interval lies entirely above `other`'s.
    pub fn dominates(&self, other: &TrialReport) -> bool {
        self.ci_low() > other.ci_high()
    }

    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mean_accuracy={:.6}", self.mean_accuracy);
        let _ = writeln!(out, "ci95_halfwidth={:.6}", self.ci95_halfwidth);
        let _ = writeln!(out, "n_trials={}", self.n_trials);
        let _ = writeln!(out, "degenerate_ci={}", self.degenerate_ci);
        for (k, v) in &self.config_echo {
            let _ = writeln!(out, "config.{k}={v}");
        }
        out
    }

    /// `trial,accuracy` CSV.
    pub fn per_trial_csv(&self) -> String {
        let mut out = String::from("trial,accuracy\n");
        for (t, a) in self.per_trial_accuracies.iter().enumerate() {
            let _ = writeln!(out, "{t},{a}");
        }
        out
    }
}

/// Mean and 1.96 * s / sqrt(n) half-width (0 when n = 1). Summation runs in
/// index order.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Deterministic per-trial generator.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// The metric a spec evaluates an episode under.
pub fn episode_metric(episode: &Episode, opts: &EvalOptions, spec: &AblationSpec) -> Result<MetricMatrix> {
    if spec.eam {
        Ok(adapt_metric(episode, &opts.bank, &opts.hp)?.closed_form.metric)
    } else {
        Ok(MetricMatrix::identity(episode.dim()))
    }
}

/// Predicted class index for every query of `episode`.
pub fn predict_episode(episode: &Episode, opts: &EvalOptions, spec: &AblationSpec) -> Result<Vec<usize>> {
    let metric = episode_metric(episode, opts, spec)?;
    let prototypes = compute_prototypes(episode);
    let queries: Vec<_> = episode.query.iter().map(|q| q.x.clone()).collect();
    let mode = if spec.bisim {
        SimilarityMode::Bisim
    } else {
        SimilarityMode::PositiveOnly
    };
    Ok(classify_with(&queries, &prototypes, &metric, mode, opts.distance)?.predictions)
}

pub fn evaluate_episode(episode: &Episode, opts: &EvalOptions, spec: &AblationSpec) -> Result<f64> {
    accuracy(&predict_episode(episode, opts, spec)?, &episode.query_labels())
}

/// Runs `n_trials` independent trials; the first failing trial aborts the run.
fn collect_trials<F>(n_trials: usize, parallel: bool, trial: F) -> Result<Vec<f64>>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let wrap = |t: usize| {
        trial(t).map_err(|e| TeamError::Trial {
            trial: t,
            source: Box::new(e),
        })
    };
    let results: Vec<Result<f64>> = if parallel {
        (0..n_trials).into_par_iter().map(wrap).collect()
    } else {
        (0..n_trials).map(wrap).collect()
    };
    results.into_iter().collect()
}

pub fn run_trials(
    dataset: &Dataset,
    opts: &EvalOptions,
    spec: AblationSpec,
    n_trials: usize,
    seed: u64,
) -> Result<TrialReport> {
    opts.hp.validate()?;
    opts.episode.validate()?;
    let accs = collect_trials(n_trials, opts.parallel, |t| {
        let episode = sample_episode(dataset, &opts.episode, &mut trial_rng(seed, t))?;
        evaluate_episode(&episode, opts, &spec)
    })?;
    TrialReport::from_accuracies(accs, opts.echo(&spec, n_trials, seed))
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowOutcome {
    Report(TrialReport),
    /// Training-time mixing cannot be evaluated without a model trained with it.
    RequiresTrainedModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub outcome: RowOutcome,
}

impl AblationRow {
    pub fn report(&self) -> Option<&TrialReport> {
        match &self.outcome {
            RowOutcome::Report(r) => Some(r),
            RowOutcome::RequiresTrainedModel => None,
        }
    }
}

/// Datasets for the ablation rows. `mixed` is the evaluation set embedded by a
/// model trained with task mixing; rows with `tim` use it when present.
#[derive(Debug, Clone, Copy)]
pub struct AblationInputs<'a> {
    pub plain: &'a Dataset,
    pub mixed: Option<&'a Dataset>,
}

/// The four rows baseline, +tim, +tim+eam and full, on paired episodes.
pub fn run_ablation_suite(
    inputs: AblationInputs<'_>,
    opts: &EvalOptions,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    [AblationSpec::BASELINE, AblationSpec::TIM, AblationSpec::TIM_EAM, AblationSpec::TEAM]
        .into_iter()
        .map(|spec| {
            let dataset = match (spec.tim, inputs.mixed) {
                (true, Some(mixed)) => mixed,
                (true, None) if !spec.eam => {
                    return Ok(AblationRow {
                        spec,
                        outcome: RowOutcome::RequiresTrainedModel,
                    })
                }
                _ => inputs.plain,
            };
            let mut report = run_trials(dataset, opts, spec, n_trials, seed)?;
            if spec.tim && inputs.mixed.is_none() {
                for (k, v) in report.config_echo.iter_mut() {
                    if k == "tim" {
                        *v = "unavailable".into();
                    }
                }
            }
            Ok(AblationRow {
                spec,
                outcome: RowOutcome::Report(report),
            })
        })
        .collect()
}

/// Paired baseline and full-pipeline reports for one shot count.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotRow {
    pub k_shot: usize,
    pub baseline: TrialReport,
    pub team: TrialReport,
    /// team mean minus baseline mean.
    pub delta: f64,
    /// 95% half-width of the paired per-trial differences.
    pub delta_ci95: f64,
}

pub fn run_shot_sweep(
    dataset: &Dataset,
    shots: &[usize],
    opts: &EvalOptions,
    n_trials: usize,
    seed: u64,
) -> Result<Vec<ShotRow>> {
    shots
        .iter()
        .map(|&k| {
            let mut o = opts.clone();
            o.episode.k_shot = k;
            let baseline = run_trials(dataset, &o, AblationSpec::BASELINE, n_trials, seed)?;
            let team = run_trials(dataset, &o, AblationSpec::EAM_BISIM, n_trials, seed)?;
            let diffs: Vec<f64> = team
                .per_trial_accuracies
                .iter()
                .zip(&baseline.per_trial_accuracies)
                .map(|(a, b)| a - b)
                .collect();
            let (delta, delta_ci95) = mean_ci95(&diffs);
            Ok(ShotRow {
                k_shot: k,
                baseline,
                team,
                delta,
                delta_ci95,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiSplitReport {
    pub split_seed: u64,
    pub semi: TrialReport,
    pub labeled_only: TrialReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiReport {
    /// All trials of all splits pooled.
    pub semi: TrialReport,
    pub labeled_only: TrialReport,
    pub per_split: Vec<SemiSplitReport>,
}

impl SemiReport {
    pub fn splits_strictly_better(&self) -> usize {
        self.per_split
            .iter()
            .filter(|s| s.semi.mean_accuracy > s.labeled_only.mean_accuracy)
            .count()
    }
}

pub const SEMI_SPLITS: usize = 10;

/// Full pipeline with and without the unlabeled pool, over
/// [`SEMI_SPLITS`] labeled/unlabeled partitions seeded `seed, seed+1, ...`.
/// Both arms see the same support and query sets; the unlabeled points only
/// enter the covariance and the neighbour pool.
pub fn run_semi(
    dataset: &Dataset,
    labeled_fraction: f64,
    unlabeled_per_episode: usize,
    opts: &EvalOptions,
    n_trials: usize,
    seed: u64,
) -> Result<SemiReport> {
    let spec = AblationSpec::EAM_BISIM;
    let mut per_split = Vec::with_capacity(SEMI_SPLITS);
    for s in 0..SEMI_SPLITS {
        let split_seed = seed.wrapping_add(s as u64);
        let split = SemiSplit::new(dataset, &SemiSplitConfig::new(labeled_fraction, split_seed))?;
        let pairs = collect_pairs(n_trials, opts.parallel, |t| {
            let episode = sample_semi_episode(dataset, &opts.episode, &split, unlabeled_per_episode, &mut trial_rng(split_seed, t))?;
            let semi = evaluate_episode(&episode, opts, &spec)?;
            let labeled = evaluate_episode(&episode.without_unlabeled(), opts, &spec)?;
            Ok((semi, labeled))
        })?;
        let mut echo = opts.echo(&spec, n_trials, split_seed);
        echo.push(("labeled_fraction".into(), labeled_fraction.to_string()));
        echo.push(("unlabeled_per_episode".into(), unlabeled_per_episode.to_string()));
        let (semi, labeled): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut labeled_echo = echo.clone();
        labeled_echo.push(("arm".into(), "labeled_only".into()));
        echo.push(("arm".into(), "semi".into()));
        per_split.push(SemiSplitReport {
            split_seed,
            semi: TrialReport::from_accuracies(semi, echo)?,
            labeled_only: TrialReport::from_accuracies(labeled, labeled_echo)?,
        });
    }
    let pool = |f: fn(&SemiSplitReport) -> &TrialReport| -> Result<TrialReport> {
        let accs = per_split.iter().flat_map(|s| f(s).per_trial_accuracies.iter().copied()).collect();
        let mut echo = f(&per_split[0]).config_echo.clone();
        echo.retain(|(k, _)| k != "seed");
        echo.push(("splits".into(), SEMI_SPLITS.to_string()));
        TrialReport::from_accuracies(accs, echo)
    };
    Ok(SemiReport {
        semi: pool(|s| &s.semi)?,
        labeled_only: pool(|s| &s.labeled_only)?,
        per_split,
    })
}

fn collect_pairs<F>(n_trials: usize, parallel: bool, trial: F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(usize) -> Result<(f64, f64)> + Sync,
{
    let wrap = |t: usize| {
        trial(t).map_err(|e| TeamError::Trial {
            trial: t,
            source: Box::new(e),
        })
    };
    let results: Vec<Result<(f64, f64)>> = if parallel {
        (0..n_trials).into_par_iter().map(wrap).collect()
    } else {
        (0..n_trials).map(wrap).collect()
    };
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingVector;

    fn one_hot(classes: u32, per_class: usize) -> Dataset {
        let mut recs = Vec::new();
        for c in 0..classes {
            for _ in 0..per_class {
                let mut v = vec![0.0; classes as usize];
                v[c as usize] = 1.0;
                recs.push(EmbeddingVector::labeled(v, c));
            }
        }
        Dataset::new(recs).unwrap()
    }

    #[test]
    fn single_trial_ci_is_degenerate() {
        let r = TrialReport::from_accuracies(vec![0.7], vec![]).unwrap();
        assert_eq!(r.ci95_halfwidth, 0.0);
        assert!(r.degenerate_ci);
    }

    #[test]
    fn ci_formula() {
        let r = TrialReport::from_accuracies(vec![0.0, 1.0, 0.5, 0.5], vec![]).unwrap();
        let s = (0.5f64 / 3.0).sqrt();
        assert!((r.ci95_halfwidth - 1.96 * s / 2.0).abs() < 1e-15);
        assert_eq!(r.mean_accuracy, 0.5);
    }

    #[test]
    fn separable_one_hot_is_perfect_under_every_spec() {
        let ds = one_hot(6, 10);
        let opts = EvalOptions::new(EpisodeConfig::new(3, 2, 3, 0));
        for spec in [
            AblationSpec::BASELINE,
            AblationSpec::TIM,
            AblationSpec::TIM_EAM,
            AblationSpec::TEAM,
            AblationSpec::EAM_BISIM,
        ] {
            let r = run_trials(&ds, &opts, spec, 20, 1).unwrap();
            assert_eq!(r.mean_accuracy, 1.0, "{}", spec.name());
        }
    }

    #[test]
    fn report_is_deterministic_and_parallel_invariant() {
        let ds = crate::synth::generate(&crate::synth::SynthConfig::isotropic(10, 4, 30, 1.0, 3)).unwrap();
        let mut opts = EvalOptions::new(EpisodeConfig::new(5, 1, 5, 0));
        let a = run_trials(&ds, &opts, AblationSpec::TEAM, 40, 9).unwrap();
        opts.parallel = false;
        let b = run_trials(&ds, &opts, AblationSpec::TEAM, 40, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_without_mixed_model() {
        let ds = one_hot(5, 8);
        let opts = EvalOptions::new(EpisodeConfig::new(2, 1, 2, 0));
        let rows = run_ablation_suite(AblationInputs { plain: &ds, mixed: None }, &opts, 5, 0).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows[0].report().is_some());
        assert_eq!(rows[1].outcome, RowOutcome::RequiresTrainedModel);
        let echo = &rows[3].report().unwrap().config_echo;
        assert!(echo.contains(&("tim".to_string(), "unavailable".to_string())));
    }

    #[test]
    fn key_value_format() {
        let r = TrialReport::from_accuracies(vec![1.0, 0.5], vec![("seed".into(), "3".into())]).unwrap();
        let kv = r.to_key_value();
        assert!(kv.starts_with("mean_accuracy=0.750000\n"));
        assert!(kv.contains("n_trials=2\n"));
        assert!(kv.contains("config.seed=3\n"));
        assert_eq!(r.per_trial_csv(), "trial,accuracy\n0,1\n1,0.5\n");
    }

    #[test]
    fn single_shot_sweep_entry() {
        let ds = one_hot(4, 10);
        let opts = EvalOptions::new(EpisodeConfig::new(2, 1, 2, 0));
        let rows = run_shot_sweep(&ds, &[3], &opts, 5, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].k_shot, 3);
    }

    #[test]
    fn failing_trial_reports_index() {
        let ds = one_hot(2, 3);
        let mut opts = EvalOptions::new(EpisodeConfig::new(2, 1, 1, 0));
        opts.hp.knn_k = 5;
        let err = run_trials(&ds, &opts, AblationSpec::TEAM, 3, 0).unwrap_err();
        assert!(matches!(err, TeamError::Trial { trial: 0, .. }), "{err}");
    }
}

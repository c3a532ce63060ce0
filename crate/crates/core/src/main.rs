use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use team_core::harness::{
    run_ablation_suite, run_semi, run_shot_sweep, run_trials, trial_rng, AblationInputs, AblationSpec, EvalOptions,
    RowOutcome, TrialReport,
};
use team_core::io::{load_embeddings, load_prior_text, save_embeddings, EmbeddingFormat};
use team_core::metric::{
    build_constraints, closed_form_metric, compute_prototypes, oracle_solve, scatter_matrices, sparsity_report,
};
use team_core::sampler::sample_episode;
use team_core::synth::{generate, SynthConfig};
use team_core::tim::TimConfig;
use team_core::trainer::{embed_dataset, save_model, train, EmbeddingModel, MetricMode, ModelKind, TrainConfig};
use team_core::{Dataset, EpisodeConfig, MetricHyperParams, Prior, PrototypeBank, Result, TeamError};

#[derive(Parser)]
#[command(name = "team", version, about = "Transductive few-shot classification with episodic adaptive metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean accuracy over sampled episodes.
    Eval(Common),
    /// Baseline, +tim, +tim+eam and full rows on paired episodes.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Evaluation embeddings produced by a model trained with mixing.
        #[arg(long)]
        mixed_embeddings: Option<PathBuf>,
    },
    /// Baseline against the adaptive pipeline for several shot counts.
    Shots {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,5")]
        shots: Vec<usize>,
    },
    /// Semi-supervised protocol over ten labeled/unlabeled splits.
    Semi {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.4)]
        labeled_fraction: f64,
        #[arg(long, default_value_t = 50)]
        unlabeled: usize,
    },
    /// Episodic training of a linear or one-hidden-layer embedding.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "linear")]
        model: String,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        /// Output dimension; defaults to the input dimension.
        #[arg(long)]
        out_dim: Option<usize>,
        #[arg(long, default_value_t = 2000)]
        episodes: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 10_000)]
        lr_halving_every: usize,
        #[arg(long, default_value_t = 500)]
        eval_every: usize,
        #[arg(long, default_value_t = 5000)]
        warmup: usize,
        /// Also write the dataset embedded by the trained model here.
        #[arg(long)]
        embed_out: Option<PathBuf>,
    },
    /// Projected-gradient oracle against the closed-form metric.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 20_000)]
        steps: usize,
    },
    /// Diagonal/off-diagonal gap of the adapted metric over sampled episodes.
    Sparsity(Common),
    /// Write the synthetic benchmark to an embedding file.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        nuisance_dims: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 3.0)]
        class_sep: f64,
        #[arg(long, default_value_t = 3.0)]
        nuisance_std: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Queries per class.
    #[arg(long, default_value_t = 15)]
    n_query: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    gamma: f64,
    #[arg(long, default_value_t = 0.01)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    knn_k: usize,
    /// `identity` or a whitespace-separated square matrix file.
    #[arg(long, default_value = "identity")]
    prior: String,
    /// Input embeddings; the synthetic benchmark is used when absent.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embeddings whose class means act as the cannot-link bank.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long, value_enum, default_value = "on")]
    bisim: Switch,
    #[arg(long, value_enum, default_value = "on")]
    eam: Switch,
    #[arg(long, value_enum, default_value = "off")]
    tim: Switch,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run trials on one thread.
    #[arg(long)]
    serial: bool,
}

impl Common {
    fn format(&self) -> Result<EmbeddingFormat> {
        self.format.parse()
    }

    fn dataset(&self) -> Result<Dataset> {
        match &self.embeddings {
            Some(path) => load_embeddings(path, self.format()?),
            None => generate(&SynthConfig::an16()),
        }
    }

    fn hp(&self) -> Result<MetricHyperParams> {
        let prior = match self.prior.as_str() {
            "identity" => Prior::Identity,
            path => Prior::Explicit(load_prior_text(path)?),
        };
        let hp = MetricHyperParams {
            alpha: self.alpha,
            gamma: self.gamma,
            lambda: self.lambda,
            prior,
            knn_k: self.knn_k,
            ..MetricHyperParams::default()
        };
        hp.validate()?;
        Ok(hp)
    }

    fn episode(&self) -> EpisodeConfig {
        EpisodeConfig::new(self.n_way, self.k_shot, self.n_query, self.seed)
    }

    fn options(&self) -> Result<EvalOptions> {
        let mut opts = EvalOptions::new(self.episode());
        opts.hp = self.hp()?;
        opts.parallel = !self.serial;
        if let Some(path) = &self.bank {
            opts.bank = PrototypeBank::from_dataset(&load_embeddings(path, self.format()?)?);
        }
        Ok(opts)
    }

    fn spec(&self) -> AblationSpec {
        AblationSpec::new(self.tim.on(), self.eam.on(), self.bisim.on())
    }

    fn write_out(&self, contents: &str) -> Result<()> {
        if let Some(path) = &self.out {
            fs::write(path, contents).map_err(|e| TeamError::Format(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn print_report(prefix: &str, report: &TrialReport) {
    for line in report.to_key_value().lines() {
        println!("{prefix}{line}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Eval(c) => {
            let report = run_trials(&c.dataset()?, &c.options()?, c.spec(), c.trials, c.seed)?;
            print_report("", &report);
            c.write_out(&report.per_trial_csv())
        }
        Command::Ablate { common: c, mixed_embeddings } => {
            let plain = c.dataset()?;
            let mixed = mixed_embeddings.map(|p| load_embeddings(p, c.format()?)).transpose()?;
            let inputs = AblationInputs {
                plain: &plain,
                mixed: mixed.as_ref(),
            };
            let mut csv = String::from("row,mean_accuracy,ci95_halfwidth\n");
            for row in run_ablation_suite(inputs, &c.options()?, c.trials, c.seed)? {
                let name = row.spec.name();
                match &row.outcome {
                    RowOutcome::Report(r) => {
                        println!("row={name} mean_accuracy={:.6} ci95_halfwidth={:.6}", r.mean_accuracy, r.ci95_halfwidth);
                        csv.push_str(&format!("{name},{},{}\n", r.mean_accuracy, r.ci95_halfwidth));
                    }
                    RowOutcome::RequiresTrainedModel => {
                        println!("row={name} status=requires_trained_model");
                        csv.push_str(&format!("{name},,\n"));
                    }
                }
            }
            c.write_out(&csv)
        }
        Command::Shots { common: c, shots } => {
            let mut csv = String::from("k_shot,baseline,baseline_ci95,team,team_ci95,delta,delta_ci95\n");
            for row in run_shot_sweep(&c.dataset()?, &shots, &c.options()?, c.trials, c.seed)? {
                println!(
                    "k_shot={} baseline={:.6} team={:.6} delta={:.6} delta_ci95={:.6}",
                    row.k_shot, row.baseline.mean_accuracy, row.team.mean_accuracy, row.delta, row.delta_ci95
                );
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    row.k_shot,
                    row.baseline.mean_accuracy,
                    row.baseline.ci95_halfwidth,
                    row.team.mean_accuracy,
                    row.team.ci95_halfwidth,
                    row.delta,
                    row.delta_ci95
                ));
            }
            c.write_out(&csv)
        }
        Command::Semi {
            common: c,
            labeled_fraction,
            unlabeled,
        } => {
            let report = run_semi(&c.dataset()?, labeled_fraction, unlabeled, &c.options()?, c.trials, c.seed)?;
            let mut csv = String::from("split_seed,semi,labeled_only\n");
            for s in &report.per_split {
                println!(
                    "split_seed={} semi={:.6} labeled_only={:.6}",
                    s.split_seed, s.semi.mean_accuracy, s.labeled_only.mean_accuracy
                );
                csv.push_str(&format!("{},{},{}\n", s.split_seed, s.semi.mean_accuracy, s.labeled_only.mean_accuracy));
            }
            print_report("semi.", &report.semi);
            print_report("labeled_only.", &report.labeled_only);
            println!("splits_strictly_better={}", report.splits_strictly_better());
            c.write_out(&csv)
        }
        Command::Train {
            common: c,
            model,
            hidden,
            out_dim,
            episodes,
            lr,
            lr_halving_every,
            eval_every,
            warmup,
            embed_out,
        } => {
            let dataset = c.dataset()?;
            let kind: ModelKind = model.parse()?;
            let out_dim = out_dim.unwrap_or(dataset.dim());
            let init = EmbeddingModel::init(kind, dataset.dim(), hidden, out_dim, c.seed)?;
            let mut cfg = TrainConfig::new(c.episode(), episodes, lr);
            cfg.lr_halving_every = lr_halving_every;
            cfg.eval_every = eval_every;
            cfg.metric_mode = if c.eam.on() { MetricMode::Eam } else { MetricMode::Euclidean };
            if c.tim.on() {
                cfg.tim = Some(TimConfig {
                    warmup_episodes: warmup,
                    ..TimConfig::default()
                });
            }
            let outcome = train(&init, &dataset, &cfg, &c.hp()?)?;
            for (i, l) in outcome.loss_trace.iter().enumerate() {
                println!("checkpoint={} eval_loss={l:.8}", i * eval_every);
            }
            if let Some(path) = &c.out {
                save_model(&outcome.model, path)?;
            }
            if let Some(path) = embed_out {
                save_embeddings(&embed_dataset(&outcome.model, &dataset)?, path, c.format()?)?;
            }
            Ok(())
        }
        Command::OracleCheck {
            common: c,
            instances,
            steps,
        } => {
            let dataset = c.dataset()?;
            let hp = MetricHyperParams { alpha: 0.0, ..c.hp()? };
            let bank = c.options()?.bank;
            let (mut worst_frob, mut worst_gap) = (0.0f64, 0.0f64);
            for i in 0..instances {
                let episode = sample_episode(&dataset, &c.episode(), &mut trial_rng(c.seed, i))?;
                let protos = compute_prototypes(&episode);
                let sp = scatter_matrices(&build_constraints(&episode, &protos, &bank, hp.knn_k, true)?)?;
                let d = sp.dim();
                let closed = closed_form_metric(&sp, &nalgebra::DMatrix::zeros(d, d), &hp)?;
                let oracle = oracle_solve(&sp, &hp, steps, 1.0)?;
                let frob = (closed.metric.as_matrix() - oracle.metric.as_matrix()).norm();
                let gap = (team_core::metric::eam_objective(&closed.metric, &sp, &hp)? - oracle.objective).abs();
                worst_frob = worst_frob.max(frob);
                worst_gap = worst_gap.max(gap);
                println!("instance={i} frobenius={frob:.3e} objective_gap={gap:.3e} iterations={}", oracle.iterations);
            }
            let pass = worst_frob < 1e-3 && worst_gap < 1e-6;
            println!("max_frobenius={worst_frob:.3e} max_objective_gap={worst_gap:.3e} pass={pass}");
            if pass {
                Ok(())
            } else {
                Err(TeamError::Consistency("oracle and closed form disagree".into()))
            }
        }
        Command::Sparsity(c) => {
            let dataset = c.dataset()?;
            let opts = c.options()?;
            let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
            let mut ratios = Vec::with_capacity(c.trials);
            for _ in 0..c.trials {
                let episode = sample_episode(&dataset, &opts.episode, &mut rng)?;
                let m = team_core::metric::adapt_metric(&episode, &opts.bank, &opts.hp)?;
                if let Some(r) = sparsity_report(m.closed_form.metric.as_matrix()).gap_ratio() {
                    ratios.push(r);
                }
            }
            if ratios.is_empty() {
                return Err(TeamError::Degenerate("every sampled metric was constant".into()));
            }
            let mut sorted = ratios.clone();
            sorted.sort_by(f64::total_cmp);
            let median = median(&sorted);
            println!("episodes={} median_gap_ratio={median:.6}", sorted.len());
            let csv: String =
                std::iter::once("gap_ratio\n".to_string()).chain(ratios.iter().map(|r| format!("{r}\n"))).collect();
            c.write_out(&csv)
        }
        Command::Synth {
            common: c,
            classes,
            dim,
            nuisance_dims,
            per_class,
            class_sep,
            nuisance_std,
        } => {
            let mut noise = vec![1.0; dim];
            for v in noise.iter_mut().skip(dim.saturating_sub(nuisance_dims)) {
                *v = nuisance_std;
            }
            let cfg = SynthConfig {
                n_classes: classes,
                dim,
                per_class,
                class_sep,
                noise_aniso: noise,
                nuisance_dims,
                seed: c.seed,
            };
            let dataset = generate(&cfg)?;
            let path = c.out.as_ref().ok_or_else(|| TeamError::Parameter("synth needs --out".into()))?;
            save_embeddings(&dataset, path, c.format()?)?;
            println!("records={} dim={} path={}", dataset.len(), dataset.dim(), path.display());
            Ok(())
        }
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use daltest::experiments::{self, trial_seed, Noise, SignalSpec, STREAM_DATA, STREAM_PATCH, STREAM_PLAN};
use daltest::unet::TrainConfig;
use daltest::{
    analyze, decompose, grid_audit, parametric_search, CovarianceKind, CovarianceModel, Detector, ExperimentConfig,
    FamilyKind, FilterSpec, PlanSpec, ReconstructionPlan, SearchConfig, TestInstance, TrainingSpec, Weights,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "daltest", version, about = "Anomaly localization with selective p-values")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector network on simulated normal images.
    Train(TrainArgs),
    /// Test one image pair and print the result as JSON.
    TestOne(TestOneArgs),
    /// Type-I error study on null images.
    Type1(StudyArgs),
    /// Power study over signal strengths.
    Power(PowerArgs),
    /// Type-I error under standardized non-Gaussian noise.
    Robustness(RobustnessArgs),
    /// Compare the searched truncation set against a dense grid of detections.
    OracleCheck(OracleArgs),
}

fn parse_cov(s: &str) -> Result<CovarianceKind, String> {
    match s {
        "iid" => Ok(CovarianceKind::Identity),
        "ar" => Ok(CovarianceKind::ArCorrelation),
        other => Err(format!("unknown covariance {other:?}; expected iid or ar")),
    }
}

#[derive(Args, Clone, Serialize)]
struct Pipeline {
    /// Pixels per image (a perfect square).
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, value_parser = parse_cov, default_value = "iid")]
    #[serde(serialize_with = "cov_label")]
    cov: CovarianceKind,
    /// Detection threshold on the filtered error map.
    #[arg(long, default_value_t = 0.8)]
    lambda: f64,
    /// Averaging filter side.
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Diffusion start step.
    #[arg(long, default_value_t = 460)]
    tprime: usize,
    /// Reverse steps from the start step down to 0.
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop the line search once the unexplored tails can change the
    /// p-value by at most this much; omit to search a fixed ±20σ.
    #[arg(long)]
    tail_tolerance: Option<f64>,
}

fn cov_label<S: serde::Serializer>(kind: &CovarianceKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(kind.label())
}

impl Pipeline {
    fn plan(&self) -> PlanSpec {
        let d = PlanSpec::default();
        PlanSpec::evenly_spaced(
            d.total_steps,
            self.tprime,
            self.steps,
            self.eta,
            d.beta_start,
            d.beta_end,
            self.seed,
        )
    }

    fn search(&self) -> SearchConfig {
        SearchConfig {
            tail_tolerance: self.tail_tolerance,
            ..SearchConfig::default()
        }
    }

    fn experiment(&self, trials: usize, alphas: Vec<f64>, permutations: Option<usize>) -> ExperimentConfig {
        ExperimentConfig {
            n: self.n,
            covariance: self.cov,
            lambda: self.lambda,
            filter: FilterSpec {
                kernel_size: self.kernel,
            },
            plan: self.plan(),
            alphas,
            trials,
            seed: self.seed,
            search: self.search(),
            permutations,
        }
    }
}

#[derive(Args, Clone, Serialize)]
struct Training {
    /// Network weights (JSON); trained on the fly when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    train_steps: usize,
    #[arg(long, default_value_t = 1000)]
    train_images: usize,
}

impl Training {
    fn spec(&self, seed: u64) -> TrainingSpec {
        TrainingSpec {
            images: self.train_images,
            data_seed: seed ^ 0x5eed,
            train: TrainConfig {
                steps: self.train_steps,
                seed,
                ..TrainConfig::default()
            },
        }
    }

    fn load_or_train(&self, cfg: &ExperimentConfig) -> Result<Weights> {
        if let Some(path) = &self.weights {
            return Weights::load(path).with_context(|| format!("loading {}", path.display()));
        }
        eprintln!("training a network ({} steps)", self.train_steps);
        Ok(daltest::train_null_model(cfg, &self.spec(cfg.seed))?.weights)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    pipeline: Pipeline,
    #[arg(long, default_value_t = 2000)]
    train_steps: usize,
    #[arg(long, default_value_t = 1000)]
    train_images: usize,
    /// Output weights file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TestOneArgs {
    #[command(flatten)]
    pipeline: Pipeline,
    #[command(flatten)]
    training: Training,
    /// JSON file with `x` and `x_ref` arrays; simulated from --seed when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Signal added to a random patch of the simulated test image.
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long)]
    permutations: Option<usize>,
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    pipeline: Pipeline,
    #[command(flatten)]
    training: Training,
    /// Significance levels.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.10")]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    trials: usize,
    #[arg(long)]
    permutations: Option<usize>,
    /// Output directory for summary.csv, trials.csv and config.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PowerArgs {
    #[command(flatten)]
    study: StudyArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    deltas: Vec<f64>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    study: StudyArgs,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "skew-normal,exp-modified-gaussian,generalized-normal,student-t"
    )]
    families: Vec<FamilyKind>,
    /// Wasserstein-1 distances to the standard normal.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.03,0.04")]
    targets: Vec<f64>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    pipeline: Pipeline,
    #[command(flatten)]
    training: Training,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Grid spacing along the statistic.
    #[arg(long, default_value_t = 1e-3)]
    grid_step: f64,
}

#[derive(Serialize)]
struct RunEcho<'a, E: Serialize> {
    command: &'a str,
    experiment: &'a ExperimentConfig,
    training: &'a Training,
    #[serde(flatten)]
    extra: E,
}

#[derive(Deserialize)]
struct PairInput {
    x: Vec<f64>,
    x_ref: Vec<f64>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => train(args),
        Command::TestOne(args) => test_one(args),
        Command::Type1(args) => {
            let cfg = args
                .pipeline
                .experiment(args.trials, args.alpha.clone(), args.permutations);
            let weights = args.training.load_or_train(&cfg)?;
            let study = daltest::run_type1(&cfg, &weights)?;
            report(&args.out, "type1", &cfg, &args.training, (), &[study])
        }
        Command::Power(args) => {
            let s = &args.study;
            let cfg = s.pipeline.experiment(s.trials, s.alpha.clone(), s.permutations);
            let weights = s.training.load_or_train(&cfg)?;
            let studies = daltest::run_power(&cfg, &weights, &args.deltas)?;
            #[derive(Serialize)]
            struct Extra<'a> {
                deltas: &'a [f64],
            }
            report(
                &s.out,
                "power",
                &cfg,
                &s.training,
                Extra { deltas: &args.deltas },
                &studies,
            )
        }
        Command::Robustness(args) => {
            let s = &args.study;
            if s.pipeline.cov != CovarianceKind::Identity {
                bail!("robustness studies draw independent pixels; use --cov iid");
            }
            let cfg = s.pipeline.experiment(s.trials, s.alpha.clone(), s.permutations);
            let weights = s.training.load_or_train(&cfg)?;
            let studies = daltest::run_robustness(&cfg, &weights, &args.families, &args.targets)?;
            #[derive(Serialize)]
            struct Extra<'a> {
                families: &'a [FamilyKind],
                targets: &'a [f64],
            }
            let extra = Extra {
                families: &args.families,
                targets: &args.targets,
            };
            report(&s.out, "robustness", &cfg, &s.training, extra, &studies)
        }
        Command::OracleCheck(args) => oracle_check(args),
    }
}

fn report<E: Serialize>(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    training: &Training,
    extra: E,
    studies: &[daltest::Study],
) -> Result<()> {
    let echo = RunEcho {
        command,
        experiment: cfg,
        training,
        extra,
    };
    experiments::write_artifacts(out, &echo, studies, &cfg.alphas)?;
    for s in studies {
        eprintln!(
            "{} {}: {} valid, {} empty, {} failed",
            s.group,
            s.setting,
            s.records.len(),
            s.excluded_empty,
            s.failures.len()
        );
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.pipeline.experiment(0, vec![], None);
    let training = Training {
        weights: None,
        train_steps: args.train_steps,
        train_images: args.train_images,
    };
    let outcome = daltest::train_null_model(&cfg, &training.spec(cfg.seed))?;
    eprintln!(
        "held-out loss {:.4} -> {:.4}",
        outcome.initial_holdout_loss, outcome.final_holdout_loss
    );
    outcome.weights.save(&args.out)?;
    Ok(())
}

fn simulated_pair(p: &Pipeline, delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let cov = CovarianceModel::new(p.cov, p.n);
    cov.validate()?;
    let noise = Noise::Gaussian(cov);
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(p.seed, STREAM_DATA, 0));
    let mut x = noise.draw(p.n, &mut rng);
    let x_ref = noise.draw(p.n, &mut rng);
    if delta != 0.0 {
        let mut patch_rng = ChaCha8Rng::seed_from_u64(trial_seed(p.seed, STREAM_PATCH, 0));
        SignalSpec::random(p.n, delta, &mut patch_rng)?.apply(&mut x);
    }
    Ok((x, x_ref))
}

fn test_one(args: TestOneArgs) -> Result<()> {
    let p = &args.pipeline;
    let (x, x_ref) = match &args.input {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let pair: PairInput = serde_json::from_str(&text)?;
            (pair.x, pair.x_ref)
        }
        None => simulated_pair(p, args.delta)?,
    };
    let cfg = p.experiment(1, vec![], args.permutations);
    let weights = args.training.load_or_train(&cfg)?;
    let instance = TestInstance::new(x, x_ref, CovarianceModel::new(p.cov, p.n))?;
    let plan = ReconstructionPlan::new(p.plan(), p.n)?;
    let detector = Detector::new(plan, &weights, cfg.filter, p.lambda)?;
    let perms = args.permutations.map(|b| (b, p.seed));
    let result = analyze(&instance, &detector, &cfg.search, perms)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

#[derive(Serialize)]
struct OracleRow {
    instance: usize,
    region_size: usize,
    points: usize,
    agreement: f64,
    disagreements: usize,
    max_disagreement_distance: f64,
    two_gamma: f64,
    z_obs_in_truncation: bool,
}

fn oracle_check(args: OracleArgs) -> Result<()> {
    let p = &args.pipeline;
    let cfg = p.experiment(args.instances, vec![], None);
    let weights = args.training.load_or_train(&cfg)?;
    let cov = CovarianceModel::new(p.cov, p.n);
    let mut rows = Vec::new();
    let mut index = 0u64;
    while rows.len() < args.instances {
        if index > 100 * args.instances as u64 + 100 {
            bail!("too many empty regions; only {} instances found", rows.len());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(p.seed, STREAM_DATA, index));
        let noise = Noise::Gaussian(cov);
        let instance = TestInstance::new(noise.draw(p.n, &mut rng), noise.draw(p.n, &mut rng), cov)?;
        let plan = ReconstructionPlan::new(cfg.plan.with_seed(trial_seed(p.seed, STREAM_PLAN, index)), p.n)?;
        index += 1;
        let detector = Detector::new(plan, &weights, cfg.filter, p.lambda)?;
        let observed = detector.detect(&instance.x)?;
        if observed.is_empty() {
            continue;
        }
        let dec = decompose(&instance, &observed)?;
        let outcome = parametric_search(&detector, &dec, &observed, &cfg.search)?;
        let audit = grid_audit(&detector, &dec, &observed, &outcome, args.grid_step)?;
        rows.push(OracleRow {
            instance: rows.len(),
            region_size: observed.len(),
            points: audit.points,
            agreement: audit.agreement(),
            disagreements: audit.disagreements.len(),
            max_disagreement_distance: audit.max_disagreement_distance(),
            two_gamma: 2.0 * cfg.search.gamma(dec.sigma()),
            z_obs_in_truncation: audit.z_obs_in_truncation,
        });
    }
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}

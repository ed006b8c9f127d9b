//! Command-line front end: dataset generation, training, evaluation, grid
//! sweeps, and the built-in verification suites.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use protonet::data::{save_attribute_dataset, save_dataset};
use protonet::episode::EpisodeSpec;
use protonet::harness::selftest::run_selftests;
use protonet::harness::{
    episode_seeds, evaluate_with_seeds, evaluate_zero_shot, load_config, load_model,
    prepare_data, run_grid, save_model, seed_streams, train, write_report_csv,
    write_training_log, DatasetConfig, ExperimentConfig, GridAxes, HeadKind, ReportRow,
    TrainData,
};
use protonet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "protonet",
    version,
    about = "Train and evaluate few-shot / zero-shot classifiers built on class prototypes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the config's synthetic dataset as tensor files plus a manifest
    GenData(GenDataArgs),
    /// Train a model; writes model.pnck and train_log.csv into --out
    Train(TrainArgs),
    /// Evaluate a trained checkpoint; writes a one-row report CSV
    Eval(EvalArgs),
    /// Train and evaluate every cell of a head/distance/way/shot grid
    Grid(GridArgs),
    /// Run the gradient-check and algebraic-equivalence suites
    Selftest,
}

#[derive(Args)]
struct GenDataArgs {
    /// Experiment config whose dataset section is a synthetic spec
    #[arg(long)]
    config: PathBuf,
    /// Directory to write the tensor files and manifest into
    #[arg(long)]
    out: PathBuf,
    /// Replace the config's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Directory for model.pnck and train_log.csv
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint written by the train subcommand
    checkpoint: PathBuf,
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Report CSV path
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GridArgs {
    /// Base experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Report CSV path
    #[arg(long)]
    out: PathBuf,
    /// Replace the base config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Training episodes per cell
    #[arg(long)]
    episodes: Option<usize>,
    /// Query count for training episodes
    #[arg(long)]
    query: Option<usize>,
    /// Training ways to sweep (comma separated)
    #[arg(long, value_delimiter = ',')]
    way: Vec<usize>,
    /// Training shots to sweep (comma separated)
    #[arg(long, value_delimiter = ',')]
    shot: Vec<usize>,
    /// Distances to sweep, e.g. sq_euclidean,cosine
    #[arg(long, value_delimiter = ',')]
    distance: Vec<String>,
    /// Heads to sweep, e.g. protonet,matching
    #[arg(long, value_delimiter = ',')]
    head: Vec<String>,
}

/// Config overrides shared by train and eval. Way/shot/query and the episode
/// count apply to whichever phase the subcommand runs.
#[derive(Args)]
struct Overrides {
    /// Replace the config's seed (synthetic datasets re-derive from it)
    #[arg(long)]
    seed: Option<u64>,
    /// Episode count: training episodes for train, evaluation episodes for eval
    #[arg(long)]
    episodes: Option<usize>,
    /// Classes per episode
    #[arg(long)]
    way: Option<usize>,
    /// Support examples per class
    #[arg(long)]
    shot: Option<usize>,
    /// Query examples per class
    #[arg(long)]
    query: Option<usize>,
    /// Distance: sq_euclidean, cosine, mahalanobis_diag:w1,w2,.., bregman:<name>
    #[arg(long)]
    distance: Option<String>,
    /// Head: protonet, matching, or zero-shot
    #[arg(long)]
    head: Option<String>,
}

impl Overrides {
    fn apply_common(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(d) = &self.distance {
            config.distance = d.clone();
        }
        if let Some(h) = &self.head {
            config.head = h.clone();
        }
    }

    fn apply_train(&self, config: &mut ExperimentConfig) {
        self.apply_common(config);
        if let Some(n) = self.episodes {
            config.max_episodes = n;
        }
        if let Some(w) = self.way {
            config.train.way = w;
        }
        if let Some(s) = self.shot {
            config.train.shot = s;
        }
        if let Some(q) = self.query {
            config.train.query = q;
        }
    }

    fn apply_eval(&self, config: &mut ExperimentConfig) {
        self.apply_common(config);
        if let Some(n) = self.episodes {
            config.eval_episodes = n;
        }
        if let Some(w) = self.way {
            config.eval.way = w;
        }
        if let Some(s) = self.shot {
            config.eval.shot = s;
        }
        if let Some(q) = self.query {
            config.eval.query = q;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Grid(args) => run_grid_sweep(args),
        Command::Selftest => return run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if matches!(config.dataset, DatasetConfig::Manifest { .. }) {
        return Err(Error::Config(
            "gen-data needs a synthetic dataset spec, but the config already points at a manifest"
                .into(),
        ));
    }
    let head = config.head_kind()?;
    let mut streams = seed_streams(config.seed);
    let manifest = match prepare_data(&config.dataset, head, &mut streams.data)? {
        TrainData::Labeled { data, .. } => save_dataset(&args.out, &data)?,
        TrainData::Attribute(data) => save_attribute_dataset(&args.out, &data)?,
    };
    println!("wrote {}", manifest.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    args.overrides.apply_train(&mut config);
    config.validate()?;
    let outcome = train(&config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let model_path = args.out.join("model.pnck");
    let log_path = args.out.join("train_log.csv");
    save_model(&model_path, &outcome)?;
    write_training_log(&log_path, &outcome.log)?;
    match outcome.log.last() {
        Some(row) => println!(
            "trained {} episodes, final loss {:.6}",
            outcome.episodes_run, row.loss
        ),
        None => println!("trained 0 episodes"),
    }
    println!("wrote {}", model_path.display());
    println!("wrote {}", log_path.display());
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    args.overrides.apply_eval(&mut config);
    config.validate()?;
    let head = config.head_kind()?;
    let distance = config.distance_fn()?;
    let (net, meta) = load_model(&args.checkpoint, &config)?;
    let mut streams = seed_streams(config.seed);
    let data = prepare_data(&config.dataset, head, &mut streams.data)?;
    let seeds = episode_seeds(&mut streams.eval, config.eval_episodes);
    let outcome = match (&data, head) {
        (TrainData::Labeled { data, .. }, HeadKind::Protonet | HeadKind::Matching) => {
            let spec = EpisodeSpec::new(config.eval.way, config.eval.shot, config.eval.query)?;
            evaluate_with_seeds(&net, data, &spec, &seeds, &distance, head)?
        }
        (TrainData::Attribute(data), HeadKind::ZeroShot) => {
            let meta = meta
                .as_ref()
                .expect("checkpoints for the zero-shot head carry the meta network");
            evaluate_zero_shot(
                &net,
                meta,
                data,
                config.eval.way,
                config.eval.query,
                &seeds,
                &distance,
            )?
        }
        _ => return Err(Error::Config("dataset kind does not match head".into())),
    };
    let row = ReportRow::from_outcome(&config, &outcome);
    write_report_csv(&args.out, &[row])?;
    println!(
        "accuracy {:.4} +/- {:.4} over {} episodes",
        outcome.acc_mean, outcome.ci95, outcome.episodes
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_grid_sweep(args: GridArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.episodes {
        config.max_episodes = n;
    }
    if let Some(q) = args.query {
        config.train.query = q;
    }
    let axes = GridAxes {
        heads: args.head,
        distances: args.distance,
        train_ways: args.way,
        train_shots: args.shot,
    };
    let report = run_grid(&config, &axes)?;
    for f in &report.failures {
        eprintln!(
            "cell failed (head={}, distance={}, way={}, shot={}): {}",
            f.head, f.distance, f.train_way, f.train_shot, f.error
        );
    }
    write_report_csv(&args.out, &report.rows)?;
    println!(
        "grid complete: {} cells ok, {} failed",
        report.rows.len(),
        report.failures.len()
    );
    println!("wrote {}", args.out.display());
    if report.rows.is_empty() && !report.failures.is_empty() {
        return Err(Error::Config("every grid cell failed".into()));
    }
    Ok(())
}

fn run_selftest() -> ExitCode {
    let reports = run_selftests();
    let mut all_ok = true;
    for r in &reports {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag} {}: {}", r.name, r.detail);
        all_ok &= r.passed;
    }
    if all_ok {
        println!("all {} suites passed", reports.len());
        ExitCode::SUCCESS
    } else {
        eprintln!("error: selftest found failures");
        ExitCode::from(1)
    }
}

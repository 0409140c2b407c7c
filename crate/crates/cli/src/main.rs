use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cmta::envs::{register_suite, suite_manifest, SUITES};
use cmta::export::{export_embeddings, DEFAULT_EXPORT_EPISODES};
use cmta::model::Architecture;
use cmta::run::{self, eval_csv, eval_rng, RunConfig};
use cmta::sac::Checkpoint;
use cmta::Error;

#[derive(Parser, Debug)]
#[command(name = "cmta", version, about = "Multi-task SAC with contrastive experts and temporal attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a suite and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Evaluate a checkpoint with the deterministic policy.
    Eval(EvalArgs),
    /// Dump per-step expert encodings and attention weights as CSV.
    ExportEmbeddings(ExportArgs),
    /// Print a suite's task list and position sets as TOML.
    Suite {
        /// One of MT3-Fixed, MT3-Mixed, MT5-Fixed, MT5-Mixed, Reach-Fixed, Reach-Mixed.
        name: String,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ArchArg {
    Cmta,
    SharedEncoder,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task suite [default: MT3-Mixed].
    #[arg(long)]
    suite: Option<String>,
    /// Run seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Env steps per task [default: 2400000, the reference budget].
    #[arg(long)]
    steps: Option<u64>,
    /// Contrastive regularizer; `off` sets its weight to 0.
    #[arg(long, value_enum)]
    contrastive: Option<Switch>,
    /// Feed the LSTM state to the attention layer; `off` replaces it with zeros.
    #[arg(long, value_enum)]
    temporal: Option<Switch>,
    /// Number of experts K [default: 6, reference setting].
    #[arg(long)]
    experts: Option<usize>,
    /// Encoder architecture [default: cmta].
    #[arg(long, value_enum)]
    architecture: Option<ArchArg>,
    /// Contrastive temperature [default: 0.1].
    #[arg(long)]
    tau: Option<f64>,
    /// Contrastive loss weight [default: 2500, reference setting].
    #[arg(long)]
    beta: Option<f64>,
    /// Output directory; relative paths go under $CMTA_OUTPUT_ROOT when set.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Suite to evaluate on [default: the checkpoint's suite].
    #[arg(long)]
    suite: Option<String>,
    /// Episodes per task [default: the run's evaluation setting, 20 for reference runs].
    #[arg(long)]
    episodes: Option<usize>,
    /// CSV destination [default: eval.csv next to the checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint JSON written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Suite to roll out on [default: the checkpoint's suite].
    #[arg(long)]
    suite: Option<String>,
    /// Episodes per task.
    #[arg(long, default_value_t = DEFAULT_EXPORT_EPISODES)]
    episodes: usize,
    /// CSV destination [default: embeddings.csv next to the checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::Suite { name } => suite_manifest(&name).map(|m| print!("{m}")).map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Input(_)) => 2,
        Some(Error::Checkpoint(_)) => 3,
        _ => 4,
    }
}

fn resolve_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &a.suite {
        c.suite = s.clone();
    }
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(s) = a.steps {
        c.steps = s;
    }
    if let Some(s) = a.contrastive {
        c.train.contrastive = s.on();
        if !s.on() {
            c.train.beta = 0.0;
        }
    }
    if let Some(s) = a.temporal {
        c.model.temporal = s.on();
    }
    if let Some(k) = a.experts {
        c.model.n_experts = k;
    }
    if let Some(arch) = a.architecture {
        c.model.architecture = match arch {
            ArchArg::Cmta => Architecture::Cmta,
            ArchArg::SharedEncoder => Architecture::SharedEncoder,
        };
    }
    if let Some(t) = a.tau {
        c.train.tau = t;
    }
    if let Some(b) = a.beta {
        c.train.beta = b;
    }
    match &a.out {
        Some(o) => c.output_dir = o.clone(),
        None if a.config.is_none() => c.output_dir = PathBuf::from(format!("runs/{}-seed{}", c.suite, c.seed)),
        None => {}
    }
    c.validate()?;
    Ok(c)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let config = resolve_config(&a)?;
    if a.dry_run {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    let outcome = run::train(&config, |line| eprintln!("{line}"))?;
    let s = &outcome.summary;
    println!(
        "{}: max {:.4}, max_smoothed@0.8 {:.4}, final {:.4} after {} steps ({})",
        s.suite,
        s.max,
        s.max_smoothed,
        s.final_mean_success,
        s.final_step,
        outcome.output_dir.display()
    );
    Ok(())
}

fn load_suite(ck: &Checkpoint, name: Option<&str>) -> anyhow::Result<Vec<cmta::envs::TaskSpec>> {
    let name = name.unwrap_or(&ck.suite);
    Ok(register_suite(name).map_err(|e| Error::Config(format!("suite: {e} (known: {})", SUITES.join(", "))))?)
}

fn sibling(ck: &std::path::Path, name: &str) -> PathBuf {
    ck.parent().map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let tasks = load_suite(&ck, a.suite.as_deref())?;
    let report = run::evaluate_checkpoint(&ck, &tasks, a.episodes)?;
    for (spec, rate) in tasks.iter().zip(&report.per_task) {
        println!("{:<12} {rate:.4}", spec.name);
    }
    println!("{:<12} {:.4}", "mean", report.mean_success);
    let out = a.out.unwrap_or_else(|| sibling(&a.checkpoint, "eval.csv"));
    fs::write(&out, eval_csv(&tasks, &report))?;
    Ok(())
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let tasks = load_suite(&ck, a.suite.as_deref())?;
    let out = a.out.unwrap_or_else(|| sibling(&a.checkpoint, "embeddings.csv"));
    let mut w = BufWriter::new(File::create(&out)?);
    let t = &ck.trainer;
    let rows = export_embeddings(
        &t.model,
        &tasks,
        a.episodes,
        t.config.horizon,
        &mut eval_rng(ck.seed, t.env_steps()),
        &mut w,
    )?;
    w.flush()?;
    println!("wrote {rows} rows to {}", out.display());
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hatehead::experiment::{self, ExperimentReport};
use hatehead::store::{generate_synthetic, write_dataset, ClassCounts, SyntheticSpec};
use hatehead::trainer::evaluate_split;
use hatehead::{
    read_dataset, FusionConfig, HeadParameters, MiningConfig, ModelSelection, OptimizerKind, Reduction, Split,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "hatehead",
    version,
    about = "Train and evaluate fused-embedding hateful meme classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-hard synthetic dataset.
    Synth(SynthArgs),
    /// Print dataset dimensions, split sizes, class balance and hard counts.
    Inspect(InspectArgs),
    /// Train over several seeds and write a metrics report.
    Train(TrainArgs),
    /// One cell per nearest-neighbor count n (n = 0 disables mining).
    #[command(name = "sweep-n")]
    SweepN(SweepArgs),
    /// The six-row embedding / hard-mining ablation.
    Ablate(AblateArgs),
    /// Accuracy of a saved head on one split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory.
    #[arg(long, env = "HATEHEAD_DATA_DIR")]
    data: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 10)]
    responses_per_prompt: usize,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 400)]
    validation: usize,
    #[arg(long, default_value_t = 400)]
    test: usize,
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    hard_fraction: f64,
    #[arg(long, default_value_t = 2.5)]
    hard_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    data: DataArg,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Sum,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    BestValidation,
    FinalEpoch,
}

#[derive(Args, Clone)]
struct FusionArgs {
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_image: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_text: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_descriptions: bool,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_emotions: bool,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    l2_normalize_blocks: bool,
}

impl FusionArgs {
    fn config(&self) -> FusionConfig {
        FusionConfig {
            use_image: self.use_image,
            use_text: self.use_text,
            use_descriptions: self.use_descriptions,
            use_emotions: self.use_emotions,
            l2_normalize_blocks: self.l2_normalize_blocks,
        }
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Nearest embeddings per mean vector; 0 disables the auxiliary loss.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    neighbor_gradients: bool,
    #[arg(long, value_enum, default_value = "mean")]
    reduction: ReductionArg,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    clamp_repulsion: bool,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value = "best-validation")]
    model_selection: SelectionArg,
    /// Keep per-batch loss breakdowns in the report.
    #[arg(long)]
    log_batches: bool,
    #[command(flatten)]
    fusion: FusionArgs,
}

impl TrainFlags {
    fn config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            mining: MiningConfig {
                n: self.n,
                alpha: self.alpha,
                neighbor_gradients: self.neighbor_gradients,
                reduction: match self.reduction {
                    ReductionArg::Sum => Reduction::Sum,
                    ReductionArg::Mean => Reduction::Mean,
                },
                clamp_repulsion: self.clamp_repulsion,
            },
            fusion: self.fusion.config(),
            seeds: self.seeds.clone(),
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            },
            model_selection: match self.model_selection {
                SelectionArg::BestValidation => ModelSelection::BestValidation,
                SelectionArg::FinalEpoch => ModelSelection::FinalEpoch,
            },
            log_batches: self.log_batches,
        };
        config.validate()?;
        if config.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    /// Metrics report destination.
    #[arg(long, default_value = "metrics.json")]
    out: PathBuf,
    /// Write each seed's selected head as `seed-<seed>.fmh` here.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
    ns: Vec<usize>,
    #[arg(long, default_value = "sweep-n.json")]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long, default_value = "ablate.json")]
    out: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    fusion: FusionArgs,
}

fn write_report(report: &ExperimentReport, out: &Path) -> Result<()> {
    fs::write(out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", report.render_table());
    println!("report written to {}", out.display());
    Ok(())
}

fn load(data: &DataArg) -> Result<hatehead::Dataset> {
    read_dataset(&data.data).with_context(|| format!("loading dataset {}", data.data.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        embedding_dim: args.embedding_dim,
        responses_per_prompt: args.responses_per_prompt,
        train: ClassCounts::balanced(args.train),
        validation: ClassCounts::balanced(args.validation),
        test: ClassCounts::balanced(args.test),
        separation: args.separation,
        noise: args.noise,
        hard_fraction: args.hard_fraction,
        hard_shift: args.hard_shift,
        seed: args.seed,
    };
    let ds = generate_synthetic(&spec)?;
    write_dataset(&ds.manifest, &ds.records, &args.out)
        .with_context(|| format!("writing dataset {}", args.out.display()))?;
    println!("{}", ds.summary());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.flags.config()?;
    let ds = load(&args.data)?;
    let name = args.data.data.display().to_string();
    let (report, params) = experiment::train_report_with_params(&ds, &name, &config)?;
    if let Some(dir) = &args.checkpoint_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (seed, p) in config.seeds.iter().zip(&params) {
            p.write_checkpoint(dir.join(format!("seed-{seed}.fmh")))?;
        }
    }
    let m = &report.cells[0].metrics;
    println!(
        "accuracy: {:.2} ± {:.2} over {} seeds",
        100.0 * m.mean_accuracy,
        100.0 * m.std_accuracy,
        m.per_seed.len()
    );
    fs::write(&args.out, report.to_json()).with_context(|| format!("writing {}", args.out.display()))?;
    println!("report written to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render_chain(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the error chain, dropping links already spelled out by their parent.
fn render_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if prev.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(args),
        Command::Inspect(args) => {
            let summary = load(&args.data)?.summary();
            if args.json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                println!("{summary}");
            }
            Ok(())
        }
        Command::Train(args) => train(args),
        Command::SweepN(args) => {
            let config = args.flags.config()?;
            let ds = load(&args.data)?;
            let (report, warnings) =
                experiment::sweep_n(&ds, &args.data.data.display().to_string(), &config, &args.ns)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            write_report(&report, &args.out)
        }
        Command::Ablate(args) => {
            let config = args.flags.config()?;
            let ds = load(&args.data)?;
            let report = experiment::ablate(&ds, &args.data.data.display().to_string(), &config, config.mining.n)?;
            write_report(&report, &args.out)
        }
        Command::Eval(args) => {
            let split: Split = args.split.parse()?;
            let ds = load(&args.data)?;
            let params = HeadParameters::read_checkpoint(&args.checkpoint)?;
            let acc = evaluate_split(&params, &ds, split, &args.fusion.config())?;
            println!("{split} accuracy: {:.2}%", 100.0 * acc);
            Ok(())
        }
    }
}

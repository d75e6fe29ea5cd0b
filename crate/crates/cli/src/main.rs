use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use volmil::config::{load_config, Overrides, Preset, OUTPUT_ENV};
use volmil::encoder::EncoderSpec;
use volmil::pipeline::{parse_stages, Error, Pipeline, Stage};

#[derive(Parser, Debug)]
#[command(name = "volmil", version, about = "Volumetric multiple-instance learning pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Modality preset (otls, microct, phantom).
    #[arg(long, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root. Falls back to the file value, then to $VOLMIL_OUTPUT.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EncoderKind {
    Moments,
    PooledDownsample,
    RandomProjection,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom cohort.
    Simulate,
    /// Tissue masks for every cohort volume.
    Segment,
    /// Patch grids from the masks.
    Patch,
    /// Feature bags from volumes and grids, or imported from elsewhere.
    Encode {
        /// Built-in encoder, with default parameters.
        #[arg(long, conflicts_with = "import")]
        encoder: Option<EncoderKind>,
        /// Directory of precomputed `<sample_id>.fbag` files.
        #[arg(long, requires = "dim")]
        import: Option<PathBuf>,
        /// Feature dimension of imported bags.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train on the whole cohort.
    Train,
    /// Predict every cohort sample with the trained model.
    Predict,
    /// Integrated-gradients tables and voxel heatmaps.
    Heatmap,
    /// Group patches by IG and relate the groups to predicted risk.
    IgGroups,
    /// Stratified cross-validation with metrics and survival curves.
    Evaluate,
    /// Repeated random partial-volume sampling with held-out fold models.
    PartialVolume,
    /// Per-plane risk traces with held-out fold models.
    PlaneVariability,
    /// Throughput of the preprocessing, encoding and training steps.
    Bench,
    /// Run several stages in order.
    Run {
        /// Comma-separated stages, or `all`.
        #[arg(long, default_value = "all", value_parser = parse_stages)]
        stages: std::vec::Vec<Stage>,
    },
    /// Print the resolved configuration.
    Config,
}

fn encoder_override(command: &Command) -> Option<EncoderSpec> {
    let Command::Encode { encoder, import, dim } = command else { return None };
    if let (Some(path), Some(dim)) = (import, dim) {
        return Some(EncoderSpec::External { path: path.clone(), dim: *dim });
    }
    encoder.map(|k| match k {
        EncoderKind::Moments => EncoderSpec::default(),
        EncoderKind::PooledDownsample => EncoderSpec::PooledDownsample { grid: [4, 8, 8] },
        EncoderKind::RandomProjection => EncoderSpec::RandomProjection { grid: [4, 8, 8], dim: 64, seed: 0 },
    })
}

fn stages(command: &Command) -> Vec<Stage> {
    match command {
        Command::Simulate => vec![Stage::Simulate],
        Command::Segment => vec![Stage::Segment],
        Command::Patch => vec![Stage::Patch],
        Command::Encode { .. } => vec![Stage::Encode],
        Command::Train => vec![Stage::Train],
        Command::Predict => vec![Stage::Predict],
        Command::Heatmap => vec![Stage::Heatmap],
        Command::IgGroups => vec![Stage::IgGroups],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::PartialVolume => vec![Stage::PartialVolume],
        Command::PlaneVariability => vec![Stage::PlaneVariability],
        Command::Bench => vec![Stage::Bench],
        Command::Run { stages } => stages.clone(),
        Command::Config => vec![],
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let g = cli.global;
    let ov = Overrides {
        preset: g.preset,
        seed: g.seed,
        output: g.output,
        workers: g.workers,
        encoder: encoder_override(&cli.command),
        sets: g.sets,
    };
    let cfg = load_config(g.config.as_deref(), &ov)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let pipeline = Pipeline::new(cfg);
    pipeline.run(&stages(&cli.command))?;
    log::info!("outputs under {}", pipeline.config().output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    log::debug!("default output root variable: {OUTPUT_ENV}");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

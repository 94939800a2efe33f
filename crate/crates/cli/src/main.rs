use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pyroemu_cli::commands::{cmd_evaluate, cmd_make_dataset, cmd_plot, cmd_predict, cmd_simulate, cmd_train, cmd_train_ae, cmd_worldgen};
use pyroemu_cli::{exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "pyroemu", version, about = "Synthetic fire simulation and neural emulator pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, applied after the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// `key=value` override, dotted keys address nested fields. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Grid point such as `512c_1d_32p`; defaults to the first in the grid.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 0)]
    t_start: usize,
    /// Defaults to the configured horizon.
    #[arg(long)]
    t_end: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenarios into `scenarios/`.
    Worldgen(Common),
    /// Simulate every scenario into `arrivals/`.
    Simulate(Common),
    /// Split fires, fit normalization statistics and draw training samples.
    MakeDataset(Common),
    /// Train and freeze the autoencoder.
    TrainAe(Common),
    /// Train every grid point and write `reports/results.csv`.
    Train(Common),
    /// Rescore saved checkpoints into `reports/evaluation.csv`.
    Evaluate(Common),
    /// Roll one fire forward and write its states and plots.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Scenario index in generation order.
        #[arg(long)]
        fire: usize,
    },
    /// Render contour panels and difference maps for the prediction fires.
    Plot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Worldgen(c) | Command::Simulate(c) | Command::MakeDataset(c) | Command::TrainAe(c) | Command::Train(c) | Command::Evaluate(c) => c,
            Command::Predict { common, .. } | Command::Plot { common, .. } => common,
        }
    }
}

fn run(cli: &Cli) -> pyroemu::Result<()> {
    let common = cli.command.common();
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(n) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| pyroemu::Error::Config(format!("cannot size the worker pool: {e}")))?;
    }
    let range = |m: &ModelArgs| (m.t_start, m.t_end.unwrap_or(cfg.t_max));
    match &cli.command {
        Command::Worldgen(_) => {
            let index = cmd_worldgen(&cfg)?;
            println!("{} scenarios", index.seeds.len());
        }
        Command::Simulate(_) => println!("{} arrival rasters", cmd_simulate(&cfg)?),
        Command::MakeDataset(_) => {
            let info = cmd_make_dataset(&cfg)?;
            println!("{} train / {} validation fires", info.split.train_fires.len(), info.split.val_fires.len());
        }
        Command::TrainAe(_) => println!("held-out MAE {:.4e}", cmd_train_ae(&cfg)?.held_out_mae),
        Command::Train(_) => report_rows(&cmd_train(&cfg)?),
        Command::Evaluate(_) => report_rows(&cmd_evaluate(&cfg)?),
        Command::Predict { model, fire, .. } => println!("{}", cmd_predict(&cfg, *fire, model.model.as_deref(), range(model))?.display()),
        Command::Plot { model, .. } => println!("{} images", cmd_plot(&cfg, model.model.as_deref(), range(model))?.len()),
    }
    Ok(())
}

fn report_rows(rows: &[pyroemu::training::GridRow]) {
    for r in rows {
        println!("{}: val Jaccard {:.3}, predictions {:?} [{}]", r.config, r.val_jaccard, r.predictions, r.status);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use udml::harness::{self, ExperimentConfig};
use udml::Result;

#[derive(Parser)]
#[command(name = "udml", version, about = "Unbiased dynamic multimodal fusion experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test split files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write its log, summary and checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory with split files; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fusion weights and accuracy while noise grows on one modality.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Finished training run directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Static, PE and UDML fusion under clean and corrupted test data.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Directory holding one run per strategy; missing runs are trained. Defaults to --out.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Estimated versus injected noise level for every grid level.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn config(c: &Common) -> Result<ExperimentConfig> {
    harness::load_config(c.config.as_deref(), c.seed, &c.set)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = config(&common)?;
            let data = harness::cmd_gen_data(&cfg, &common.out)?;
            println!(
                "wrote {} / {} / {} samples to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                common.out.display()
            );
        }
        Command::Train { common, data } => {
            let cfg = config(&common)?;
            let dataset = harness::load_data(&cfg, data.as_deref())?;
            let record = harness::cmd_train(&cfg, &dataset, &common.out)?;
            println!(
                "{} epochs, test acc {:.4}, macro-F1 {:.4}; outputs in {}",
                record.epochs.len(),
                record.test.accuracy,
                record.test.macro_f1,
                common.out.display()
            );
        }
        Command::Sweep { common, run, data } => {
            let cfg = config(&common)?;
            let dataset = harness::run_data(&run, data.as_deref())?;
            let rows = harness::cmd_sweep(&cfg.commands, &run, &dataset, &common.out)?;
            println!("{} sweep rows written to {}", rows.len(), common.out.display());
        }
        Command::Compare { common, run, data } => {
            let cfg = config(&common)?;
            let dataset = harness::load_data(&cfg, data.as_deref())?;
            let root = run.unwrap_or_else(|| common.out.clone());
            let rows = harness::cmd_compare(&cfg, &root, &dataset, &common.out)?;
            println!("{} comparison rows written to {}", rows.len(), common.out.display());
        }
        Command::Calibrate { common, run, data } => {
            let cfg = config(&common)?;
            let dataset = harness::run_data(&run, data.as_deref())?;
            let rows = harness::cmd_calibrate(&cfg.commands, &run, &dataset, &common.out)?;
            println!("{} calibration rows written to {}", rows.len(), common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use aff::ablate::{ablate, Study};
use aff::config::Config;
use aff::pipeline::{embed, eval_run, gen_data, train_run, Side};
use aff::Result;
use aff_core::retrieval::Protocol;
use aff_core::train::TrainMode;
use clap::{Parser, Subcommand, ValueEnum};

/// Asymmetric feature fusion on synthetic multi-family features.
#[derive(Parser)]
#[command(name = "aff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mixer and the query encoder.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Embed the query or gallery split with a trained checkpoint.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        side: SideArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one retrieval protocol.
    Eval {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long)]
        data: PathBuf,
        /// Training output directory; not needed for `ensemble`.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run an ablation study over several seeds.
    Ablate {
        /// mixer-variants, feature-combos, noise, momentum, train-mode or
        /// decoupling.
        study: String,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the complete default configuration as TOML.
    DumpDefaults,
    /// Check a configuration file.
    Validate { path: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    TwoStage,
    Coupled,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Query,
    Gallery,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Symmetric,
    Asymmetric,
    Ensemble,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = Config::load_or_default(config.as_deref())?;
            let info = gen_data(&cfg, &out)?;
            println!("dataset checksum {:08x}", info.checksum);
        }
        Command::Train {
            config,
            data,
            out,
            mode,
        } => {
            let cfg = Config::load_or_default(config.as_deref())?;
            let mode = mode.map(|m| match m {
                ModeArg::Joint => TrainMode::Joint,
                ModeArg::TwoStage => TrainMode::TwoStage,
                ModeArg::Coupled => TrainMode::Coupled,
            });
            let report = train_run(&cfg, &data, &out, mode)?;
            if let Some(last) = report.epochs.last() {
                let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "trained {} steps; final epoch disc {} comp {}",
                    report.steps,
                    show(last.disc),
                    show(last.comp)
                );
            }
        }
        Command::Embed {
            model,
            data,
            side,
            out,
        } => {
            let side = match side {
                SideArg::Query => Side::Query,
                SideArg::Gallery => Side::Gallery,
            };
            let crc = embed(&model, &data, side, &out)?;
            println!("embeddings checksum {crc:08x}");
        }
        Command::Eval {
            protocol,
            data,
            models,
            out,
            config,
        } => {
            let cfg = Config::load_or_default(config.as_deref())?;
            let protocol = match protocol {
                ProtocolArg::Symmetric => Protocol::Symmetric,
                ProtocolArg::Asymmetric => Protocol::Asymmetric,
                ProtocolArg::Ensemble => Protocol::Ensemble,
            };
            let report = eval_run(&cfg, protocol, &data, models.as_deref(), &out)?;
            println!("{} mAP {:.4}", report.protocol, report.map);
        }
        Command::Ablate {
            study,
            seeds,
            out,
            config,
        } => {
            let study = Study::from_name(&study)?;
            let cfg = Config::load_or_default(config.as_deref())?;
            let table = ablate(&cfg, study, seeds, &out)?;
            for r in &table.rows {
                let cells: Vec<String> = table
                    .metrics
                    .iter()
                    .zip(&r.values)
                    .filter_map(|(m, v)| v.as_ref().map(|s| format!("{m} {:.4} ± {:.4}", s.mean, s.std)))
                    .collect();
                println!("{:<28} {}", r.variant, cells.join("  "));
            }
        }
        Command::Config { action } => match action {
            ConfigAction::DumpDefaults => print!("{}", Config::default().to_toml()),
            ConfigAction::Validate { path } => {
                Config::load(&path)?;
                println!("{} is valid", path.display());
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors by itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

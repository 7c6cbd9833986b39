use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use otta::harness::{self, ExperimentConfig, RunMode};
use otta::Error;

#[derive(Parser)]
#[command(name = "otta", version, about = "Online test-time adaptation of a 3D pose regressor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the regressor on labelled source data and write a checkpoint.
    Pretrain(Common),
    /// Generate the synthetic test streams.
    GenStreams(Common),
    /// Adapt over the streams in one mode and write per-frame results.
    Run(Common),
    /// Run the ablation matrix over several seeds.
    Ablate(Common),
    /// Render tables and binned data from results in the output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds stream generation, initialisation, pretraining and adaptation.
    #[arg(long)]
    seed: Option<u64>,
    /// none, single, pervideo or full.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory, `out` if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> otta::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(m) = &self.mode {
            cfg.mode = m.parse::<RunMode>()?;
        }
        if let Some(o) = &self.out {
            cfg.paths.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cmd: &Command) -> otta::Result<()> {
    match cmd {
        Command::Pretrain(c) => {
            let cfg = c.config()?;
            let o = harness::cmd_pretrain(&cfg)?;
            println!(
                "checkpoint {} (validation MPJPE {:.2} mm after {} epochs)",
                cfg.checkpoint_path().display(),
                o.best_val_mpjpe_mm,
                o.log.len()
            );
        }
        Command::GenStreams(c) => {
            let path = harness::cmd_gen_streams(&c.config()?)?;
            println!("streams {}", path.display());
        }
        Command::Run(c) => {
            let cfg = c.config()?;
            let report = harness::cmd_run(&cfg)?;
            print!("{}", report.summary_table(&format!("mode {}", cfg.mode.name())));
        }
        Command::Ablate(c) => {
            let cfg = c.config()?;
            let means = harness::cmd_ablate(&cfg)?;
            print!("{}", harness::report::ablation_tables(&means));
        }
        Command::Report(c) => {
            let path = harness::cmd_report(&c.config()?)?;
            println!("report {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::MissingInput(_) | Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

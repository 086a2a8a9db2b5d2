use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use packgrad_cli::config::{self, CliError, FailKind, Overrides, TrainConfig};
use packgrad_cli::{report, train};

#[derive(Parser)]
#[command(name = "packgrad", version, about = "Activation-compressed training harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write per-step metrics as CSV.
    Train(JobArgs),
    /// Price the saved contexts of one training step.
    Memreport(JobArgs),
    /// Train across bit widths and levels, recording variance and accuracy.
    Sweep(JobArgs),
    /// Decompose gradient variance by noise source.
    ProfileVariance(JobArgs),
    /// Summarize how uneven group ranges and sensitivities are.
    Heterogeneity(JobArgs),
}

#[derive(Args)]
struct JobArgs {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Compression level override: L0, L1, L2, L2.5 or L3.
    #[arg(long)]
    level: Option<String>,
    /// Average bits override.
    #[arg(long)]
    bits: Option<f64>,
    /// Quantization group size override.
    #[arg(long)]
    group_size: Option<usize>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient magnitude estimator override: stale or ema.
    #[arg(long)]
    estimator: Option<String>,
    /// Decay override for the ema estimator.
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Write the primary CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl JobArgs {
    fn load(&self) -> Result<TrainConfig, CliError> {
        let mut cfg = config::parse_file(&self.config)?;
        let o = Overrides {
            level: self.level.as_deref().map(config::Level::parse).transpose()?,
            bits: self.bits,
            group_size: self.group_size,
            seed: self.seed,
            estimator: self.estimator.as_deref().map(config::parse_estimator).transpose()?,
            ema_decay: self.ema_decay,
        };
        o.apply(&mut cfg)?;
        Ok(cfg)
    }

    /// Writes the command's CSV to --out, or to stdout when no path was
    /// given. Returns true when stdout is taken by the CSV.
    fn emit(&self, csv: &str) -> Result<bool, CliError> {
        match &self.out {
            Some(path) => {
                fs::write(path, csv).map_err(|e| CliError {
                    kind: FailKind::Run,
                    msg: format!("{}: {e}", path.display()),
                })?;
                Ok(false)
            }
            None => {
                print!("{csv}");
                Ok(true)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(args) => {
            let cfg = args.load()?;
            let out = train::train(&cfg)?;
            let csv_on_stdout = args.emit(&train::metrics_csv(&out.rows))?;
            let last = out.final_row();
            let mut summary = format!(
                "{} steps in {:.3}s, final loss {:.6}, eval accuracy {:.4}, avg bits {:.4}\n",
                last.step, out.wall_seconds, last.train_loss, last.eval_accuracy, last.avg_bits
            );
            if !out.stage2_spend.is_empty() {
                let (spent, ceiling) = out.stage2_spend.last().unwrap();
                summary.push_str(&format!(
                    "last reallocation spent {spent} of {ceiling} weighted bits\n"
                ));
            }
            if csv_on_stdout {
                eprint!("{summary}");
            } else {
                print!("{summary}");
            }
        }
        Cmd::Memreport(args) => {
            let cfg = args.load()?;
            let r = report::memreport(&cfg)?;
            let csv_on_stdout = args.emit(&report::memreport_csv(&r))?;
            let summary = report::memreport_summary(&r);
            if csv_on_stdout {
                eprint!("{summary}");
            } else {
                print!("{summary}");
            }
        }
        Cmd::Sweep(args) => {
            let cfg = args.load()?;
            let rows = report::sweep(&cfg)?;
            args.emit(&report::sweep_csv(&rows))?;
        }
        Cmd::ProfileVariance(args) => {
            let cfg = args.load()?;
            let t = report::profile_variance(&cfg)?;
            args.emit(&report::variance_csv(&t))?;
        }
        Cmd::Heterogeneity(args) => {
            let cfg = args.load()?;
            let rows = report::heterogeneity(&cfg)?;
            args.emit(&report::heterogeneity_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(match e.kind {
                FailKind::Config => 2,
                FailKind::Data => 3,
                FailKind::Run => 1,
            })
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mno_cli::{cmd_eval, cmd_gen_data, cmd_spectrum, cmd_train, cmd_verify, init_threads, CliError, CliResult, RunConfig, SplitSel, VerifyOptions};

#[derive(Parser)]
#[command(name = "mno", version, about = "State-space mixer neural operators: data, training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides the config's seed everywhere.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: MNO_THREADS or all logical cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file, its split manifest and provenance.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file (default: <out>/dataset.mnod).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitSel::Test)]
        split: SplitSel,
    },
    /// Fourier depth profile of a checkpoint's feature maps.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of test samples to average over.
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Run the property suite and print one JSON verdict per property.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
}

fn run_config(common: &Common) -> CliResult<RunConfig> {
    let path = common.config.as_ref().ok_or_else(|| CliError::config("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> CliResult<PathBuf> {
    common
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .ok_or_else(|| CliError::config("no output directory: pass --out or set output_dir"))
}

/// Optional config for commands that only need it for the output directory.
fn optional_config(common: &Common) -> CliResult<Option<RunConfig>> {
    common.config.as_ref().map(|_| run_config(common)).transpose()
}

fn print_json<S: serde::Serialize>(value: &S) {
    println!("{}", serde_json::to_string(value).unwrap_or_default());
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common } => {
            init_threads(common.threads)?;
            let cfg = run_config(&common)?;
            let out = out_dir(&common, Some(&cfg))?;
            print_json(&cmd_gen_data(&cfg, &out)?);
        }
        Command::Train { common, data, checkpoint } => {
            init_threads(common.threads)?;
            let cfg = run_config(&common)?;
            let out = out_dir(&common, Some(&cfg))?;
            let report = cmd_train(&cfg, &out, data.as_deref(), checkpoint.as_deref())?;
            println!("{}", report.train.summary_json());
            println!("{}", report.test.summary_json());
        }
        Command::Eval { common, checkpoint, data, split } => {
            init_threads(common.threads)?;
            let cfg = optional_config(&common)?;
            let out = out_dir(&common, cfg.as_ref())?;
            println!("{}", cmd_eval(&checkpoint, &data, split, &out)?.summary_json());
        }
        Command::Spectrum { common, checkpoint, data, n } => {
            init_threads(common.threads)?;
            let cfg = optional_config(&common)?;
            let out = out_dir(&common, cfg.as_ref())?;
            let report = cmd_spectrum(&checkpoint, &data, n, &out)?;
            print_json(&report.depth);
        }
        Command::Verify { common, corrupt_adjoint } => {
            init_threads(common.threads)?;
            let (report, res) = cmd_verify(VerifyOptions { corrupt_adjoint });
            for v in &report.properties {
                print_json(v);
            }
            if let Some(out) = common.out.as_deref() {
                write_verify(out, &report)?;
            }
            res?;
        }
    }
    Ok(())
}

fn write_verify(out: &Path, report: &mno_cli::VerifyReport) -> CliResult<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("verify.json"), serde_json::to_string(report)?)?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mno: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `fedsfr` command-line harness.
//!
//! Exit codes: 0 on success, 1 on invalid input (arguments, config, data
//! files), 2 on runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedsfr::config::ExperimentConfig;
use fedsfr::federation::run_experiment;
use fedsfr::harness::{diagnostics, selftest, summarize, SummaryRow};
use fedsfr::metrics::{write_csv, write_jsonl};
use fedsfr::Error;

#[derive(Parser)]
#[command(name = "fedsfr", version, about = "Federated learning with server-side feature reconstruction, simulated")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.jsonl, metrics.csv and model.fsfr.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for client training (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run several experiments and write a joint summary.csv.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Contraction, error-memory bound and surrogate diagnostics without training.
    Diag {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Check the analytic worked examples.
    Selftest,
    /// Print the desk-scale default config as JSON.
    DefaultConfig,
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let invalid = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::Format(_) | Error::Json(_))
            )
        });
        if invalid {
            Failure::Invalid(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ExperimentConfig::from_json(&text).with_context(|| format!("config {}", path.display()))?;
    for w in cfg.warnings() {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(cfg)
}

fn run_one(cfg: &ExperimentConfig, name: &str, out: &Path, threads: Option<usize>) -> anyhow::Result<SummaryRow> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let trace = run_experiment(cfg, threads)?;
    let mut jsonl = fs::File::create(out.join("metrics.jsonl"))?;
    write_jsonl(&trace.rounds, &mut jsonl)?;
    write_csv(&trace.rounds, fs::File::create(out.join("metrics.csv"))?)?;
    trace.final_state.global.save_checkpoint(&out.join("model.fsfr"))?;
    Ok(summarize(name, cfg, &trace))
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_row(r: &SummaryRow) {
    println!(
        "{}: mode={} scheme={} T={} final_psnr={:.3} dB psnr_std={} improvement={} final_loss={}",
        r.name,
        r.mode,
        r.scheme,
        r.rounds,
        r.final_psnr_db,
        fmt(r.psnr_std_db),
        fmt(r.improvement_ratio),
        fmt(r.final_loss)
    );
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { config, out, threads } => {
            let cfg = load_config(&config).map_err(Failure::Invalid)?;
            let name = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let row = run_one(&cfg, &name, &out, threads)?;
            print_row(&row);
        }
        Command::Compare { configs, out, threads } => {
            let cfgs = configs.iter().map(|p| load_config(p)).collect::<anyhow::Result<Vec<_>>>().map_err(Failure::Invalid)?;
            let mut rows = Vec::with_capacity(cfgs.len());
            for (i, (path, cfg)) in configs.iter().zip(&cfgs).enumerate() {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let name = format!("{i}-{stem}");
                let row = run_one(cfg, &stem, &out.join(&name), threads)?;
                print_row(&row);
                rows.push(row);
            }
            let mut w = csv::Writer::from_path(out.join("summary.csv")).context("writing summary.csv")?;
            for r in &rows {
                w.serialize(r).context("writing summary.csv")?;
            }
            w.flush().context("writing summary.csv")?;
        }
        Command::Diag { config, trials } => {
            let cfg = load_config(&config).map_err(Failure::Invalid)?;
            let d = diagnostics(&cfg, trials).map_err(anyhow::Error::from)?;
            println!("{}", serde_json::to_string_pretty(&d).map_err(anyhow::Error::from)?);
        }
        Command::Selftest => {
            let checks = selftest();
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Err(Failure::Runtime(anyhow::anyhow!("{failed} self-test checks failed")));
            }
        }
        Command::DefaultConfig => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{}", ExperimentConfig::desk().to_json()).map_err(anyhow::Error::from)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

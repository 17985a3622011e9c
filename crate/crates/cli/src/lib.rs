//! `atrseq` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! verification failure.
//!
//! # Output files
//!
//! `train` writes into the run directory:
//! - `config.resolved`: every config key as `key = value`, after precedence.
//! - `metrics.jsonl`: one JSON object per line, either
//!   `{"step","epoch","lr","loss","grad_norm"}` (plus `"skipped": true` when a
//!   non-finite step was dropped) or `{"epoch","metric","value"}`.
//! - `checkpoints/{epoch-N,best,last}.ckpt`, `src.vocab`, `tgt.vocab`.
//! - `manifest.json`: model shape, parameter and matmul counts, corpus sizes
//!   and the final held-out evaluation.
//!
//! `translate` writes one line per input line (empty in, empty out).
//!
//! `analyze` writes into its output directory:
//! - `attribution.json`:
//!   `{"schema": "atrseq.analysis/1", "level": "first"|"second",
//!     "precision": "f64", "max_residual": f64, "pearson_r": f64,
//!     "sequences": [{"index", "source": [str], "output": [str],
//!     "forced": bool, "links": [[t, k]], "weights": [[f64]],
//!     "attention": [[f64]], "residual": f64}]}`
//!   where `weights[t][k]` is the mean |g| of output position `t` on the
//!   word fed at position `k`, and each link joins `t` to its strongest
//!   earlier `k` (positions are 0-based).
//! - `gate_stats.csv`: `position,input_mean,forget_mean,count`.
//! - `surface.csv`: `x,y,value` for `σ(x+y) − σ(x−y)`.
//!
//! `bench` writes `bench.json` (environment, spec and per-cell results for
//! each dimension) and `bench.csv` (one row per dimension and cell).

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Arg, ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub mod analyze;
pub mod bench;
pub mod config;
pub mod gradcheck;
pub mod train;
pub mod translate;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] atrseq::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(atrseq::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "atrseq", version, about = "Twin-gated recurrent encoder-decoder: train, translate, analyze, bench, gradcheck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder-decoder; every config key is also a flag.
    Train(TrainArgs),
    /// Decode a file of source sentences with beam search.
    Translate(translate::TranslateArgs),
    /// Export rollout attribution, gate statistics and the twin-gate surface.
    Analyze(analyze::AnalyzeArgs),
    /// Time cell steps and sequence loops at equal dimensions.
    Bench(bench::BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(gradcheck::GradcheckArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from `<run_dir>/checkpoints/last.ckpt`.
    #[arg(long)]
    resume: bool,
}

fn command() -> clap::Command {
    Cli::command().mut_subcommand("train", |mut c| {
        for (key, default, help) in config::KEYS {
            let help = if default.is_empty() { help.to_string() } else { format!("{help} [default: {default}]") };
            c = c.arg(Arg::new(*key).long(config::flag_name(key)).value_name("VALUE").action(ArgAction::Set).overrides_with(*key).help(help));
        }
        c
    })
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Help and version requests print and return `Ok`.
pub fn run<I, S>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;
    match cli.command {
        Command::Train(args) => {
            let sub = matches.subcommand_matches("train").expect("train matched");
            let flags: BTreeMap<String, String> =
                config::KEYS.iter().filter_map(|(k, _, _)| sub.get_one::<String>(k).map(|v| (k.to_string(), v.clone()))).collect();
            let cfg = config::RunConfig::resolve(args.config.as_deref(), &flags)?;
            let summary = train::train(&cfg, args.resume)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Translate(args) => {
            let report = translate::translate(&args)?;
            eprintln!(
                "translated {} lines ({} words) in {:.3}s, {:.1} words/s",
                report.lines, report.words, report.seconds, report.words_per_sec
            );
        }
        Command::Analyze(args) => {
            let report = analyze::analyze(&args)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Bench(args) => {
            let csv = bench::bench(&args)?;
            print!("{csv}");
        }
        Command::Gradcheck(args) => {
            let out = gradcheck::gradcheck(&args)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
    }
    Ok(())
}

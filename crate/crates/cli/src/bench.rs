//! `atrseq bench`

use std::fs;
use std::path::PathBuf;

use atrseq::bench::{run_bench, BenchReport, BenchSpec, MIN_REPS, MIN_WARMUP};
use atrseq::cells::CellKind;
use clap::Args;
use serde::Serialize;

use crate::train::write_json;
use crate::CliError;

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// Comma-separated hidden sizes; input size matches hidden size.
    #[arg(long, default_value = "1000", value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Comma-separated cells.
    #[arg(long, default_value = "atr,gru,lstm,ran,srnn", value_delimiter = ',')]
    pub cells: Vec<String>,
    #[arg(long, default_value_t = MIN_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = MIN_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Steps per sequence for the train-like and decode-like loops.
    #[arg(long, default_value_t = 20)]
    pub seq_len: usize,
    /// Time single steps only.
    #[arg(long)]
    pub no_loops: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "bench")]
    pub out: PathBuf,
}

/// Matrix products per step, written out independently of the cells.
pub fn expected_matmuls(kind: CellKind, input_dim: usize, hidden_dim: usize) -> u64 {
    match kind {
        CellKind::Atr | CellKind::Srnn => 2,
        CellKind::Gru => 6,
        CellKind::Lstm => 8,
        CellKind::Ran if input_dim == hidden_dim => 4,
        CellKind::Ran => 5,
    }
}

#[derive(Debug, Serialize)]
struct DimRun {
    dim: usize,
    /// Median step latency ordering ATR < GRU < LSTM, when all three ran.
    atr_gru_lstm_ordered: Option<bool>,
    report: BenchReport,
}

pub fn bench(args: &BenchArgs) -> Result<String, CliError> {
    if args.reps < MIN_REPS || args.warmup < MIN_WARMUP {
        return Err(CliError::Usage(format!("bench needs --reps ≥ {MIN_REPS} and --warmup ≥ {MIN_WARMUP}, got {} and {}", args.reps, args.warmup)));
    }
    if args.dims.is_empty() || args.dims.contains(&0) {
        return Err(CliError::Usage("--dims must list positive sizes".into()));
    }
    let kinds = args.cells.iter().map(|c| c.parse::<CellKind>().map_err(|e| CliError::Usage(e.to_string()))).collect::<Result<Vec<_>, _>>()?;
    let mut runs = Vec::new();
    let mut csv = String::new();
    for &dim in &args.dims {
        let spec = BenchSpec {
            hidden_dim: dim,
            input_dim: dim,
            batch: args.batch,
            seq_len: args.seq_len,
            warmup: args.warmup,
            reps: args.reps,
            loops: !args.no_loops,
            seed: args.seed,
        };
        let report = run_bench(&kinds, &spec)?;
        for c in &report.cells {
            let want = expected_matmuls(c.cell, dim, dim);
            if c.matmuls_per_step != want {
                return Err(CliError::Verification(format!("{} performs {} matmuls per step, expected {want}", c.cell, c.matmuls_per_step)));
            }
        }
        let median = |k| report.cell(k).map(|c| c.step.median_us);
        let ordered = match (median(CellKind::Atr), median(CellKind::Gru), median(CellKind::Lstm)) {
            (Some(a), Some(g), Some(l)) => Some(a < g && g < l),
            _ => None,
        };
        for (n, line) in report.to_csv().lines().enumerate() {
            match (n, csv.is_empty()) {
                (0, true) => csv.push_str(&format!("dim,{line}\n")),
                (0, false) => {}
                _ => csv.push_str(&format!("{dim},{line}\n")),
            }
        }
        runs.push(DimRun { dim, atr_gru_lstm_ordered: ordered, report });
    }
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("bench.json"), &runs)?;
    fs::write(args.out.join("bench.csv"), &csv)?;
    Ok(csv)
}

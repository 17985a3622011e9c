//! `atrseq gradcheck`

use atrseq::cells::CellKind;
use atrseq::gradcheck::{check_cell, check_seq2seq, GradCheckReport};
use clap::Args;
use serde::Serialize;

use crate::CliError;

pub const VARIANTS: &[&str] = &["atr", "gru", "lstm", "ran", "srnn", "seq2seq", "all"];

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// atr, gru, lstm, ran, srnn, seq2seq or all.
    pub variant: String,
    #[arg(long, default_value_t = 4)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub input: usize,
    /// Embedding size for seq2seq.
    #[arg(long, default_value_t = 4)]
    pub embed: usize,
    /// Unrolled steps for single cells.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Cell used inside seq2seq.
    #[arg(long, default_value = "atr")]
    pub cell: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub pass: bool,
    pub worst_rel_err: f64,
    pub report: GradCheckReport,
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<Vec<VariantResult>, CliError> {
    let variant = args.variant.to_ascii_lowercase();
    if !VARIANTS.contains(&variant.as_str()) {
        return Err(CliError::Usage(format!("unknown gradcheck variant '{}' (valid: {})", args.variant, VARIANTS.join(", "))));
    }
    let seq_cell: CellKind = args.cell.parse().map_err(|e: atrseq::Error| CliError::Usage(e.to_string()))?;
    let names: Vec<String> = if variant == "all" { VARIANTS[..6].iter().map(|s| s.to_string()).collect() } else { vec![variant] };
    let mut out = Vec::new();
    for name in names {
        let report = if name == "seq2seq" {
            check_seq2seq(seq_cell, args.embed, args.hidden, args.seed)?
        } else {
            let kind: CellKind = name.parse()?;
            check_cell(kind, args.input, args.hidden, args.steps, args.seed)?
        };
        out.push(VariantResult { variant: name, pass: report.passes(args.tol), worst_rel_err: report.worst_rel_err, report });
    }
    if let Some(bad) = out.iter().find(|r| !r.pass) {
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Err(CliError::Verification(format!("{}: worst relative error {:e} ≥ {:e}", bad.variant, bad.worst_rel_err, args.tol)));
    }
    Ok(out)
}

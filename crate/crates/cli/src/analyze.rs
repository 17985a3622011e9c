//! `atrseq analyze`

use std::fs;
use std::path::PathBuf;

use atrseq::attribution::{decoder_rollout, dependency_links, gate_correlation, twin_gate_surface, DecoderLevel};
use atrseq::cells::CellKind;
use atrseq::checkpoint::Checkpoint;
use atrseq::corpus::{Vocab, EOS, RESERVED};
use atrseq::seq2seq::trace_decode;
use atrseq::tensor::Tensor;
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::train::write_json;
use crate::CliError;

pub const SCHEMA: &str = "atrseq.analysis/1";

/// Rollout must rebuild 64-bit decoder states to this accuracy.
pub const RESIDUAL_LIMIT: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    First,
    Second,
}

#[derive(Args, Debug, Clone)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Reference targets to force instead of decoding greedily.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = "analysis")]
    pub out: PathBuf,
    /// Decoder cell whose states are attributed and whose gates are averaged.
    #[arg(long, value_enum, default_value_t = Level::Second)]
    pub level: Level,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    pub surface_lo: f64,
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    pub surface_hi: f64,
    #[arg(long, default_value_t = 41)]
    pub surface_res: usize,
}

#[derive(Debug, Serialize)]
pub struct SequenceAnalysis {
    pub index: usize,
    pub source: Vec<String>,
    pub output: Vec<String>,
    pub forced: bool,
    pub links: Vec<(usize, usize)>,
    pub weights: Vec<Vec<f64>>,
    pub attention: Vec<Vec<f64>>,
    pub residual: f64,
}

#[derive(Debug, Serialize)]
pub struct Analysis {
    pub schema: &'static str,
    pub level: Level,
    pub precision: &'static str,
    pub max_residual: f64,
    pub pearson_r: f64,
    pub sequences: Vec<SequenceAnalysis>,
}

/// What `analyze` prints: the summary without per-sequence detail.
#[derive(Debug, Serialize)]
pub struct AnalyzeSummary {
    pub sequences: usize,
    pub max_residual: f64,
    pub pearson_r: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn analyze(args: &AnalyzeArgs) -> Result<AnalyzeSummary, CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    if ckpt.meta.model.cell != CellKind::Atr {
        return Err(CliError::Usage(format!("analyze needs an ATR checkpoint, got {}", ckpt.meta.model.cell)));
    }
    let model = ckpt.model::<f64>(None)?;
    let src_vocab = Vocab::from_words(ckpt.meta.src_vocab.clone())?;
    let tgt_vocab = Vocab::from_words(ckpt.meta.tgt_vocab.clone())?;
    let sources = fs::read_to_string(&args.input)?;
    let references = args.reference.as_ref().map(fs::read_to_string).transpose()?;
    let ref_lines: Option<Vec<&str>> = references.as_deref().map(|r| r.lines().collect());
    let src_lines: Vec<&str> = sources.lines().collect();
    if let Some(r) = &ref_lines {
        if r.len() != src_lines.len() {
            return Err(CliError::Usage(format!("{} source lines but {} reference lines", src_lines.len(), r.len())));
        }
    }
    let level = match args.level {
        Level::First => DecoderLevel::First,
        Level::Second => DecoderLevel::Second,
    };

    let mut sequences = Vec::new();
    let mut gate_traces = Vec::new();
    for (index, line) in src_lines.iter().enumerate() {
        let source: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if source.is_empty() {
            continue;
        }
        let target = ref_lines.as_ref().map(|r| {
            let mut ids = tgt_vocab.encode(&r[index].split_whitespace().filter(|w| *w != RESERVED[EOS]).collect::<Vec<_>>());
            ids.push(EOS);
            ids
        });
        let tr = trace_decode(&model, &src_vocab.encode(&source), target.as_deref())?;
        let (full, words) = decoder_rollout(&tr.word_level, &tr.context_level, Some(&tr.init_state), level)?;
        let chain: Vec<Tensor<f64>> = tr
            .word_states
            .iter()
            .zip(&tr.context_states)
            .flat_map(|(a, b)| [a, b])
            .map(|v| Tensor::from_f64(&[1, v.len()], v))
            .collect::<atrseq::Result<_>>()?;
        let weights = words.reduced();
        sequences.push(SequenceAnalysis {
            index,
            source,
            output: tgt_vocab.decode(&tr.tokens),
            forced: target.is_some(),
            links: dependency_links(&weights),
            weights,
            attention: tr.attention,
            residual: full.max_residual(&chain),
        });
        gate_traces.push(match args.level {
            Level::First => tr.word_level,
            Level::Second => tr.context_level,
        });
    }
    if sequences.is_empty() {
        return Err(CliError::Usage(format!("{} has no non-empty lines", args.input.display())));
    }
    let stats = gate_correlation(&gate_traces)?;
    let surface = twin_gate_surface(args.surface_lo, args.surface_hi, args.surface_res)?;
    let max_residual = sequences.iter().map(|s| s.residual).fold(0.0, f64::max);

    fs::create_dir_all(&args.out)?;
    let outputs = vec![args.out.join("attribution.json"), args.out.join("gate_stats.csv"), args.out.join("surface.csv")];
    let n = sequences.len();
    let analysis = Analysis { schema: SCHEMA, level: args.level, precision: "f64", max_residual, pearson_r: stats.pearson_r, sequences };
    write_json(&outputs[0], &analysis)?;
    fs::write(&outputs[1], stats.to_csv())?;
    fs::write(&outputs[2], surface.to_csv())?;
    if max_residual >= RESIDUAL_LIMIT {
        return Err(CliError::Verification(format!("rollout residual {max_residual:e} exceeds {RESIDUAL_LIMIT:e}")));
    }
    Ok(AnalyzeSummary { sequences: n, max_residual, pearson_r: stats.pearson_r, outputs })
}

//! `atrseq translate`

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use atrseq::checkpoint::Checkpoint;
use atrseq::corpus::Vocab;
use atrseq::seq2seq::{beam_search, Seq2SeqModel, DEFAULT_BEAM};
use clap::Args;
use serde::Serialize;

use crate::CliError;

#[derive(Args, Debug, Clone)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One whitespace-tokenized source sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BEAM)]
    pub beam: usize,
    /// Decisions per sentence (default: twice the source length plus 5).
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Worker threads; output order always follows the input.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Serialize)]
pub struct TranslateReport {
    pub lines: usize,
    pub words: usize,
    pub seconds: f64,
    pub words_per_sec: f64,
}

fn translate_line(model: &Seq2SeqModel<f32>, src: &Vocab, tgt: &Vocab, line: &str, beam: usize, max_len: Option<usize>) -> Result<String, CliError> {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.is_empty() {
        return Ok(String::new());
    }
    let hyp = beam_search(model, &src.encode(&tokens), beam, max_len)?;
    Ok(tgt.decode(&hyp.tokens).join(" "))
}

pub fn translate(args: &TranslateArgs) -> Result<TranslateReport, CliError> {
    if args.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    if args.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = ckpt.model::<f32>(None)?;
    let src = Vocab::from_words(ckpt.meta.src_vocab.clone())?;
    let tgt = Vocab::from_words(ckpt.meta.tgt_vocab.clone())?;
    let text = fs::read_to_string(&args.input)?;
    let lines: Vec<&str> = text.lines().collect();

    let started = Instant::now();
    let chunk = lines.len().div_ceil(args.threads).max(1);
    let outputs: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = lines
            .chunks(chunk)
            .map(|part| {
                let (model, src, tgt) = (&model, &src, &tgt);
                s.spawn(move || part.iter().map(|l| translate_line(model, src, tgt, l, args.beam, args.max_len)).collect::<Result<Vec<_>, _>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("translation worker panicked")).collect::<Result<Vec<Vec<_>>, _>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let seconds = started.elapsed().as_secs_f64();

    let mut body = outputs.join("\n");
    if !outputs.is_empty() {
        body.push('\n');
    }
    fs::write(&args.output, body)?;
    let words = outputs.iter().map(|l| l.split_whitespace().count()).sum();
    Ok(TranslateReport { lines: outputs.len(), words, seconds, words_per_sec: if seconds > 0.0 { words as f64 / seconds } else { 0.0 } })
}

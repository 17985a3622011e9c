//! `atrseq train`

use std::fs;
use std::path::Path;

use atrseq::bench::cell_param_count;
use atrseq::cells::count_step_matmuls_at;
use atrseq::checkpoint::Checkpoint;
use atrseq::corpus::{encode_corpus, gen_synthetic, read_parallel, IngestReport, ParallelCorpus, Vocab};
use atrseq::seq2seq::ModelConfig;
use atrseq::training::{Evaluation, FitOptions, MetricLog, TrainConfig, Trainer};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub param_count: usize,
    /// Weights of one recurrent cell fed by embeddings (no biases).
    pub cell_param_count: usize,
    pub matmuls_per_step: u64,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub ingest: Option<IngestReport>,
    pub resumed_from_epoch: Option<usize>,
    pub epochs_run: usize,
    pub steps: u64,
    pub final_eval: Option<Evaluation>,
    pub reached_target: bool,
}

fn load_corpora(cfg: &RunConfig) -> Result<(ParallelCorpus, ParallelCorpus, Option<IngestReport>), CliError> {
    match (cfg.path("train_src"), cfg.path("train_tgt")) {
        (Some(src), Some(tgt)) => {
            let (train, report) = read_parallel(&src, &tgt)?;
            let valid = match (cfg.path("valid_src"), cfg.path("valid_tgt")) {
                (Some(s), Some(t)) => read_parallel(&s, &t)?.0,
                (None, None) => ParallelCorpus::default(),
                _ => return Err(CliError::Usage("valid_src and valid_tgt must be given together".into())),
            };
            Ok((train, valid, Some(report)))
        }
        (None, None) => {
            let valid_pairs = cfg.usize("valid_pairs")?;
            let total = cfg.usize("train_pairs")? + valid_pairs;
            let seed = cfg.train()?.seed;
            let corpus = gen_synthetic(cfg.task()?, cfg.usize("vocab_size")?, cfg.usize("min_len")?, cfg.usize("max_src_len")?, total, seed)?;
            let (train, valid) = corpus.split_tail(valid_pairs);
            Ok((train, valid, None))
        }
        _ => Err(CliError::Usage("train_src and train_tgt must be given together".into())),
    }
}

/// Training settings that must match for a resumed run to continue the
/// original one exactly; only the epoch budget may change.
fn same_recipe(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { max_epochs: 0, ..a.clone() } == TrainConfig { max_epochs: 0, ..b.clone() }
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<Manifest, CliError> {
    let run_dir = cfg.run_dir();
    let ckpt_dir = run_dir.join("checkpoints");
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.resolved"), cfg.render())?;

    let (train_corpus, valid_corpus, ingest) = load_corpora(cfg)?;
    if train_corpus.is_empty() {
        return Err(CliError::Usage("training corpus is empty".into()));
    }
    let train_cfg = cfg.train()?;
    let metrics = run_dir.join("metrics.jsonl");

    let (mut trainer, resumed_from_epoch) = if resume {
        let last = ckpt_dir.join("last.ckpt");
        if !last.exists() {
            return Err(CliError::Usage(format!("--resume given but {} does not exist", last.display())));
        }
        let t = Trainer::from_checkpoint(&Checkpoint::load(&last)?)?;
        let want = cfg.model(t.src_vocab.len(), t.tgt_vocab.len())?;
        if &want != t.model.config() {
            return Err(CliError::Usage(format!("resumed model {:?} differs from the configured {want:?}", t.model.config())));
        }
        if !same_recipe(&t.config, &train_cfg) {
            return Err(CliError::Usage("resumed training settings differ from the configuration (only epochs may change)".into()));
        }
        let epoch = t.progress.epoch;
        (t, Some(epoch))
    } else {
        let cap = cfg.usize("vocab_cap")?;
        let src = Vocab::build(train_corpus.sources(), cap);
        let tgt = Vocab::build(train_corpus.targets(), cap);
        let model = cfg.model(src.len(), tgt.len())?;
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
        (Trainer::new(model, train_cfg.clone(), src, tgt)?, None)
    };
    trainer.config.max_epochs = train_cfg.max_epochs;
    trainer.src_vocab.save(&run_dir.join("src.vocab"))?;
    trainer.tgt_vocab.save(&run_dir.join("tgt.vocab"))?;

    let train_pairs = encode_corpus(&train_corpus, &trainer.src_vocab, &trainer.tgt_vocab);
    let valid_pairs = encode_corpus(&valid_corpus, &trainer.src_vocab, &trainer.tgt_vocab);
    let mut log = MetricLog::append_to(&metrics)?;
    let opts = FitOptions { checkpoint_dir: Some(ckpt_dir), target_accuracy: cfg.target_accuracy()?, decode_eval: false };
    let report = trainer.fit(&train_pairs, &valid_pairs, &opts, &mut log)?;
    log.flush()?;

    let mc = trainer.model.config().clone();
    let manifest = Manifest {
        param_count: trainer.model.parameter_count(),
        cell_param_count: cell_param_count(mc.cell, mc.embed_dim, mc.hidden_dim),
        matmuls_per_step: count_step_matmuls_at(mc.cell, mc.embed_dim, mc.hidden_dim)?,
        model: mc,
        train_pairs: train_pairs.len(),
        valid_pairs: valid_pairs.len(),
        ingest,
        resumed_from_epoch,
        epochs_run: report.epochs_run,
        steps: report.steps,
        final_eval: report.final_eval,
        reached_target: report.reached_target,
    };
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

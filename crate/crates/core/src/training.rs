//! Adam with gradient clipping, per-epoch learning-rate decay, metric
//! logging and exact resume from checkpoints.
//!
//! Training runs in 32-bit floats. All randomness is derived from the run
//! seed and the epoch or step counter, so a checkpoint only needs counters
//! to resume bit-for-bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{vocab_hash, Checkpoint, CheckpointMeta, NamedTensor, Progress};
use crate::corpus::{make_batches, Batch, EncodedPair, Vocab};
use crate::error::{Error, Result};
use crate::seq2seq::{greedy, teacher_forced_predictions, ModelConfig, Seq2SeqModel};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale all gradients together when their joint L2 norm exceeds the limit.
    GlobalNorm,
    /// Clamp every gradient element into `[-limit, limit]`.
    PerValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub dropout: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip: 5.0,
            clip_mode: ClipMode::GlobalNorm,
            batch_size: 80,
            max_epochs: 10,
            lr_decay: 0.5,
            dropout: 0.2,
            max_len: 80,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("learning_rate", self.learning_rate), ("epsilon", self.epsilon), ("clip", self.clip), ("lr_decay", self.lr_decay)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and max_len must be positive".into()));
        }
        Ok(())
    }

    /// `learning_rate · lr_decay^epoch`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

/// SplitMix64 finalizer, used to derive independent seeds from counters.
pub fn mix_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ counter.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Joint L2 norm of every gradient.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    grads.iter().flatten().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt()
}

/// Scales every gradient by `max_norm / norm` when the joint norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

pub fn clip_per_value(grads: &mut [Vec<f32>], limit: f64) {
    let limit = limit as f32;
    for g in grads.iter_mut().flatten() {
        *g = g.clamp(-limit, limit);
    }
}

/// First and second moment estimates for each parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
    /// Updates applied so far; drives bias correction.
    pub t: u64,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (first, second) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { first, second, t: 0 }
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, params: &mut [&mut [f32]], grads: &[Vec<f32>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Contract(format!("{} parameter slots, {} gradients, {} moments", params.len(), grads.len(), self.first.len())));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.epsilon * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            if p.len() != g.len() || m.len() != g.len() {
                return Err(Error::Contract("gradient and parameter sizes differ".into()));
            }
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One line of the metric log per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

/// One line of the metric log per validation metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRecord {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

/// JSON-lines sink for training metrics.
pub struct MetricLog {
    out: Option<Box<dyn Write>>,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidRecord>,
}

impl MetricLog {
    /// Keeps records in memory only.
    pub fn memory() -> Self {
        Self { out: None, steps: Vec::new(), validations: Vec::new() }
    }

    pub fn to_writer(w: impl Write + 'static) -> Self {
        Self { out: Some(Box::new(w)), steps: Vec::new(), validations: Vec::new() }
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::to_writer(std::io::BufWriter::new(f)))
    }

    fn write_line(&mut self, value: &impl Serialize) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, value)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn step(&mut self, rec: StepRecord) -> Result<()> {
        self.write_line(&rec)?;
        self.steps.push(rec);
        Ok(())
    }

    pub fn validation(&mut self, rec: ValidRecord) -> Result<()> {
        self.write_line(&rec)?;
        self.validations.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            out.flush()?;
        }
        Ok(())
    }
}

/// Held-out quality of a model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Teacher-forced argmax accuracy over real target tokens (end token included).
    pub token_accuracy: f64,
    /// Fraction of sources whose greedy decode reproduces the reference.
    pub exact_match: Option<f64>,
    pub tokens: usize,
}

/// Evaluates in batches of `batch_size`; greedy exact match is computed
/// only when `with_decode` is set.
pub fn evaluate(model: &Seq2SeqModel<f32>, pairs: &[EncodedPair], batch_size: usize, with_decode: bool) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut correct = 0usize;
    let mut tokens = 0usize;
    let mut loss_sum = 0.0;
    for start in (0..pairs.len()).step_by(batch_size.max(1)) {
        let idx: Vec<usize> = (start..(start + batch_size).min(pairs.len())).collect();
        let batch = Batch::from_pairs(pairs, idx);
        let preds = teacher_forced_predictions(model, &batch)?;
        for (r, p) in preds.iter().enumerate() {
            for j in 0..batch.tgt_lens[r] {
                correct += usize::from(p[j] == batch.tgt[r][j]);
            }
        }
        let mut g = Graph::inference();
        let bm = model.bind_frozen(&mut g)?;
        let l = bm.sequence_loss(&mut g, &batch, 0.0, false)?;
        loss_sum += f64::from(g.value(l).item()) * batch.target_tokens() as f64;
        tokens += batch.target_tokens();
    }
    let exact_match = if with_decode {
        let mut hits = 0usize;
        for p in pairs {
            let h = greedy(model, &p.src, None)?;
            let reference = p.tgt.strip_suffix(&[crate::corpus::EOS]).unwrap_or(&p.tgt);
            hits += usize::from(h.finished && h.tokens == reference);
        }
        Some(hits as f64 / pairs.len() as f64)
    } else {
        None
    };
    Ok(Evaluation { loss: loss_sum / tokens as f64, token_accuracy: correct as f64 / tokens as f64, exact_match, tokens })
}

/// Model, optimizer state and position of a training run.
pub struct Trainer {
    pub model: Seq2SeqModel<f32>,
    pub config: TrainConfig,
    pub adam: Adam,
    pub progress: Progress,
    pub best_valid: Option<f64>,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

/// What a call to [`Trainer::fit`] did.
#[derive(Clone, Debug, Serialize)]
pub struct FitReport {
    pub epochs_run: usize,
    pub steps: u64,
    pub final_eval: Option<Evaluation>,
    pub reached_target: bool,
    pub checkpoints: Vec<PathBuf>,
}

/// Options for [`Trainer::fit`] beyond the training recipe.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for `epoch-N.ckpt`, `best.ckpt` and `last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once validation token accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Also run greedy decoding during validation.
    pub decode_eval: bool,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, src_vocab: Vocab, tgt_vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if model_config.src_vocab != src_vocab.len() || model_config.tgt_vocab != tgt_vocab.len() {
            return Err(Error::Config(format!(
                "model vocabularies {}/{} differ from the supplied {}/{}",
                model_config.src_vocab,
                model_config.tgt_vocab,
                src_vocab.len(),
                tgt_vocab.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Seq2SeqModel::<f32>::init(model_config, &mut rng)?;
        let adam = Adam::new(model.tensors().iter().map(|(_, t)| t.len()));
        Ok(Self { model, config, adam, progress: Progress::default(), best_valid: None, src_vocab, tgt_vocab })
    }

    /// Batches of `epoch`, in training order.
    pub fn epoch_batches(&self, pairs: &[EncodedPair], epoch: usize) -> Result<Vec<Batch>> {
        if pairs.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let seed = mix_seed(self.config.seed, SHUFFLE_STREAM, epoch as u64);
        let (batches, report) = make_batches(pairs, self.config.batch_size, self.config.max_len, Some(seed))?;
        if report.kept == 0 {
            return Err(Error::Config(format!("no training pair is within the length limit of {}", self.config.max_len)));
        }
        Ok(batches)
    }

    /// One optimizer step on `batch`. Non-finite losses or gradients skip
    /// the update; the step is still counted and logged.
    pub fn step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let lr = self.config.lr_at(self.progress.epoch);
        let seed = mix_seed(self.config.seed, DROPOUT_STREAM, self.progress.step);
        let (loss, mut grads) = {
            let mut g = Graph::with_seed(seed);
            let params = self.model.tensors();
            let vars: Vec<_> = params.iter().map(|(_, t)| g.param(*t)).collect();
            let bm = self.model.bind_vars(&vars)?;
            let l = bm.sequence_loss(&mut g, batch, self.config.dropout, true)?;
            let loss = f64::from(g.value(l).item());
            let mut grads = g.backward(l)?;
            let flat: Vec<Vec<f32>> = vars
                .iter()
                .zip(&params)
                .map(|(&v, (_, t))| grads.remove(v).map_or_else(|| vec![0.0; t.len()], Tensor::into_data))
                .collect();
            (loss, flat)
        };
        let finite = loss.is_finite() && grads.iter().flatten().all(|g| g.is_finite());
        let grad_norm = if finite {
            match self.config.clip_mode {
                ClipMode::GlobalNorm => clip_global_norm(&mut grads, self.config.clip),
                ClipMode::PerValue => {
                    let n = global_norm(&grads);
                    clip_per_value(&mut grads, self.config.clip);
                    n
                }
            }
        } else {
            f64::NAN
        };
        if finite {
            let mut params: Vec<&mut [f32]> = self.model.tensors_mut().into_iter().map(|(_, t)| t.data_mut()).collect();
            self.adam.update(&mut params, &grads, lr, &self.config)?;
        }
        let rec = StepRecord {
            step: self.progress.step,
            epoch: self.progress.epoch,
            lr,
            loss: if finite { loss } else { f64::NAN },
            grad_norm,
            skipped: !finite,
        };
        self.progress.step += 1;
        self.progress.step_in_epoch += 1;
        Ok(rec)
    }

    /// Trains up to `max_steps` further steps (or to the end of the current
    /// epoch), continuing mid-epoch if a previous call stopped there.
    /// Returns the number of steps taken.
    pub fn train_steps(&mut self, pairs: &[EncodedPair], max_steps: u64, log: &mut MetricLog) -> Result<u64> {
        let batches = self.epoch_batches(pairs, self.progress.epoch)?;
        let mut taken = 0;
        while taken < max_steps && self.progress.step_in_epoch < batches.len() {
            let rec = self.step(&batches[self.progress.step_in_epoch])?;
            log.step(rec)?;
            taken += 1;
        }
        if self.progress.step_in_epoch >= batches.len() {
            self.progress.epoch += 1;
            self.progress.step_in_epoch = 0;
        }
        Ok(taken)
    }

    /// Finishes the current epoch.
    pub fn train_epoch(&mut self, pairs: &[EncodedPair], log: &mut MetricLog) -> Result<u64> {
        self.train_steps(pairs, u64::MAX, log)
    }

    /// Trains until `max_epochs` (or the accuracy target), validating and
    /// checkpointing after every epoch.
    pub fn fit(&mut self, train: &[EncodedPair], valid: &[EncodedPair], opts: &FitOptions, log: &mut MetricLog) -> Result<FitReport> {
        if train.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        let mut report = FitReport { epochs_run: 0, steps: 0, final_eval: None, reached_target: false, checkpoints: Vec::new() };
        while self.progress.epoch < self.config.max_epochs {
            let epoch = self.progress.epoch;
            report.steps += self.train_epoch(train, log)?;
            report.epochs_run += 1;
            let eval = if valid.is_empty() { None } else { Some(evaluate(&self.model, valid, 100, opts.decode_eval)?) };
            if let Some(e) = &eval {
                log.validation(ValidRecord { epoch, metric: "loss".into(), value: e.loss })?;
                log.validation(ValidRecord { epoch, metric: "token_accuracy".into(), value: e.token_accuracy })?;
                if let Some(x) = e.exact_match {
                    log.validation(ValidRecord { epoch, metric: "exact_match".into(), value: x })?;
                }
            }
            log.flush()?;
            let improved = eval.as_ref().is_some_and(|e| self.best_valid.is_none_or(|b| e.token_accuracy > b));
            if improved {
                self.best_valid = eval.as_ref().map(|e| e.token_accuracy);
            }
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                let ckpt = self.checkpoint()?;
                for name in [format!("epoch-{epoch}.ckpt"), "last.ckpt".to_string()] {
                    let p = dir.join(name);
                    ckpt.save(&p)?;
                    report.checkpoints.push(p);
                }
                if improved {
                    let p = dir.join("best.ckpt");
                    ckpt.save(&p)?;
                    report.checkpoints.push(p);
                }
            }
            let reached = match (&eval, opts.target_accuracy) {
                (Some(e), Some(t)) => e.token_accuracy >= t,
                _ => false,
            };
            report.final_eval = eval;
            if reached {
                report.reached_target = true;
                break;
            }
        }
        Ok(report)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let src_vocab = self.src_vocab.words().to_vec();
        let tgt_vocab = self.tgt_vocab.words().to_vec();
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            src_vocab_hash: vocab_hash(&src_vocab),
            tgt_vocab_hash: vocab_hash(&tgt_vocab),
            src_vocab,
            tgt_vocab,
            train: serde_json::to_value(&self.config)?,
            progress: self.progress,
            best_valid: self.best_valid,
        };
        let mut tensors: Vec<NamedTensor> = self.model.tensors().into_iter().map(|(n, t)| NamedTensor::from_tensor(n, t)).collect();
        let names: Vec<String> = tensors.iter().map(|t| t.name.clone()).collect();
        for (prefix, moments) in [("adam.m", &self.adam.first), ("adam.v", &self.adam.second)] {
            for ((name, m), t) in names.iter().zip(moments).zip(self.model.tensors()) {
                tensors.push(NamedTensor { name: format!("{prefix}.{name}"), shape: t.1.shape().to_vec(), data: m.clone() });
            }
        }
        tensors.push(NamedTensor { name: "adam.t".into(), shape: vec![2], data: split_u64(self.adam.t) });
        Ok(Checkpoint { meta, tensors })
    }

    /// Restores a run exactly as it was when `ckpt` was taken.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ckpt.meta.train.clone())
            .map_err(|e| Error::MetadataMismatch(format!("checkpoint has no usable training config: {e}")))?;
        config.validate()?;
        let model = ckpt.model::<f32>(None)?;
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let moments = |prefix: &str| -> Result<Vec<Vec<f32>>> {
            names
                .iter()
                .map(|n| {
                    ckpt.tensor(&format!("{prefix}.{n}"))
                        .map(|t| t.data.clone())
                        .ok_or_else(|| Error::MetadataMismatch(format!("checkpoint lacks optimizer state '{prefix}.{n}'")))
                })
                .collect()
        };
        let t = ckpt
            .tensor("adam.t")
            .filter(|t| t.data.len() == 2)
            .ok_or_else(|| Error::MetadataMismatch("checkpoint lacks the optimizer step count".into()))?;
        let adam = Adam { first: moments("adam.m")?, second: moments("adam.v")?, t: join_u64(&t.data) };
        Ok(Self {
            model,
            config,
            adam,
            progress: ckpt.meta.progress,
            best_valid: ckpt.meta.best_valid,
            src_vocab: Vocab::from_words(ckpt.meta.src_vocab.clone())?,
            tgt_vocab: Vocab::from_words(ckpt.meta.tgt_vocab.clone())?,
        })
    }
}

/// The optimizer step count, as two exact 24-bit halves.
fn split_u64(v: u64) -> Vec<f32> {
    vec![(v & 0xff_ffff) as f32, (v >> 24) as f32]
}

fn join_u64(d: &[f32]) -> u64 {
    (d[0] as u64) | ((d[1] as u64) << 24)
}

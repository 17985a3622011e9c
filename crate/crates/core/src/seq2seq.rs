//! Attentional encoder-decoder over any of the recurrent cells.
//!
//! A bidirectional encoder produces annotations `h_i = [fwd_i; bwd_i]`.
//! Each decoder step runs two stacked cells: the first consumes the
//! previous target word, attention is computed from its output over
//! `tanh(h_i)`, and the second consumes the resulting context. The output
//! layer reads `[emb(y_{j-1}); tanh(s_j); c_j]` through a tanh bottleneck of
//! embedding width.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{BoundCell, CellKind, CellParams, GateVars, StateVars, StepTrace};
use crate::corpus::{Batch, BOS, EOS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Default beam width.
pub const DEFAULT_BEAM: usize = 10;

/// Dropout on the output bottleneck during training.
pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Decoding cap for a source of `src_len` tokens.
pub fn default_max_len(src_len: usize) -> usize {
    2 * src_len + 5
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.src_vocab, self.tgt_vocab, self.embed_dim, self.hidden_dim, self.attn_dim].contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

const TOP_SLOTS: [&str; 10] = [
    "src_embed",
    "tgt_embed",
    "attn.query",
    "attn.key",
    "attn.score",
    "dec_init",
    "out.hidden.W",
    "out.hidden.b",
    "out.vocab.W",
    "out.vocab.b",
];

const CELL_SLOTS: [&str; 4] = ["enc.fwd", "enc.bwd", "dec.word", "dec.context"];

/// All parameters of the encoder-decoder, each in one named slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel<T> {
    config: ModelConfig,
    src_embed: Tensor<T>,
    tgt_embed: Tensor<T>,
    /// Decoder-state side of the attention energy, `attn × hidden`.
    attn_query: Tensor<T>,
    /// Annotation side of the attention energy, `attn × 2·hidden`.
    attn_key: Tensor<T>,
    /// Energy read-out, `1 × attn`.
    attn_score: Tensor<T>,
    /// Decoder initial state from the first backward encoder state, `hidden × hidden`.
    init_proj: Tensor<T>,
    out_hidden_w: Tensor<T>,
    out_hidden_b: Tensor<T>,
    out_vocab_w: Tensor<T>,
    out_vocab_b: Tensor<T>,
    enc_fwd: CellParams<T>,
    enc_bwd: CellParams<T>,
    dec_word: CellParams<T>,
    dec_context: CellParams<T>,
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Every parameter drawn from `Uniform(-0.08, 0.08)`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let r = crate::cells::INIT_RANGE;
        let ModelConfig { cell, src_vocab, tgt_vocab, embed_dim: e, hidden_dim: d, attn_dim: a } = config;
        let mut u = |shape: &[usize]| Tensor::uniform(shape, -r, r, rng);
        let src_embed = u(&[src_vocab, e]);
        let tgt_embed = u(&[tgt_vocab, e]);
        let attn_query = u(&[a, d]);
        let attn_key = u(&[a, 2 * d]);
        let attn_score = u(&[1, a]);
        let init_proj = u(&[d, d]);
        let out_hidden_w = u(&[e, e + 3 * d]);
        let out_hidden_b = u(&[1, e]);
        let out_vocab_w = u(&[tgt_vocab, e]);
        let out_vocab_b = u(&[1, tgt_vocab]);
        Ok(Self {
            enc_fwd: CellParams::init(cell, e, d, false, rng),
            enc_bwd: CellParams::init(cell, e, d, false, rng),
            dec_word: CellParams::init(cell, e, d, false, rng),
            dec_context: CellParams::init(cell, 2 * d, d, false, rng),
            config,
            src_embed,
            tgt_embed,
            attn_query,
            attn_key,
            attn_score,
            init_proj,
            out_hidden_w,
            out_hidden_b,
            out_vocab_w,
            out_vocab_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn cells(&self) -> [&CellParams<T>; 4] {
        [&self.enc_fwd, &self.enc_bwd, &self.dec_word, &self.dec_context]
    }

    /// Every parameter with its slot name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let top = [
            &self.src_embed,
            &self.tgt_embed,
            &self.attn_query,
            &self.attn_key,
            &self.attn_score,
            &self.init_proj,
            &self.out_hidden_w,
            &self.out_hidden_b,
            &self.out_vocab_w,
            &self.out_vocab_b,
        ];
        let mut out: Vec<(String, &Tensor<T>)> = TOP_SLOTS.iter().map(|s| s.to_string()).zip(top).collect();
        for (prefix, cell) in CELL_SLOTS.iter().zip(self.cells()) {
            out.extend(cell.tensors().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let Self {
            config: _,
            src_embed,
            tgt_embed,
            attn_query,
            attn_key,
            attn_score,
            init_proj,
            out_hidden_w,
            out_hidden_b,
            out_vocab_w,
            out_vocab_b,
            enc_fwd,
            enc_bwd,
            dec_word,
            dec_context,
        } = self;
        let top = [src_embed, tgt_embed, attn_query, attn_key, attn_score, init_proj, out_hidden_w, out_hidden_b, out_vocab_w, out_vocab_b];
        let mut out: Vec<(String, &mut Tensor<T>)> = TOP_SLOTS.iter().map(|s| s.to_string()).zip(top).collect();
        for (prefix, cell) in CELL_SLOTS.iter().zip([enc_fwd, enc_bwd, dec_word, dec_context]) {
            out.extend(cell.tensors_mut().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    /// Replaces every slot from `named`, which must list exactly the slots
    /// of this model with matching shapes.
    pub fn load_tensors(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != named.len() {
            return Err(Error::MetadataMismatch(format!("model has {} slots, got {} tensors", slots.len(), named.len())));
        }
        for ((name, slot), (given, value)) in slots.iter_mut().zip(named) {
            if *name != given {
                return Err(Error::MetadataMismatch(format!("expected slot '{name}', found '{given}'")));
            }
            if slot.shape() != value.shape() {
                return Err(Error::MetadataMismatch(format!("slot '{name}' is {:?}, stored {:?}", slot.shape(), value.shape())));
            }
            **slot = value;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Seq2SeqModel<U> {
        Seq2SeqModel {
            config: self.config.clone(),
            src_embed: self.src_embed.cast(),
            tgt_embed: self.tgt_embed.cast(),
            attn_query: self.attn_query.cast(),
            attn_key: self.attn_key.cast(),
            attn_score: self.attn_score.cast(),
            init_proj: self.init_proj.cast(),
            out_hidden_w: self.out_hidden_w.cast(),
            out_hidden_b: self.out_hidden_b.cast(),
            out_vocab_w: self.out_vocab_w.cast(),
            out_vocab_b: self.out_vocab_b.cast(),
            enc_fwd: self.enc_fwd.cast(),
            enc_bwd: self.enc_bwd.cast(),
            dec_word: self.dec_word.cast(),
            dec_context: self.dec_context.cast(),
        }
    }

    /// Registers every parameter on `g` as a trainable leaf.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> Result<BoundModel> {
        let vars: Vec<Var> = self.tensors().into_iter().map(|(_, t)| g.param(t)).collect();
        self.bind_vars(&vars)
    }

    /// Registers every parameter as a constant (no gradients).
    pub fn bind_frozen<'p>(&'p self, g: &mut Graph<'p, T>) -> Result<BoundModel> {
        let vars: Vec<Var> = self.tensors().into_iter().map(|(_, t)| g.constant_ref(t)).collect();
        self.bind_vars(&vars)
    }

    /// Wraps handles already registered for this model, in [`Self::tensors`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.tensors().len();
        if vars.len() != expected {
            return Err(shape_err("model bind", format!("{} handles for {expected} slots", vars.len())));
        }
        let mut at = TOP_SLOTS.len();
        let mut cells = Vec::with_capacity(4);
        for cell in self.cells() {
            let n = cell.tensors().count();
            cells.push(cell.bind_vars(&vars[at..at + n])?);
            at += n;
        }
        let mut cells = cells.into_iter();
        Ok(BoundModel {
            config: self.config.clone(),
            src_embed: vars[0],
            tgt_embed: vars[1],
            attn_query: vars[2],
            attn_key: vars[3],
            attn_score: vars[4],
            init_proj: vars[5],
            out_hidden_w: vars[6],
            out_hidden_b: vars[7],
            out_vocab_w: vars[8],
            out_vocab_b: vars[9],
            enc_fwd: cells.next().expect("four cells"),
            enc_bwd: cells.next().expect("four cells"),
            dec_word: cells.next().expect("four cells"),
            dec_context: cells.next().expect("four cells"),
        })
    }
}

/// Model parameters registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: ModelConfig,
    src_embed: Var,
    tgt_embed: Var,
    attn_query: Var,
    attn_key: Var,
    attn_score: Var,
    init_proj: Var,
    out_hidden_w: Var,
    out_hidden_b: Var,
    out_vocab_w: Var,
    out_vocab_b: Var,
    enc_fwd: BoundCell,
    enc_bwd: BoundCell,
    dec_word: BoundCell,
    dec_context: BoundCell,
}

/// Encoder output for one batch, kept on the graph.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `n` matrices of `B × 2d`.
    pub annotations: Vec<Var>,
    /// `tanh` of each annotation: what attention reads.
    pub values: Vec<Var>,
    /// Annotation side of the energy, `B × a` per position.
    pub keys: Vec<Var>,
    /// Row-major `B × n` validity mask.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub init: StateVars,
    /// Traces of the forward encoder cell, one per source position.
    pub forward_gates: Vec<GateVars>,
}

/// Everything one decoder step produces.
#[derive(Clone, Debug)]
pub struct DecoderStep {
    pub state: StateVars,
    pub word_state: StateVars,
    pub context: Var,
    pub alpha: Var,
    pub logits: Var,
    pub word_gates: GateVars,
    pub context_gates: GateVars,
}

fn state_zeros<T: Scalar>(g: &mut Graph<'_, T>, cell: &BoundCell, batch: usize) -> StateVars {
    StateVars::zeros(g, cell.kind(), batch, cell.hidden_dim())
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Runs both encoder directions over `src` (`B` rows of `n` ids).
    /// Padded positions leave the recurrent state untouched.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, src: &[Vec<usize>], mask: &[Vec<bool>]) -> Result<Encoded> {
        let batch = src.len();
        let n = src.first().map_or(0, Vec::len);
        if batch == 0 || n == 0 || mask.len() != batch {
            return Err(Error::Contract("empty source batch".into()));
        }
        if src.iter().any(|r| r.len() != n) || mask.iter().any(|r| r.len() != n) {
            return Err(shape_err("encode", "ragged source rows"));
        }
        if mask.iter().any(|r| !r[0]) {
            return Err(Error::Contract("source sequence of length zero".into()));
        }
        let column = |j: usize| -> (Vec<usize>, Vec<bool>) { (src.iter().map(|r| r[j]).collect(), mask.iter().map(|r| r[j]).collect()) };

        let mut fwd = Vec::with_capacity(n);
        let mut forward_gates = Vec::with_capacity(n);
        let mut state = state_zeros(g, &self.enc_fwd, batch);
        for j in 0..n {
            let (ids, m) = column(j);
            let x = g.gather_rows(self.src_embed, &ids)?;
            let (next, gates) = self.enc_fwd.step(g, state, x)?;
            state = StateVars::blend(g, &m, next, state)?;
            fwd.push(state.h);
            forward_gates.push(gates);
        }
        let mut bwd = vec![state.h; n];
        let mut state = state_zeros(g, &self.enc_bwd, batch);
        for j in (0..n).rev() {
            let (ids, m) = column(j);
            let x = g.gather_rows(self.src_embed, &ids)?;
            let (next, _) = self.enc_bwd.step(g, state, x)?;
            state = StateVars::blend(g, &m, next, state)?;
            bwd[j] = state.h;
        }

        let mut annotations = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        let mut keys = Vec::with_capacity(n);
        for j in 0..n {
            let h = g.concat_cols(&[fwd[j], bwd[j]])?;
            let v = g.tanh(h)?;
            keys.push(g.matmul_t(v, self.attn_key)?);
            annotations.push(h);
            values.push(v);
        }
        let proj = g.matmul_t(bwd[0], self.init_proj)?;
        let h0 = g.tanh(proj)?;
        let init = StateVars {
            h: h0,
            c: self.dec_word.kind().has_memory_cell().then(|| g.constant(Tensor::zeros(&[batch, self.config.hidden_dim]))),
        };
        let mask = mask.iter().flatten().copied().collect();
        Ok(Encoded { annotations, values, keys, mask, batch, init, forward_gates })
    }

    /// `α = softmax_i(vᵀ tanh(W_a s̃ + U_a tanh(h_i)))`, `c = Σ α_i tanh(h_i)`.
    pub fn attention<T: Scalar>(&self, g: &mut Graph<'_, T>, enc: &Encoded, query: Var) -> Result<(Var, Var)> {
        let q = g.matmul_t(query, self.attn_query)?;
        let mut energies = Vec::with_capacity(enc.keys.len());
        for &k in &enc.keys {
            let s = g.add(q, k)?;
            let t = g.tanh(s)?;
            energies.push(g.matmul_t(t, self.attn_score)?);
        }
        let e = g.concat_cols(&energies)?;
        let alpha = g.masked_softmax(e, &enc.mask)?;
        let context = g.attend(alpha, &enc.values)?;
        Ok((context, alpha))
    }

    /// One decoder step from `state` given the previous target words.
    pub fn decoder_step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        enc: &Encoded,
        state: StateVars,
        prev: &[usize],
        dropout: f64,
        training: bool,
    ) -> Result<DecoderStep> {
        if prev.len() != enc.batch {
            return Err(shape_err("decoder step", format!("{} previous words for batch {}", prev.len(), enc.batch)));
        }
        let emb = g.gather_rows(self.tgt_embed, prev)?;
        let (word_state, word_gates) = self.dec_word.step(g, state, emb)?;
        let (context, alpha) = self.attention(g, enc, word_state.h)?;
        let (state, context_gates) = self.dec_context.step(g, word_state, context)?;
        let ts = g.tanh(state.h)?;
        let joined = g.concat_cols(&[emb, ts, context])?;
        let pre = g.matmul_t(joined, self.out_hidden_w)?;
        let pre = g.add(pre, self.out_hidden_b)?;
        let hidden = g.tanh(pre)?;
        let hidden = g.dropout(hidden, dropout, training)?;
        let logits = g.matmul_t(hidden, self.out_vocab_w)?;
        let logits = g.add(logits, self.out_vocab_b)?;
        Ok(DecoderStep { state, word_state, context, alpha, logits, word_gates, context_gates })
    }

    /// Teacher-forced logits for every target position, stacked
    /// position-major (`m·B × V`, row `j·B + b`).
    pub fn teacher_forced_logits<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &Batch, dropout: f64, training: bool) -> Result<Var> {
        let enc = self.encode(g, &batch.src, &batch.src_mask)?;
        let m = batch.tgt_width();
        if m == 0 {
            return Err(Error::Contract("empty target batch".into()));
        }
        let mut state = enc.init;
        let mut prev = vec![BOS; batch.len()];
        let mut rows = Vec::with_capacity(m);
        for j in 0..m {
            let out = self.decoder_step(g, &enc, state, &prev, dropout, training)?;
            rows.push(out.logits);
            state = out.state;
            prev = batch.tgt.iter().map(|r| r[j]).collect();
        }
        g.concat_rows(&rows)
    }

    /// Mean cross-entropy over the unmasked target tokens of `batch`.
    pub fn sequence_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, batch: &Batch, dropout: f64, training: bool) -> Result<Var> {
        let logits = self.teacher_forced_logits(g, batch, dropout, training)?;
        let m = batch.tgt_width();
        let targets: Vec<usize> = (0..m).flat_map(|j| batch.tgt.iter().map(move |r| r[j])).collect();
        let mask: Vec<bool> = (0..m).flat_map(|j| batch.tgt_mask.iter().map(move |r| r[j])).collect();
        g.softmax_xent(logits, &targets, &mask)
    }
}

fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
    let lz = z.ln() + max;
    row.iter().map(|v| v.as_f64() - lz).collect()
}

/// Per-position argmax predictions under teacher forcing, `B` rows of `m`.
pub fn teacher_forced_predictions<T: Scalar>(model: &Seq2SeqModel<T>, batch: &Batch) -> Result<Vec<Vec<usize>>> {
    let mut g = Graph::inference();
    let bm = model.bind_frozen(&mut g)?;
    let logits = bm.teacher_forced_logits(&mut g, batch, 0.0, false)?;
    let lt = g.value(logits);
    let b = batch.len();
    let mut out = vec![Vec::with_capacity(batch.tgt_width()); b];
    for r in 0..lt.rows() {
        out[r % b].push(argmax(lt.row(r)));
    }
    Ok(out)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// A decoded sequence with its log-likelihood.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hypothesis {
    /// Emitted ids, without the end token.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of every emitted id (end token included).
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of scored decisions: the tokens plus the end token if emitted.
    pub fn length(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    pub fn normalized_score(&self) -> f64 {
        self.score / self.length().max(1) as f64
    }
}

/// Inference-time view of one encoded source.
pub struct Decoder<'p, T: Scalar> {
    g: Graph<'p, T>,
    bm: BoundModel,
    enc: Encoded,
}

impl<'p, T: Scalar> Decoder<'p, T> {
    pub fn new(model: &'p Seq2SeqModel<T>, src: &[usize]) -> Result<Self> {
        let mut g = Graph::inference();
        let bm = model.bind_frozen(&mut g)?;
        if let Some(bad) = src.iter().find(|&&t| t >= model.config.src_vocab) {
            return Err(Error::Index(format!("source token {bad} with vocabulary {}", model.config.src_vocab)));
        }
        let enc = bm.encode(&mut g, &[src.to_vec()], &[vec![true; src.len()]])?;
        Ok(Self { g, bm, enc })
    }

    pub fn initial_state(&self) -> StateVars {
        self.enc.init
    }

    /// Log-probabilities of the next word, plus the full step output.
    pub fn step(&mut self, state: StateVars, prev: usize) -> Result<(Vec<f64>, DecoderStep)> {
        let out = self.bm.decoder_step(&mut self.g, &self.enc, state, &[prev], 0.0, false)?;
        Ok((log_softmax(self.g.value(out.logits).row(0)), out))
    }

    pub fn graph(&self) -> &Graph<'p, T> {
        &self.g
    }

    pub fn encoded(&self) -> &Encoded {
        &self.enc
    }
}

/// Greedy argmax decoding.
pub fn greedy<T: Scalar>(model: &Seq2SeqModel<T>, src: &[usize], max_len: Option<usize>) -> Result<Hypothesis> {
    let max_len = max_len.unwrap_or_else(|| default_max_len(src.len()));
    let mut dec = Decoder::new(model, src)?;
    let mut state = dec.initial_state();
    let mut hyp = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false };
    let mut prev = BOS;
    for _ in 0..max_len {
        let (logp, out) = dec.step(state, prev)?;
        let best = argmax(&logp);
        hyp.score += logp[best];
        if best == EOS {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(best);
        state = out.state;
        prev = best;
    }
    Ok(hyp)
}

fn by_normalized(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    a.normalized_score().total_cmp(&b.normalized_score())
}

/// Length-normalised beam search.
///
/// At every step the live hypotheses are expanded by every word and the
/// `beam` highest by accumulated log-likelihood are kept; those ending in
/// the end token move to the finished pool. After `max_len` steps the
/// finished pool and the surviving live hypotheses compete by
/// `score / length`.
pub fn beam_search<T: Scalar>(model: &Seq2SeqModel<T>, src: &[usize], beam: usize, max_len: Option<usize>) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let max_len = max_len.unwrap_or_else(|| default_max_len(src.len()));
    if max_len == 0 {
        return Err(Error::Config("maximum decode length must be at least 1".into()));
    }
    let mut dec = Decoder::new(model, src)?;
    let mut live: Vec<(Hypothesis, StateVars)> = vec![(Hypothesis { tokens: Vec::new(), score: 0.0, finished: false }, dec.initial_state())];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        // (parent, word, new score, next state)
        let mut cands: Vec<(usize, usize, f64, StateVars)> = Vec::new();
        for (p, (hyp, state)) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (logp, out) = dec.step(*state, prev)?;
            cands.extend(logp.iter().enumerate().map(|(w, lp)| (p, w, hyp.score + lp, out.state)));
        }
        // Stable sort: ties keep parent order, then word order.
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        cands.truncate(beam);
        let mut next = Vec::with_capacity(beam);
        for (p, w, score, state) in cands {
            let mut tokens = live[p].0.tokens.clone();
            if w == EOS {
                finished.push(Hypothesis { tokens, score, finished: true });
            } else {
                tokens.push(w);
                next.push((Hypothesis { tokens, score, finished: false }, state));
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|(h, _)| h));
    // Earliest-found wins ties.
    let mut best = finished.swap_remove(0);
    for h in finished {
        if by_normalized(&h, &best) == Ordering::Greater {
            best = h;
        }
    }
    Ok(best)
}

/// Log-likelihood of `tokens` followed by the end token.
pub fn score_sequence<T: Scalar>(model: &Seq2SeqModel<T>, src: &[usize], tokens: &[usize], finished: bool) -> Result<f64> {
    let mut dec = Decoder::new(model, src)?;
    let mut state = dec.initial_state();
    let mut prev = BOS;
    let mut total = 0.0;
    let ends = finished.then_some(EOS);
    for &w in tokens.iter().chain(ends.iter()) {
        let (logp, out) = dec.step(state, prev)?;
        total += logp.get(w).copied().ok_or_else(|| Error::Index(format!("target token {w}")))?;
        state = out.state;
        prev = w;
    }
    Ok(total)
}

/// Gate traces and attention of one decoded (or teacher-forced) sentence.
#[derive(Clone, Debug)]
pub struct DecodeTrace<T> {
    pub tokens: Vec<usize>,
    pub encoder: Vec<StepTrace<T>>,
    pub word_level: Vec<StepTrace<T>>,
    pub context_level: Vec<StepTrace<T>>,
    /// One row of source weights per decoder step.
    pub attention: Vec<Vec<f64>>,
    pub init_state: Vec<f64>,
    /// First-level decoder state after each step.
    pub word_states: Vec<Vec<f64>>,
    /// Second-level decoder state after each step.
    pub context_states: Vec<Vec<f64>>,
}

/// Decodes `src` greedily (or forces `target` when given, which should
/// end with the end token) and records every gate along the way.
pub fn trace_decode<T: Scalar>(model: &Seq2SeqModel<T>, src: &[usize], target: Option<&[usize]>) -> Result<DecodeTrace<T>> {
    let kind = model.config.cell;
    let mut dec = Decoder::new(model, src)?;
    let encoder = dec.encoded().forward_gates.iter().map(|gv| gv.materialize(dec.graph(), kind)).collect();
    let init_state = dec.graph().value(dec.initial_state().h).to_f64_vec();
    let mut state = dec.initial_state();
    let mut prev = BOS;
    let steps = target.map_or(default_max_len(src.len()), <[usize]>::len);
    let mut trace = DecodeTrace { tokens: Vec::new(), encoder, word_level: Vec::new(), context_level: Vec::new(), attention: Vec::new(), init_state, word_states: Vec::new(), context_states: Vec::new() };
    for j in 0..steps {
        let (logp, out) = dec.step(state, prev)?;
        trace.word_level.push(out.word_gates.materialize(dec.graph(), kind));
        trace.context_level.push(out.context_gates.materialize(dec.graph(), kind));
        trace.attention.push(dec.graph().value(out.alpha).to_f64_vec());
        trace.word_states.push(dec.graph().value(out.word_state.h).to_f64_vec());
        trace.context_states.push(dec.graph().value(out.state.h).to_f64_vec());
        let w = match target {
            Some(t) => t[j],
            None => argmax(&logp),
        };
        trace.tokens.push(w);
        if w == EOS && target.is_none() {
            break;
        }
        state = out.state;
        prev = w;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests;

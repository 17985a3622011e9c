use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cells::CellState;
use crate::corpus::EncodedPair;
use crate::gradcheck;

fn config(cell: CellKind, vocab: usize, e: usize, d: usize) -> ModelConfig {
    ModelConfig { cell, src_vocab: vocab, tgt_vocab: vocab, embed_dim: e, hidden_dim: d, attn_dim: d }
}

fn model(cell: CellKind, vocab: usize, e: usize, d: usize, seed: u64, scale: f64) -> Seq2SeqModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Seq2SeqModel::<f64>::init(config(cell, vocab, e, d), &mut rng).unwrap();
    for (_, t) in m.tensors_mut() {
        *t = t.map(|v| v * scale);
    }
    m
}

fn batch_of(pairs: &[EncodedPair]) -> Batch {
    Batch::from_pairs(pairs, (0..pairs.len()).collect())
}

fn random_pairs(rng: &mut impl Rng, vocab: usize, count: usize, max_len: usize) -> Vec<EncodedPair> {
    (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=max_len);
            let m = rng.gen_range(1..=max_len);
            let src = (0..n).map(|_| rng.gen_range(4..vocab)).collect();
            let mut tgt: Vec<usize> = (0..m - 1).map(|_| rng.gen_range(4..vocab)).collect();
            tgt.push(EOS);
            EncodedPair { src, tgt }
        })
        .collect()
}

fn loss_value(m: &Seq2SeqModel<f64>, batch: &Batch) -> f64 {
    let mut g = Graph::inference();
    let bm = m.bind_frozen(&mut g).unwrap();
    let l = bm.sequence_loss(&mut g, batch, 0.0, false).unwrap();
    g.value(l).item()
}

#[test]
fn slots_are_unique_and_round_trip() {
    let m = model(CellKind::Atr, 9, 4, 6, 1, 1.0);
    let names: Vec<String> = m.tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().collect::<HashSet<_>>().len(), names.len());
    assert_eq!(names.len(), 10 + 4 * 2);
    assert!(names.contains(&"dec.context.W_x".to_string()));
    let other = model(CellKind::Atr, 9, 4, 6, 2, 1.0);
    let mut copy = other.clone();
    copy.load_tensors(m.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect()).unwrap();
    assert_eq!(copy, m);
    let mut bad: Vec<(String, Tensor<f64>)> = m.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
    bad[3].1 = Tensor::zeros(&[1, 1]);
    assert!(matches!(copy.load_tensors(bad), Err(Error::MetadataMismatch(_))));
    // embeddings, attention (query, key, score), init, output layers, cells
    let expected = 2 * 9 * 4 + (6 * 6 + 6 * 12 + 6) + 6 * 6 + (4 * 22 + 4 + 9 * 4 + 9) + 3 * (6 * 4 + 6 * 6) + (6 * 12 + 6 * 6);
    assert_eq!(m.parameter_count(), expected);
}

#[test]
fn single_token_encoding_is_one_step_each_way() {
    let m = model(CellKind::Gru, 7, 3, 4, 2, 5.0);
    let mut g = Graph::inference();
    let bm = m.bind_frozen(&mut g).unwrap();
    let enc = bm.encode(&mut g, &[vec![5]], &[vec![true]]).unwrap();
    let h = g.value(enc.annotations[0]).clone();
    let x = Tensor::new(vec![1, 3], m.src_embed.row(5).to_vec()).unwrap();
    let zero = CellState::zeros(CellKind::Gru, 1, 4);
    let (f, _) = m.enc_fwd.run_step(&zero, &x).unwrap();
    let (b, _) = m.enc_bwd.run_step(&zero, &x).unwrap();
    let expect: Vec<f64> = f.h.data().iter().chain(b.h.data()).copied().collect();
    assert_eq!(h.data(), expect.as_slice());
}

#[test]
fn reversed_input_under_swapped_encoder() {
    let m = model(CellKind::Atr, 8, 4, 4, 3, 6.0);
    let mut swapped = m.clone();
    std::mem::swap(&mut swapped.enc_fwd, &mut swapped.enc_bwd);
    let src = vec![4, 7, 5, 6, 4];
    let rev: Vec<usize> = src.iter().rev().copied().collect();
    let annotations = |m: &Seq2SeqModel<f64>, s: &[usize]| -> Vec<Vec<f64>> {
        let mut g = Graph::inference();
        let bm = m.bind_frozen(&mut g).unwrap();
        let enc = bm.encode(&mut g, &[s.to_vec()], &[vec![true; s.len()]]).unwrap();
        enc.annotations.iter().map(|&a| g.value(a).data().to_vec()).collect()
    };
    let a = annotations(&m, &src);
    let b = annotations(&swapped, &rev);
    for (i, row) in a.iter().enumerate() {
        let other = &b[src.len() - 1 - i];
        assert_eq!(&row[..4], &other[4..]);
        assert_eq!(&row[4..], &other[..4]);
    }
}

#[test]
fn padding_does_not_change_the_loss() {
    let m = model(CellKind::Atr, 10, 4, 5, 4, 4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs = random_pairs(&mut rng, 10, 3, 6);
    let batch = batch_of(&pairs);
    let base = loss_value(&m, &batch);
    let mut padded = batch.clone();
    for r in 0..padded.len() {
        padded.src[r].extend([0, 0, 0]);
        padded.src_mask[r].extend([false; 3]);
        padded.tgt[r].extend([0, 0]);
        padded.tgt_mask[r].extend([false; 2]);
    }
    assert!((loss_value(&m, &padded) - base).abs() < 1e-12);

    // Each pair alone, token-weighted, gives the same mean.
    let mut total = 0.0;
    for p in &pairs {
        total += loss_value(&m, &batch_of(std::slice::from_ref(p))) * p.tgt.len() as f64;
    }
    let tokens: usize = pairs.iter().map(|p| p.tgt.len()).sum();
    assert!((total / tokens as f64 - base).abs() < 1e-12);
}

#[test]
fn encode_rejects_empty_sources() {
    let m = model(CellKind::Atr, 6, 2, 3, 5, 1.0);
    let mut g = Graph::inference();
    let bm = m.bind_frozen(&mut g).unwrap();
    assert!(matches!(bm.encode(&mut g, &[vec![]], &[vec![]]), Err(Error::Contract(_))));
    assert!(matches!(bm.encode(&mut g, &[vec![0]], &[vec![false]]), Err(Error::Contract(_))));
    assert!(matches!(bm.encode(&mut g, &[vec![9]], &[vec![true]]), Err(Error::Index(_))));
}

#[test]
fn single_position_attention() {
    let m = model(CellKind::Atr, 6, 3, 4, 6, 5.0);
    let mut g = Graph::inference();
    let bm = m.bind_frozen(&mut g).unwrap();
    let enc = bm.encode(&mut g, &[vec![4]], &[vec![true]]).unwrap();
    let q = g.constant(Tensor::from_f64(&[1, 4], &[0.3, -0.2, 0.9, 0.1]).unwrap());
    let (c, a) = bm.attention(&mut g, &enc, q).unwrap();
    assert_eq!(g.value(a).data(), &[1.0]);
    let expect = g.value(enc.annotations[0]).map(f64::tanh);
    assert!(g.value(c).max_abs_diff(&expect) < 1e-15);
}

#[test]
fn identical_annotations_get_uniform_weights() {
    let m = model(CellKind::Atr, 6, 3, 4, 7, 5.0);
    let mut g = Graph::inference();
    let bm = m.bind_frozen(&mut g).unwrap();
    let mut enc = bm.encode(&mut g, &[vec![4, 5, 4, 5]], &[vec![true; 4]]).unwrap();
    for i in 1..4 {
        enc.keys[i] = enc.keys[0];
        enc.values[i] = enc.values[0];
    }
    let q = g.constant(Tensor::from_f64(&[1, 4], &[1.0, 2.0, -1.0, 0.0]).unwrap());
    let (_, a) = bm.attention(&mut g, &enc, q).unwrap();
    assert!(g.value(a).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn decoder_step_is_pure() {
    let m = model(CellKind::Lstm, 8, 3, 4, 8, 3.0);
    let mut g = Graph::inference();
    let bm = m.bind_frozen(&mut g).unwrap();
    let enc = bm.encode(&mut g, &[vec![4, 6, 7]], &[vec![true; 3]]).unwrap();
    let a = bm.decoder_step(&mut g, &enc, enc.init, &[5], 0.0, false).unwrap();
    let b = bm.decoder_step(&mut g, &enc, enc.init, &[5], 0.0, false).unwrap();
    assert_eq!(g.value(a.logits), g.value(b.logits));
    assert!(matches!(bm.decoder_step(&mut g, &enc, enc.init, &[8], 0.0, false), Err(Error::Index(_))));
}

#[test]
fn untrained_loss_is_near_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vocab = 20;
    let m = Seq2SeqModel::<f64>::init(config(CellKind::Atr, vocab, 16, 32), &mut rng).unwrap();
    let pairs = random_pairs(&mut rng, vocab, 16, 10);
    let loss = loss_value(&m, &batch_of(&pairs));
    assert!((loss - (vocab as f64).ln()).abs() < 0.1, "{loss}");
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pairs = vec![
        EncodedPair { src: vec![4, 5, 6], tgt: vec![6, 5, EOS] },
        EncodedPair { src: vec![7, 4], tgt: vec![4, 7, EOS] },
    ];
    let batch = batch_of(&pairs);
    for cell in CellKind::ALL {
        let m = Seq2SeqModel::<f64>::init(config(cell, 8, 4, 6), &mut rng).unwrap();
        let mut m = m;
        for (_, t) in m.tensors_mut() {
            *t = t.map(|v| v * 6.0);
        }
        let named: Vec<(String, Tensor<f64>)> = m.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let shape = m.clone();
        let report = gradcheck::check(&named, None, |g, vars| {
            let bm = shape.bind_vars(vars)?;
            bm.sequence_loss(g, &batch, 0.0, false)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{cell}: {:?}", report.slots.iter().filter(|s| s.worst_rel_err >= 1e-4).collect::<Vec<_>>());
        assert_eq!(report.slots.len(), named.len());
    }
}

#[test]
fn beam_of_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for cell in [CellKind::Atr, CellKind::Gru] {
        let m = model(cell, 9, 4, 6, 12, 12.0);
        for _ in 0..50 {
            let n = rng.gen_range(1..6);
            let src: Vec<usize> = (0..n).map(|_| rng.gen_range(4..9)).collect();
            let g = greedy(&m, &src, None).unwrap();
            let b = beam_search(&m, &src, 1, None).unwrap();
            assert_eq!(g, b);
        }
    }
}

/// Best length-normalised hypothesis among all sequences of at most
/// `max_len` decisions.
fn exhaustive(m: &Seq2SeqModel<f64>, src: &[usize], max_len: usize) -> Hypothesis {
    let v = m.config().tgt_vocab;
    let mut best: Option<Hypothesis> = None;
    let mut consider = |h: Hypothesis| {
        if best.as_ref().is_none_or(|b| h.normalized_score() > b.normalized_score()) {
            best = Some(h);
        }
    };
    let mut prefixes: Vec<Vec<usize>> = vec![vec![]];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &prefixes {
            let score = score_sequence(m, src, p, true).unwrap();
            consider(Hypothesis { tokens: p.clone(), score, finished: true });
            for w in (0..v).filter(|&w| w != EOS) {
                let mut q = p.clone();
                q.push(w);
                if len == max_len {
                    let score = score_sequence(m, src, &q, false).unwrap();
                    consider(Hypothesis { tokens: q.clone(), score, finished: false });
                }
                next.push(q);
            }
        }
        prefixes = next;
    }
    best.unwrap()
}

#[test]
fn full_width_beam_is_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for seed in 0..20 {
        let cell = CellKind::ALL[seed as usize % 5];
        let m = model(cell, 5, 3, 4, 100 + seed, 25.0);
        let src: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..5)).collect();
        let b = beam_search(&m, &src, 5, Some(2)).unwrap();
        let e = exhaustive(&m, &src, 2);
        assert_eq!(b.tokens, e.tokens, "seed {seed}");
        assert_eq!(b.finished, e.finished);
        assert!((b.score - e.score).abs() < 1e-9);
    }
}

#[test]
fn beam_scores_are_consistent() {
    let m = model(CellKind::Atr, 9, 4, 6, 14, 10.0);
    let src = vec![4, 5, 6, 7];
    let h = beam_search(&m, &src, DEFAULT_BEAM, None).unwrap();
    assert!(h.length() <= default_max_len(4));
    assert!((score_sequence(&m, &src, &h.tokens, h.finished).unwrap() - h.score).abs() < 1e-9);
    assert!(beam_search(&m, &src, 0, None).is_err());
    assert!(beam_search(&m, &src, 2, Some(0)).is_err());
    let capped = beam_search(&m, &src, 3, Some(1)).unwrap();
    assert!(capped.length() <= 1);
}

#[test]
fn teacher_forced_predictions_shape() {
    let m = model(CellKind::Atr, 9, 4, 6, 15, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let batch = batch_of(&random_pairs(&mut rng, 9, 4, 5));
    let preds = teacher_forced_predictions(&m, &batch).unwrap();
    assert_eq!(preds.len(), 4);
    assert!(preds.iter().all(|p| p.len() == batch.tgt_width() && p.iter().all(|&w| w < 9)));
}

#[test]
fn traces_cover_every_step() {
    let m = model(CellKind::Atr, 9, 4, 6, 16, 8.0);
    let forced = trace_decode(&m, &[4, 5, 6], Some(&[6, 5, 4, EOS])).unwrap();
    assert_eq!(forced.encoder.len(), 3);
    assert_eq!(forced.word_level.len(), 4);
    assert_eq!(forced.context_level.len(), 4);
    assert_eq!(forced.tokens, vec![6, 5, 4, EOS]);
    assert!(forced.attention.iter().all(|a| a.len() == 3 && (a.iter().sum::<f64>() - 1.0).abs() < 1e-12));
    let free = trace_decode(&m, &[4, 5, 6], None).unwrap();
    let g = greedy(&m, &[4, 5, 6], None).unwrap();
    let mut expect = g.tokens.clone();
    if g.finished {
        expect.push(EOS);
    }
    assert_eq!(free.tokens, expect);
}

#[test]
fn decoder_rollout_rebuilds_traced_states() {
    use crate::attribution::{decoder_rollout, DecoderLevel};
    let m = model(CellKind::Atr, 9, 4, 6, 17, 8.0);
    let tr = trace_decode(&m, &[4, 5, 6, 7], Some(&[7, 6, 5, 4, EOS])).unwrap();
    let (full, _) = decoder_rollout(&tr.word_level, &tr.context_level, Some(&tr.init_state), DecoderLevel::Second).unwrap();
    let chain: Vec<Tensor<f64>> = tr
        .word_states
        .iter()
        .zip(&tr.context_states)
        .flat_map(|(a, b)| [a, b])
        .map(|v| Tensor::from_f64(&[1, v.len()], v).unwrap())
        .collect();
    assert_eq!(chain.len(), 10);
    assert!(full.max_residual(&chain) < 1e-10);
}

#[test]
fn cast_preserves_slots() {
    let m = model(CellKind::Ran, 7, 3, 5, 17, 1.0);
    let single = m.cast::<f32>();
    assert_eq!(single.tensors().len(), m.tensors().len());
    let back = single.cast::<f64>();
    for ((_, a), (_, b)) in m.tensors().into_iter().zip(back.tensors()) {
        assert!(a.max_abs_diff(b) < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_weights_form_a_distribution(seed in any::<u64>(), lens in proptest::collection::vec(1usize..7, 1..5)) {
        let m = model(CellKind::Atr, 8, 3, 4, seed, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<EncodedPair> = lens.iter().map(|&n| EncodedPair { src: (0..n).map(|_| rng.gen_range(4..8)).collect(), tgt: vec![EOS] }).collect();
        let batch = batch_of(&pairs);
        let mut g = Graph::inference();
        let bm = m.bind_frozen(&mut g).unwrap();
        let enc = bm.encode(&mut g, &batch.src, &batch.src_mask).unwrap();
        let q = g.constant(Tensor::uniform(&[lens.len(), 4], -3.0, 3.0, &mut rng));
        let (_, a) = bm.attention(&mut g, &enc, q).unwrap();
        let a = g.value(a);
        for (r, &n) in lens.iter().enumerate() {
            let row = a.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!(row[n..].iter().all(|&v| v == 0.0));
        }
    }
}

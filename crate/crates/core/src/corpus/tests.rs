use proptest::prelude::*;

use super::*;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn pair(src: &[usize], tgt: &[usize]) -> EncodedPair {
    EncodedPair { src: src.to_vec(), tgt: tgt.to_vec() }
}

#[test]
fn task_transforms() {
    assert_eq!(Task::Copy.apply(&[0, 1, 2]), vec![0, 1, 2]);
    assert_eq!(Task::Reverse.apply(&[0, 1, 2]), vec![2, 1, 0]);
    assert_eq!(Task::Sort.apply(&[5, 2, 9]), vec![2, 5, 9]);
    assert_eq!("Reverse".parse::<Task>().unwrap(), Task::Reverse);
    assert!("shuffle".parse::<Task>().is_err());
}

#[test]
fn synthetic_targets_end_with_eos() {
    let c = gen_synthetic(Task::Reverse, 7, 2, 5, 40, 3).unwrap();
    assert_eq!(c.len(), 40);
    for (s, t) in &c.pairs {
        assert!((2..=5).contains(&s.len()));
        assert_eq!(t.last().unwrap(), "</s>");
        let mut rev = s.clone();
        rev.reverse();
        assert_eq!(&t[..t.len() - 1], rev.as_slice());
    }
    assert_eq!(c, gen_synthetic(Task::Reverse, 7, 2, 5, 40, 3).unwrap());
    assert_ne!(c, gen_synthetic(Task::Reverse, 7, 2, 5, 40, 4).unwrap());
    assert!(gen_synthetic(Task::Copy, 5, 3, 2, 1, 0).is_err());
}

#[test]
fn copy_example() {
    let c = gen_synthetic(Task::Copy, 3, 3, 3, 20, 0).unwrap();
    for (s, t) in &c.pairs {
        let mut expect = s.clone();
        expect.push("</s>".into());
        assert_eq!(t, &expect);
    }
}

#[test]
fn sort_orders_by_symbol_index() {
    let c = gen_synthetic(Task::Sort, 12, 4, 4, 30, 1).unwrap();
    for (_, t) in &c.pairs {
        let ids: Vec<usize> = t[..4].iter().map(|w| w[1..].parse().unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn vocab_frequency_and_ties() {
    let corpus = [words("a a b")];
    let v = Vocab::build(corpus.iter().map(Vec::as_slice), 6);
    assert_eq!(v.id("a"), 4);
    assert_eq!(v.id("b"), 5);
    assert_eq!(v.len(), 6);
    assert_eq!(v.id("zzz"), UNK);

    let tied = [words("c b a c b a d")];
    let v = Vocab::build(tied.iter().map(Vec::as_slice), 6);
    assert_eq!(v.words(), &["a".to_string(), "b".to_string()]);
    assert_eq!(v.id("c"), UNK);
}

#[test]
fn vocab_skips_reserved_and_round_trips() {
    let corpus = [words("x y </s>"), words("y </s>")];
    let v = Vocab::build(corpus.iter().map(Vec::as_slice), 100);
    assert_eq!(v.id("</s>"), EOS);
    assert_eq!(v.words(), &["y".to_string(), "x".to_string()]);
    let x = words("x y x </s>");
    assert_eq!(v.decode(&v.encode(&x)), x);
    assert_eq!(v.token(999), "<unk>");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    v.save(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "y\nx\n");
    assert_eq!(Vocab::load(&path).unwrap(), v);
    std::fs::write(&path, "a\n<pad>\n").unwrap();
    assert!(Vocab::load(&path).is_err());
}

#[test]
fn parallel_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("src.txt"), dir.path().join("tgt.txt"));
    let c = gen_synthetic(Task::Copy, 5, 1, 4, 10, 9).unwrap();
    write_parallel(&c, &s, &t).unwrap();
    let (back, report) = read_parallel(&s, &t).unwrap();
    assert_eq!(back, c);
    assert_eq!(report, IngestReport { kept: 10, dropped_empty: 0, dropped_too_long: 0 });

    std::fs::write(&s, "a b\n\nc\n").unwrap();
    std::fs::write(&t, "b a\nx\n  \n").unwrap();
    let (back, report) = read_parallel(&s, &t).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(report.dropped_empty, 2);
    std::fs::write(&t, "only one\n").unwrap();
    assert!(matches!(read_parallel(&s, &t), Err(Error::Config(_))));
}

#[test]
fn single_pair_batch() {
    let pairs = vec![pair(&[4, 5, 6], &[6, 5, EOS])];
    let (batches, report) = make_batches(&pairs, 8, 80, None).unwrap();
    assert_eq!(batches.len(), 1);
    assert_eq!(report.kept, 1);
    let b = &batches[0];
    assert_eq!(b.len(), 1);
    assert!(b.src_mask[0].iter().all(|&m| m));
    assert!(b.tgt_mask[0].iter().all(|&m| m));
}

#[test]
fn padding_and_masks() {
    let pairs = vec![pair(&[4, 4, 4], &[4, EOS]), pair(&[5, 5, 5, 5, 5], &[5, 5, 5, EOS])];
    let (batches, _) = make_batches(&pairs, 2, 80, None).unwrap();
    let b = &batches[0];
    assert_eq!(b.src_width(), 5);
    assert_eq!(b.src[0], vec![4, 4, 4, PAD, PAD]);
    assert_eq!(b.src_mask[0].iter().filter(|m| !**m).count(), 2);
    assert_eq!(b.tgt[0], vec![4, EOS, PAD, PAD]);
    assert_eq!(b.src_lens, vec![3, 5]);
    assert_eq!(b.target_tokens(), 6);
    assert_eq!(b.src_column(4), vec![PAD, 5]);
    assert_eq!(b.src_mask_column(3), vec![false, true]);
}

#[test]
fn over_length_pairs_are_counted() {
    let pairs = vec![pair(&[4; 3], &[4, 4, 4, EOS]), pair(&[4; 4], &[4, EOS]), pair(&[4], &[4; 5])];
    let (batches, report) = make_batches(&pairs, 4, 3, Some(1)).unwrap();
    assert_eq!(report, IngestReport { kept: 1, dropped_empty: 0, dropped_too_long: 2 });
    assert_eq!(batches.len(), 1);
    assert_eq!(batches[0].indices, vec![0]);
    assert!(make_batches(&pairs, 0, 3, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batches_reassemble_the_corpus(seed in any::<u64>(), n in 1usize..120, bs in 1usize..9, max_len in 1usize..12) {
        let corpus = gen_synthetic(Task::Reverse, 9, 1, 10, n, seed).unwrap();
        let vocab = Vocab::build(corpus.sources(), 50);
        let pairs = encode_corpus(&corpus, &vocab, &vocab);
        let (batches, report) = make_batches(&pairs, bs, max_len, Some(seed ^ 7)).unwrap();
        let mut seen = vec![false; n];
        for b in &batches {
            prop_assert!(b.len() <= bs);
            prop_assert!(b.src_width() <= max_len && b.tgt_width() <= max_len + 1);
            for (r, &i) in b.indices.iter().enumerate() {
                prop_assert!(!seen[i]);
                seen[i] = true;
                let src: Vec<usize> = b.src[r].iter().zip(&b.src_mask[r]).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
                let tgt: Vec<usize> = b.tgt[r].iter().zip(&b.tgt_mask[r]).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
                prop_assert_eq!(&src, &pairs[i].src);
                prop_assert_eq!(&tgt, &pairs[i].tgt);
                prop_assert!(b.src[r][src.len()..].iter().all(|&v| v == PAD));
                prop_assert!(b.tgt[r][tgt.len()..].iter().all(|&v| v == PAD));
            }
        }
        let kept = seen.iter().filter(|s| **s).count();
        prop_assert_eq!(kept, report.kept);
        prop_assert_eq!(report.kept + report.dropped_too_long, n);
        let (again, _) = make_batches(&pairs, bs, max_len, Some(seed ^ 7)).unwrap();
        prop_assert_eq!(again, batches);
    }

    #[test]
    fn vocab_is_deterministic_and_bijective(seed in any::<u64>(), cap in 4usize..30) {
        let corpus = gen_synthetic(Task::Copy, 20, 1, 8, 30, seed).unwrap();
        let a = Vocab::build(corpus.sources(), cap);
        let b = Vocab::build(corpus.sources(), cap);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.len() <= cap.max(4));
        for id in 4..a.len() {
            prop_assert_eq!(a.id(a.token(id)), id);
        }
    }
}

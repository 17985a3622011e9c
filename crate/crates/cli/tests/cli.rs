use std::path::Path;
use std::process::{Command, Output};

use atrseq::checkpoint::Checkpoint;
use atrseq::corpus::Vocab;
use atrseq::seq2seq::greedy;
use serde_json::Value;

fn atrseq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atrseq")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "train", "--task", "copy", "--vocab-size", "8", "--max-src-len", "6", "--train-pairs", "120", "--valid-pairs", "20", "--batch", "20", "--embed", "8",
    "--hidden", "12",
];

fn small_train(dir: &Path, run: &str, extra: &[&str]) -> Output {
    let mut args = SMALL.to_vec();
    args.extend_from_slice(&["--run-dir", run]);
    args.extend_from_slice(extra);
    let o = atrseq(dir, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    o
}

fn manifest(dir: &Path, run: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(run).join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn training_is_deterministic_and_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    small_train(dir.path(), "a", &["--epochs", "2", "--seed", "3"]);
    small_train(dir.path(), "b", &["--epochs", "2", "--seed", "3"]);
    let read = |r: &str, f: &str| std::fs::read(dir.path().join(r).join(f)).unwrap();
    assert_eq!(read("a", "metrics.jsonl"), read("b", "metrics.jsonl"));
    assert_eq!(read("a", "checkpoints/last.ckpt"), read("b", "checkpoints/last.ckpt"));
    for f in ["config.resolved", "src.vocab", "tgt.vocab", "checkpoints/epoch-0.ckpt", "checkpoints/epoch-1.ckpt", "checkpoints/best.ckpt"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }

    let metrics = String::from_utf8(read("a", "metrics.jsonl")).unwrap();
    let mut steps = 0;
    for line in metrics.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        if v.get("step").is_some() {
            steps += 1;
            for k in ["epoch", "lr", "loss", "grad_norm"] {
                assert!(v[k].is_number(), "{line}");
            }
        } else {
            assert!(v["epoch"].is_number() && v["metric"].is_string() && v["value"].is_number(), "{line}");
        }
    }
    assert_eq!(steps, 12);

    let resolved = String::from_utf8(read("a", "config.resolved")).unwrap();
    assert!(resolved.contains("hidden = 12\n") && resolved.contains("seed = 3\n") && resolved.contains("lr = 5e-4\n"));
}

#[test]
fn different_seeds_give_different_logs() {
    let dir = tempfile::tempdir().unwrap();
    small_train(dir.path(), "a", &["--epochs", "1", "--seed", "1"]);
    small_train(dir.path(), "b", &["--epochs", "1", "--seed", "2"]);
    let read = |r: &str| std::fs::read(dir.path().join(r).join("metrics.jsonl")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    small_train(dir.path(), "full", &["--epochs", "3"]);
    small_train(dir.path(), "split", &["--epochs", "1"]);
    small_train(dir.path(), "split", &["--epochs", "3", "--resume"]);
    let read = |r: &str, f: &str| std::fs::read(dir.path().join(r).join(f)).unwrap();
    assert_eq!(read("full", "metrics.jsonl"), read("split", "metrics.jsonl"));
    assert_eq!(read("full", "checkpoints/last.ckpt"), read("split", "checkpoints/last.ckpt"));
    assert_eq!(manifest(dir.path(), "split")["resumed_from_epoch"], 1);

    let mut args = SMALL.to_vec();
    args.extend_from_slice(&["--run-dir", "split", "--epochs", "4", "--resume", "--lr", "1e-3"]);
    let o = atrseq(dir.path(), &args);
    assert_eq!(code(&o), 1, "changed recipe must be refused");
    let o = atrseq(dir.path(), &["train", "--run-dir", "nothing-here", "--resume"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn manifest_parameter_counts_follow_the_cell_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = Vec::new();
    for cell in ["atr", "ran", "gru", "lstm"] {
        small_train(dir.path(), cell, &["--epochs", "1", "--cell", cell, "--train-pairs", "20"]);
        let m = manifest(dir.path(), cell);
        counts.push((m["param_count"].as_u64().unwrap(), m["cell_param_count"].as_u64().unwrap()));
        if cell == "atr" {
            assert_eq!(m["cell_param_count"], 12 * 12 + 12 * 8);
            assert_eq!(m["matmuls_per_step"], 2);
        }
    }
    assert!(counts.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1), "{counts:?}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "# small run\nhidden = 10\nepochs = 1\ncell = gru  # overridden below\ntrain-pairs = 30\n").unwrap();
    let o = atrseq(dir.path(), &["train", "--config", "run.conf", "--cell", "atr", "--valid-pairs", "5", "--batch", "10", "--run-dir", "r"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = std::fs::read_to_string(dir.path().join("r/config.resolved")).unwrap();
    assert!(resolved.contains("hidden = 10\n") && resolved.contains("cell = atr\n") && resolved.contains("batch = 10\n") && resolved.contains("embed = 32\n"));

    std::fs::write(dir.path().join("bad.conf"), "hiden = 10\n").unwrap();
    let o = atrseq(dir.path(), &["train", "--config", "bad.conf"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("hiden"), "{}", stderr(&o));
    let o = atrseq(dir.path(), &["train", "--lr", "-1"]);
    assert_eq!(code(&o), 1);
    let o = atrseq(dir.path(), &["train", "--config", "missing.conf"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn file_corpora_and_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("s.txt"), "a b c\nb c\nc a\n").unwrap();
    std::fs::write(p.join("t.txt"), "c b a\nc b\na c\n").unwrap();
    let o = atrseq(p, &["train", "--train-src", "s.txt", "--train-tgt", "t.txt", "--valid-src", "s.txt", "--valid-tgt", "t.txt", "--epochs", "1", "--hidden", "6", "--embed", "4", "--run-dir", "f"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(manifest(p, "f")["train_pairs"], 3);
    assert_eq!(std::fs::read_to_string(p.join("f/src.vocab")).unwrap(), "c\na\nb\n", "frequency order, ties alphabetical");

    std::fs::write(p.join("empty.txt"), "").unwrap();
    let o = atrseq(p, &["train", "--train-src", "empty.txt", "--train-tgt", "empty.txt", "--run-dir", "e"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = atrseq(p, &["train", "--train-src", "s.txt", "--run-dir", "e"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn translate_matches_greedy_at_beam_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_train(p, "r", &["--epochs", "2", "--lr", "1e-2"]);
    let input = "w1 w2 w3\n\nw4 w0 w5 w6\nw2\nunknown w3\n";
    std::fs::write(p.join("in.txt"), input).unwrap();
    let o = atrseq(p, &["translate", "--checkpoint", "r/checkpoints/last.ckpt", "--input", "in.txt", "--output", "out.txt", "--beam", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("words/s"));
    let out = std::fs::read_to_string(p.join("out.txt")).unwrap();
    assert_eq!(out.lines().count(), input.lines().count());

    let ckpt = Checkpoint::load(&p.join("r/checkpoints/last.ckpt")).unwrap();
    let model = ckpt.model::<f32>(None).unwrap();
    let src = Vocab::from_words(ckpt.meta.src_vocab.clone()).unwrap();
    let tgt = Vocab::from_words(ckpt.meta.tgt_vocab.clone()).unwrap();
    for (line, got) in input.lines().zip(out.lines()) {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let want = if toks.is_empty() { String::new() } else { tgt.decode(&greedy(&model, &src.encode(&toks), None).unwrap().tokens).join(" ") };
        assert_eq!(got, want);
    }

    let o = atrseq(p, &["translate", "--checkpoint", "r/checkpoints/last.ckpt", "--input", "in.txt", "--output", "out3.txt", "--beam", "1", "--threads", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(p.join("out3.txt")).unwrap(), std::fs::read(p.join("out.txt")).unwrap());

    std::fs::write(p.join("empty.txt"), "").unwrap();
    let o = atrseq(p, &["translate", "--checkpoint", "r/checkpoints/last.ckpt", "--input", "empty.txt", "--output", "empty.out"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(p.join("empty.out")).unwrap(), b"");

    let o = atrseq(p, &["translate", "--checkpoint", "r/checkpoints/last.ckpt", "--input", "in.txt", "--output", "x", "--beam", "0"]);
    assert_eq!(code(&o), 1);
    std::fs::write(p.join("broken.ckpt"), b"ATRC\x01\x00").unwrap();
    let o = atrseq(p, &["translate", "--checkpoint", "broken.ckpt", "--input", "in.txt", "--output", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn analyze_emits_documented_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    small_train(p, "r", &["--epochs", "2", "--lr", "1e-2"]);
    std::fs::write(p.join("src.txt"), "w1 w2 w3 w4\nw5 w1\n\nw2 w3 w3\n").unwrap();
    std::fs::write(p.join("ref.txt"), "w1 w2 w3 w4\nw5 w1\n\nw2 w3 w3\n").unwrap();
    for extra in [vec![], vec!["--reference", "ref.txt", "--level", "first"]] {
        let mut args = vec!["analyze", "--checkpoint", "r/checkpoints/last.ckpt", "--input", "src.txt", "--out", "an", "--surface-res", "11"];
        args.extend(extra.iter().copied());
        let o = atrseq(p, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(p.join("an/attribution.json")).unwrap()).unwrap();
        assert_eq!(v["schema"], "atrseq.analysis/1");
        assert_eq!(v["precision"], "f64");
        assert!(v["level"].is_string());
        let r = v["pearson_r"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&r));
        assert!(v["max_residual"].as_f64().unwrap() < 1e-10);
        let seqs = v["sequences"].as_array().unwrap();
        assert_eq!(seqs.len(), 3);
        for s in seqs {
            let n = s["output"].as_array().unwrap().len();
            assert!(s["index"].is_u64() && s["source"].is_array() && s["forced"].is_boolean());
            assert_eq!(s["weights"].as_array().unwrap().len(), n);
            assert_eq!(s["attention"].as_array().unwrap().len(), n);
            assert_eq!(s["links"].as_array().unwrap().len(), n.saturating_sub(1));
            for l in s["links"].as_array().unwrap() {
                let (t, k) = (l[0].as_u64().unwrap(), l[1].as_u64().unwrap());
                assert!(k < t);
            }
            assert!(s["residual"].as_f64().unwrap() < 1e-10);
        }
        if !extra.is_empty() {
            assert_eq!(seqs[0]["output"], serde_json::json!(["w1", "w2", "w3", "w4", "</s>"]));
            assert_eq!(seqs[0]["forced"], true);
        }
        let gates = std::fs::read_to_string(p.join("an/gate_stats.csv")).unwrap();
        assert!(gates.starts_with("position,input_mean,forget_mean,count\n"));
        let surface = std::fs::read_to_string(p.join("an/surface.csv")).unwrap();
        assert!(surface.starts_with("x,y,value\n"));
        assert_eq!(surface.lines().count(), 1 + 11 * 11);
    }

    small_train(p, "g", &["--epochs", "1", "--cell", "gru", "--train-pairs", "20"]);
    let o = atrseq(p, &["analyze", "--checkpoint", "g/checkpoints/last.ckpt", "--input", "src.txt"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bench_reports_and_validates_repetitions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = atrseq(p, &["bench", "--reps", "0"]);
    assert_eq!(code(&o), 1);
    let o = atrseq(p, &["bench", "--warmup", "2"]);
    assert_eq!(code(&o), 1);
    let o = atrseq(p, &["bench", "--cells", "atr,tcn"]);
    assert_eq!(code(&o), 1);

    let o = atrseq(p, &["bench", "--dims", "16,24", "--seq-len", "3", "--batch", "2", "--out", "b"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(p.join("b/bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    assert!(csv.starts_with("dim,cell,param_count,matmuls_per_step,median_us,p10_us,p90_us,reps,"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(p.join("b/bench.json")).unwrap()).unwrap();
    let runs = v.as_array().unwrap();
    assert_eq!(runs.len(), 2);
    let env = &runs[0]["report"]["env"];
    assert!(env["cpu_model"].is_string() && env["element_type"] == "f32" && env["threads"] == 1);
    let want = [("atr", 2), ("gru", 6), ("lstm", 8), ("ran", 4), ("srnn", 2)];
    for c in runs[0]["report"]["cells"].as_array().unwrap() {
        let name = c["cell"].as_str().unwrap().to_ascii_lowercase();
        let n = want.iter().find(|(k, _)| *k == name).unwrap().1;
        assert_eq!(c["matmuls_per_step"], n);
        assert!(c["step"]["reps"].as_u64().unwrap() >= 30);
        assert!(c["step"]["p10_us"].as_f64().unwrap() <= c["step"]["median_us"].as_f64().unwrap());
        assert!(c["train_words_per_sec"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn gradcheck_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let o = atrseq(dir.path(), &["gradcheck", "atr"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v[0]["worst_rel_err"].as_f64().unwrap() < 1e-4);
    let o = atrseq(dir.path(), &["gradcheck", "seq2seq", "--hidden", "6"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = atrseq(dir.path(), &["gradcheck", "all", "--steps", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(serde_json::from_slice::<Value>(&o.stdout).unwrap().as_array().unwrap().len(), 6);
    let o = atrseq(dir.path(), &["gradcheck", "tcn"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("atr, gru, lstm, ran, srnn, seq2seq, all"));
    let o = atrseq(dir.path(), &["gradcheck", "atr", "--tol", "1e-30"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&atrseq(dir.path(), &[])), 1);
    assert_eq!(code(&atrseq(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&atrseq(dir.path(), &["train", "--hiden", "3"])), 1);
    let o = atrseq(dir.path(), &["train", "--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("--max-src-len"));
}

#[test]
fn checked_mode_env_var_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = SMALL.to_vec();
    args.extend_from_slice(&["--epochs", "1", "--run-dir", "c"]);
    let o = Command::new(env!("CARGO_BIN_EXE_atrseq")).current_dir(dir.path()).env("ATRSEQ_CHECKED", "1").args(&args).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut args = SMALL.to_vec();
    args.extend_from_slice(&["--epochs", "1", "--run-dir", "u"]);
    let o = Command::new(env!("CARGO_BIN_EXE_atrseq")).current_dir(dir.path()).env("ATRSEQ_CHECKED", "0").args(&args).output().unwrap();
    assert_eq!(code(&o), 0);
    let read = |r: &str| std::fs::read(dir.path().join(r).join("metrics.jsonl")).unwrap();
    assert_eq!(read("c"), read("u"), "checking must not change results");
}

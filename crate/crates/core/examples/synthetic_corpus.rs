//! Writes the same synthetic corpus `atrseq train` generates, split into train and held-out files.
//!
//! cargo run --example synthetic_corpus -- <task> <vocab> <min_len> <max_len> <train> <held_out> <seed> <out_dir>

use std::path::PathBuf;

use atrseq::corpus::{gen_synthetic, write_parallel, Task};

fn main() -> atrseq::Result<()> {
    let a: Vec<String> = std::env::args().skip(1).collect();
    if a.len() != 8 {
        eprintln!("usage: synthetic_corpus <task> <vocab> <min_len> <max_len> <train> <held_out> <seed> <out_dir>");
        std::process::exit(1);
    }
    let n = |i: usize| a[i].parse::<usize>().expect("numeric argument");
    let task: Task = a[0].parse()?;
    let (train_n, held_n) = (n(4), n(5));
    let corpus = gen_synthetic(task, n(1), n(2), n(3), train_n + held_n, a[6].parse().expect("numeric seed"))?;
    let (train, held) = corpus.split_tail(held_n);
    let out = PathBuf::from(&a[7]);
    std::fs::create_dir_all(&out)?;
    write_parallel(&train, &out.join("train.src"), &out.join("train.tgt"))?;
    write_parallel(&held, &out.join("valid.src"), &out.join("valid.tgt"))?;
    Ok(())
}

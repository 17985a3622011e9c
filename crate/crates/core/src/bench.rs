//! Single-threaded latency and throughput measurements for the recurrent
//! cells at equal dimensions.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{count_step_matmuls_at, CellKind, CellParams, StateVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

pub const MIN_REPS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Latency percentiles in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub reps: usize,
    pub median_us: f64,
    pub p10_us: f64,
    pub p90_us: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(samples_us: &[f64]) -> Result<LatencyStats> {
    if samples_us.is_empty() {
        return Err(Error::Config("no timing samples".into()));
    }
    let mut s = samples_us.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(LatencyStats { reps: s.len(), median_us: quantile(&s, 0.5), p10_us: quantile(&s, 0.1), p90_us: quantile(&s, 0.9) })
}

/// Runs `f` `warmup` times untimed, then `reps` times timed.
pub fn time_repeated(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<LatencyStats> {
    check_counts(warmup, reps)?;
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    summarize(&samples)
}

fn check_counts(warmup: usize, reps: usize) -> Result<()> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("repetitions must be at least {MIN_REPS}, got {reps}")));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::Config(format!("warmup must be at least {MIN_WARMUP}, got {warmup}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub hidden_dim: usize,
    pub input_dim: usize,
    pub batch: usize,
    /// Steps per sequence in the train-like and decode-like loops.
    pub seq_len: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Also time full forward/backward and forward-only sequence loops.
    pub loops: bool,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { hidden_dim: 1000, input_dim: 1000, batch: 1, seq_len: 20, warmup: MIN_WARMUP, reps: MIN_REPS, loops: true, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellBench {
    pub cell: CellKind,
    pub param_count: usize,
    pub matmuls_per_step: u64,
    pub step: LatencyStats,
    pub train_words_per_sec: Option<f64>,
    pub decode_words_per_sec: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEnv {
    pub cpu_model: String,
    pub element_type: String,
    pub threads: usize,
    pub os: String,
    pub arch: String,
    pub checked: bool,
}

impl BenchEnv {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu_model,
            element_type: "f32".into(),
            threads: 1,
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            checked: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub env: BenchEnv,
    pub spec: BenchSpec,
    pub cells: Vec<CellBench>,
}

impl BenchReport {
    pub fn cell(&self, kind: CellKind) -> Option<&CellBench> {
        self.cells.iter().find(|c| c.cell == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("cell,param_count,matmuls_per_step,median_us,p10_us,p90_us,reps,train_words_per_sec,decode_words_per_sec\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.3},{:.3},{:.3},{},{},{}\n",
                c.cell.name(),
                c.param_count,
                c.matmuls_per_step,
                c.step.median_us,
                c.step.p10_us,
                c.step.p90_us,
                c.step.reps,
                opt(c.train_words_per_sec),
                opt(c.decode_words_per_sec)
            ));
        }
        out
    }
}

/// Weight-only parameter count of one cell.
pub fn cell_param_count(kind: CellKind, input_dim: usize, hidden_dim: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    CellParams::<f32>::init(kind, input_dim, hidden_dim, false, &mut rng).parameter_count()
}

fn run_sequence(params: &CellParams<f32>, xs: &[Tensor<f32>], batch: usize, train: bool) -> Result<()> {
    let mut g = if train { Graph::new() } else { Graph::inference() };
    g.set_checked(false);
    let cell = params.bind(&mut g);
    let mut state = StateVars::zeros(&mut g, params.kind(), batch, params.hidden_dim());
    for x in xs {
        let x = g.constant_ref(x);
        state = cell.step(&mut g, state, x)?.0;
    }
    if train {
        let loss = g.sum(state.h)?;
        std::hint::black_box(g.backward(loss)?);
    } else {
        std::hint::black_box(g.value(state.h));
    }
    Ok(())
}

pub fn bench_cell(kind: CellKind, spec: &BenchSpec) -> Result<CellBench> {
    check_counts(spec.warmup, spec.reps)?;
    if spec.hidden_dim == 0 || spec.input_dim == 0 || spec.batch == 0 || spec.seq_len == 0 {
        return Err(Error::Config("bench dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let params = CellParams::<f32>::init(kind, spec.input_dim, spec.hidden_dim, false, &mut rng);
    let x = Tensor::<f32>::uniform(&[spec.batch, spec.input_dim], -1.0, 1.0, &mut rng);
    let step = time_repeated(spec.warmup, spec.reps, || run_sequence(&params, std::slice::from_ref(&x), spec.batch, false))?;
    let (train_words_per_sec, decode_words_per_sec) = if spec.loops {
        let xs: Vec<_> = (0..spec.seq_len).map(|_| Tensor::<f32>::uniform(&[spec.batch, spec.input_dim], -1.0, 1.0, &mut rng)).collect();
        let words = (spec.batch * spec.seq_len) as f64;
        let train = time_repeated(spec.warmup, spec.reps, || run_sequence(&params, &xs, spec.batch, true))?;
        let decode = time_repeated(spec.warmup, spec.reps, || run_sequence(&params, &xs, spec.batch, false))?;
        (Some(words / (train.median_us * 1e-6)), Some(words / (decode.median_us * 1e-6)))
    } else {
        (None, None)
    };
    Ok(CellBench {
        cell: kind,
        param_count: params.parameter_count(),
        matmuls_per_step: count_step_matmuls_at(kind, spec.input_dim, spec.hidden_dim)?,
        step,
        train_words_per_sec,
        decode_words_per_sec,
    })
}

/// Benchmarks each cell in turn, interleaving nothing, on the calling thread.
pub fn run_bench(kinds: &[CellKind], spec: &BenchSpec) -> Result<BenchReport> {
    check_counts(spec.warmup, spec.reps)?;
    let cells = kinds.iter().map(|&k| bench_cell(k, spec)).collect::<Result<_>>()?;
    Ok(BenchReport { env: BenchEnv::detect(), spec: spec.clone(), cells })
}

//! Input attribution for ATR runs, gate statistics, and the twin-gate surface.
//!
//! An ATR state unrolls into a gated sum of its transformed inputs:
//! `h_t = Σ_k g[t][k] ⊙ p_k + (∏_{l≤t} f_l) ⊙ h_0` with
//! `g[t][k] = i_k ⊙ ∏_{k<l≤t} f_l`. Everything here works in f64 regardless
//! of the precision the traces were recorded in.

use serde::Serialize;

use crate::cells::{CellKind, StepTrace};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Scalar, Tensor};

/// Per-component weights of every input on every state of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMatrix {
    len: usize,
    dim: usize,
    /// `len × len × dim`, row-major over (state, input, component).
    weights: Vec<f64>,
}

impl AttributionMatrix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Weight vector of input `k` on state `t` (0-based).
    pub fn weight(&self, t: usize, k: usize) -> &[f64] {
        let at = (t * self.len + k) * self.dim;
        &self.weights[at..at + self.dim]
    }

    /// `len × len` matrix of mean absolute weights.
    pub fn reduced(&self) -> Vec<Vec<f64>> {
        (0..self.len)
            .map(|t| {
                (0..self.len)
                    .map(|k| self.weight(t, k).iter().map(|v| v.abs()).sum::<f64>() / self.dim.max(1) as f64)
                    .collect()
            })
            .collect()
    }

    /// Keeps only the listed states (rows) and inputs (columns).
    pub fn select(&self, states: &[usize], inputs: &[usize]) -> Self {
        assert_eq!(states.len(), inputs.len(), "attribution selections must be square");
        let mut weights = Vec::with_capacity(states.len() * inputs.len() * self.dim);
        for &t in states {
            for &k in inputs {
                weights.extend_from_slice(self.weight(t, k));
            }
        }
        Self { len: states.len(), dim: self.dim, weights }
    }
}

impl Serialize for AttributionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.reduced().serialize(s)
    }
}

/// Outcome of unrolling one ATR run.
#[derive(Clone, Debug, Serialize)]
pub struct Rollout {
    /// States rebuilt from the expansion, one row per step.
    pub states: Vec<Vec<f64>>,
    pub attribution: AttributionMatrix,
}

impl Rollout {
    /// Largest absolute gap between the rebuilt states and `recurrent`.
    pub fn max_residual<T: Scalar>(&self, recurrent: &[Tensor<T>]) -> f64 {
        self.states
            .iter()
            .zip(recurrent)
            .flat_map(|(a, b)| a.iter().zip(b.data()).map(|(x, y)| (x - y.as_f64()).abs()))
            .fold(0.0, f64::max)
    }
}

fn single_row<T: Scalar>(t: &Option<Tensor<T>>, what: &str) -> Result<Vec<f64>> {
    let t = t.as_ref().ok_or_else(|| Error::Contract(format!("trace is missing {what}")))?;
    if t.rows() != 1 {
        return Err(Error::Contract(format!("rollout expects single-row traces, {what} has {} rows", t.rows())));
    }
    Ok(t.to_f64_vec())
}

/// Rebuilds the states of an ATR run from its per-step traces and returns
/// the attribution weights. `h0` defaults to zeros.
pub fn rollout<T: Scalar>(traces: &[StepTrace<T>], h0: Option<&[f64]>) -> Result<Rollout> {
    let mut inputs = Vec::with_capacity(traces.len());
    let mut forgets = Vec::with_capacity(traces.len());
    let mut ps = Vec::with_capacity(traces.len());
    for tr in traces {
        if tr.kind != CellKind::Atr {
            return Err(Error::Contract(format!("rollout is defined for ATR traces, got {}", tr.kind)));
        }
        inputs.push(single_row(&tr.input, "input gate")?);
        forgets.push(single_row(&tr.forget, "forget gate")?);
        ps.push(single_row(&tr.p, "input projection")?);
    }
    let len = traces.len();
    let dim = ps.first().map_or(0, Vec::len);
    if ps.iter().chain(&inputs).chain(&forgets).any(|v| v.len() != dim) || h0.is_some_and(|h| h.len() != dim) {
        return Err(Error::Contract("trace widths disagree".into()));
    }

    let mut weights = vec![0.0; len * len * dim];
    let mut states = Vec::with_capacity(len);
    for t in 0..len {
        // Walk back from k = t, accumulating the forget product.
        let mut carry = vec![1.0; dim];
        for k in (0..=t).rev() {
            let at = (t * len + k) * dim;
            for c in 0..dim {
                weights[at + c] = inputs[k][c] * carry[c];
                carry[c] *= forgets[k][c];
            }
        }
        let mut h: Vec<f64> = match h0 {
            Some(h0) => h0.iter().zip(&carry).map(|(a, b)| a * b).collect(),
            None => vec![0.0; dim],
        };
        for k in 0..=t {
            let at = (t * len + k) * dim;
            for c in 0..dim {
                h[c] += weights[at + c] * ps[k][c];
            }
        }
        states.push(h);
    }
    Ok(Rollout { states, attribution: AttributionMatrix { len, dim, weights } })
}

/// Which decoder cell's states the word-level attribution is read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum DecoderLevel {
    First,
    #[default]
    Second,
}

/// Attribution of decoder states onto the decoder's word inputs.
///
/// The two stacked decoder cells form a single ATR chain (the second cell
/// continues from the first cell's output, and the next first-level step
/// continues from the second), so their traces are interleaved and rolled
/// out together. Word inputs enter at the first-level steps; context
/// vectors enter at the second-level ones and are dropped from the
/// returned matrix.
pub fn decoder_rollout<T: Scalar>(
    first: &[StepTrace<T>],
    second: &[StepTrace<T>],
    h0: Option<&[f64]>,
    level: DecoderLevel,
) -> Result<(Rollout, AttributionMatrix)> {
    if first.len() != second.len() {
        return Err(Error::Contract(format!("{} first-level traces vs {} second-level", first.len(), second.len())));
    }
    let chain: Vec<StepTrace<T>> = first.iter().zip(second).flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
    let full = rollout(&chain, h0)?;
    let words: Vec<usize> = (0..first.len()).map(|j| 2 * j).collect();
    let states: Vec<usize> = match level {
        DecoderLevel::First => words.clone(),
        DecoderLevel::Second => (0..first.len()).map(|j| 2 * j + 1).collect(),
    };
    let words_only = full.attribution.select(&states, &words);
    Ok((full, words_only))
}

/// For every position `t ≥ 1`, the earlier position with the largest weight
/// in `reduced` (ties go to the most recent). Positions are 0-based.
pub fn dependency_links(reduced: &[Vec<f64>]) -> Vec<(usize, usize)> {
    (1..reduced.len())
        .map(|t| {
            let mut best = 0;
            for k in 1..t {
                if reduced[t][k] >= reduced[t][best] {
                    best = k;
                }
            }
            (t, best)
        })
        .collect()
}

/// Position-wise gate means over a corpus and their correlation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateStats {
    pub input_means: Vec<f64>,
    pub forget_means: Vec<f64>,
    /// Number of sequences contributing to each position.
    pub counts: Vec<usize>,
    pub pearson_r: f64,
}

impl GateStats {
    /// `position,input_mean,forget_mean,count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,input_mean,forget_mean,count\n");
        for (t, ((i, f), n)) in self.input_means.iter().zip(&self.forget_means).zip(&self.counts).enumerate() {
            out.push_str(&format!("{t},{i},{f},{n}\n"));
        }
        out
    }
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::ZeroVariance(format!("need two equal series of length ≥ 2, got {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance("a gate series is constant, correlation is undefined".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Averages per-position input and forget gate means across sequences.
/// Each sequence is a list of single-row traces; positions past a
/// sequence's end simply receive no contribution from it.
pub fn gate_correlation<T: Scalar>(sequences: &[Vec<StepTrace<T>>]) -> Result<GateStats> {
    let longest = sequences.iter().map(Vec::len).max().unwrap_or(0);
    let mut input_sums = vec![0.0; longest];
    let mut forget_sums = vec![0.0; longest];
    let mut counts = vec![0usize; longest];
    for seq in sequences {
        for (t, tr) in seq.iter().enumerate() {
            let mean = |g: &Option<Tensor<T>>, what: &str| -> Result<f64> {
                let g = g.as_ref().ok_or_else(|| Error::Contract(format!("{} traces have no {what} gate", tr.kind)))?;
                Ok(g.to_f64_vec().iter().sum::<f64>() / g.len().max(1) as f64)
            };
            input_sums[t] += mean(&tr.input, "input")?;
            forget_sums[t] += mean(&tr.forget, "forget")?;
            counts[t] += 1;
        }
    }
    let input_means: Vec<f64> = input_sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    let forget_means: Vec<f64> = forget_sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
    let pearson_r = pearson(&input_means, &forget_means)?;
    Ok(GateStats { input_means, forget_means, counts, pearson_r })
}

/// `σ(x+y) − σ(x−y)`: input gate minus forget gate when `x` plays the
/// transformed input and `y` the transformed history.
pub fn twin_gate_gap(x: f64, y: f64) -> f64 {
    sigmoid(x + y) - sigmoid(x - y)
}

/// The twin-gate gap sampled on a square grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurfaceGrid {
    pub axis: Vec<f64>,
    /// `values[r][c]` is the gap at `x = axis[r]`, `y = axis[c]`.
    pub values: Vec<Vec<f64>>,
}

impl SurfaceGrid {
    /// `x,y,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        for (r, x) in self.axis.iter().enumerate() {
            for (c, y) in self.axis.iter().enumerate() {
                out.push_str(&format!("{x},{y},{}\n", self.values[r][c]));
            }
        }
        out
    }
}

/// Samples the gap on `resolution` evenly spaced points per axis over `[lo, hi]`.
pub fn twin_gate_surface(lo: f64, hi: f64, resolution: usize) -> Result<SurfaceGrid> {
    if resolution < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("surface needs lo < hi and resolution ≥ 2, got [{lo}, {hi}] at {resolution}")));
    }
    let step = (hi - lo) / (resolution - 1) as f64;
    let axis: Vec<f64> = (0..resolution).map(|k| if k + 1 == resolution { hi } else { lo + step * k as f64 }).collect();
    let values = axis.iter().map(|&x| axis.iter().map(|&y| twin_gate_gap(x, y)).collect()).collect();
    Ok(SurfaceGrid { axis, values })
}

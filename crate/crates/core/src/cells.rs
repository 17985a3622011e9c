//! Recurrent cells: SRNN, ATR, GRU, LSTM and RAN behind one interface.
//!
//! Weights are stored `hidden × input` (and `hidden × hidden` for recurrent
//! matrices) and applied to batch-major rows, so `W·x` for a batch is
//! `x · Wᵀ`. No cell carries biases unless [`CellParams::init`] is asked for
//! them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Half-width of the uniform initialisation range.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Srnn,
    Atr,
    Gru,
    Lstm,
    Ran,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [CellKind::Srnn, CellKind::Atr, CellKind::Gru, CellKind::Lstm, CellKind::Ran];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Srnn => "srnn",
            CellKind::Atr => "atr",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
            CellKind::Ran => "ran",
        }
    }

    /// Weight slot names, input-side matrices first within each gate.
    /// RAN gains a content projection only when the input width differs
    /// from the hidden width.
    pub fn weight_names(self, input_dim: usize, hidden_dim: usize) -> Vec<&'static str> {
        match self {
            CellKind::Srnn | CellKind::Atr => vec!["W_x", "W_h"],
            CellKind::Gru => vec!["W_z", "U_z", "W_r", "U_r", "W_h", "U_h"],
            CellKind::Lstm => vec!["W_i", "U_i", "W_f", "U_f", "W_o", "U_o", "W_c", "U_c"],
            CellKind::Ran if input_dim == hidden_dim => vec!["W_ix", "W_ih", "W_fx", "W_fh"],
            CellKind::Ran => vec!["W_ix", "W_ih", "W_fx", "W_fh", "W_cx"],
        }
    }

    /// Whether the named slot multiplies the previous hidden state.
    fn is_recurrent(self, name: &str) -> bool {
        match self {
            CellKind::Srnn | CellKind::Atr => name == "W_h",
            CellKind::Gru | CellKind::Lstm => name.starts_with('U'),
            CellKind::Ran => name.ends_with('h'),
        }
    }

    fn bias_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Srnn => &["b_h"],
            CellKind::Atr => &["b_x"],
            CellKind::Gru => &["b_z", "b_r", "b_h"],
            CellKind::Lstm => &["b_i", "b_f", "b_o", "b_c"],
            CellKind::Ran => &["b_i", "b_f"],
        }
    }

    pub fn has_memory_cell(self) -> bool {
        self == CellKind::Lstm
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown cell '{s}' (valid: srnn, atr, gru, lstm, ran)")))
    }
}

/// Learnable weights of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T> {
    kind: CellKind,
    input_dim: usize,
    hidden_dim: usize,
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Scalar> CellParams<T> {
    /// Every weight drawn i.i.d. from `Uniform(-0.08, 0.08)`.
    pub fn init<R: Rng + ?Sized>(kind: CellKind, input_dim: usize, hidden_dim: usize, bias: bool, rng: &mut R) -> Self {
        let weights = kind
            .weight_names(input_dim, hidden_dim)
            .iter()
            .map(|name| {
                let cols = if kind.is_recurrent(name) { hidden_dim } else { input_dim };
                Tensor::uniform(&[hidden_dim, cols], -INIT_RANGE, INIT_RANGE, rng)
            })
            .collect();
        let biases = if bias {
            kind.bias_names().iter().map(|_| Tensor::uniform(&[1, hidden_dim], -INIT_RANGE, INIT_RANGE, rng)).collect()
        } else {
            Vec::new()
        };
        Self { kind, input_dim, hidden_dim, weights, biases }
    }

    /// Builds params from explicit tensors, in [`CellKind::weight_names`] order.
    pub fn from_weights(kind: CellKind, input_dim: usize, hidden_dim: usize, weights: Vec<Tensor<T>>, biases: Vec<Tensor<T>>) -> Result<Self> {
        let names = kind.weight_names(input_dim, hidden_dim);
        if weights.len() != names.len() {
            return Err(shape_err("cell params", format!("{kind} needs {} weights, got {}", names.len(), weights.len())));
        }
        for (name, w) in names.iter().zip(&weights) {
            let cols = if kind.is_recurrent(name) { hidden_dim } else { input_dim };
            if w.shape() != [hidden_dim, cols] {
                return Err(shape_err("cell params", format!("{name} is {:?}, expected [{hidden_dim}, {cols}]", w.shape())));
            }
        }
        if !biases.is_empty() && (biases.len() != kind.bias_names().len() || biases.iter().any(|b| b.shape() != [1, hidden_dim])) {
            return Err(shape_err("cell params", format!("{kind} bias layout")));
        }
        Ok(Self { kind, input_dim, hidden_dim, weights, biases })
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn has_bias(&self) -> bool {
        !self.biases.is_empty()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor<T>> {
        let names = self.kind.weight_names(self.input_dim, self.hidden_dim);
        names.iter().position(|n| *n == name).map(|i| &self.weights[i])
    }

    pub fn weight_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let names = self.kind.weight_names(self.input_dim, self.hidden_dim);
        names.iter().position(|n| *n == name).map(move |i| &mut self.weights[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().map(|(_, t)| t.len()).sum()
    }

    /// Named tensors in a fixed order: weights, then biases.
    pub fn tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        let names = self.kind.weight_names(self.input_dim, self.hidden_dim);
        names
            .into_iter()
            .zip(&self.weights)
            .chain(self.kind.bias_names().iter().copied().zip(&self.biases))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor<T>)> {
        let names = self.kind.weight_names(self.input_dim, self.hidden_dim);
        names
            .into_iter()
            .zip(self.weights.iter_mut())
            .chain(self.kind.bias_names().iter().copied().zip(self.biases.iter_mut()))
    }

    pub fn cast<U: Scalar>(&self) -> CellParams<U> {
        CellParams {
            kind: self.kind,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            weights: self.weights.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
        }
    }

    /// Registers the weights on `g` without copying them.
    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> BoundCell {
        BoundCell {
            kind: self.kind,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            weights: self.weights.iter().map(|w| g.param(w)).collect(),
            biases: self.biases.iter().map(|b| g.param(b)).collect(),
        }
    }

    /// Wraps handles already registered for these weights, given in
    /// [`CellParams::tensors`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundCell> {
        if vars.len() != self.weights.len() + self.biases.len() {
            return Err(shape_err("cell bind", format!("{} handles for {} tensors", vars.len(), self.weights.len() + self.biases.len())));
        }
        let (w, b) = vars.split_at(self.weights.len());
        Ok(BoundCell {
            kind: self.kind,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            weights: w.to_vec(),
            biases: b.to_vec(),
        })
    }

    /// One step outside any training graph.
    pub fn run_step(&self, state: &CellState<T>, x: &Tensor<T>) -> Result<(CellState<T>, StepTrace<T>)> {
        let mut g = Graph::inference();
        let cell = self.bind(&mut g);
        let s = state.bind(&mut g);
        let xv = g.constant_ref(x);
        let (next, gates) = cell.step(&mut g, s, xv)?;
        Ok((CellState::from_vars(&g, next), gates.materialize(&g, self.kind)))
    }
}

/// Recurrent state: hidden rows, plus the memory cell for LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub h: Tensor<T>,
    pub c: Option<Tensor<T>>,
}

impl<T: Scalar> CellState<T> {
    pub fn zeros(kind: CellKind, batch: usize, hidden_dim: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden_dim]),
            c: kind.has_memory_cell().then(|| Tensor::zeros(&[batch, hidden_dim])),
        }
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p, T>) -> StateVars {
        StateVars { h: g.constant_ref(&self.h), c: self.c.as_ref().map(|c| g.constant_ref(c)) }
    }

    pub fn from_vars(g: &Graph<'_, T>, s: StateVars) -> Self {
        Self { h: g.value(s.h).clone(), c: s.c.map(|c| g.value(c).clone()) }
    }
}

/// State handles on a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateVars {
    pub h: Var,
    pub c: Option<Var>,
}

impl StateVars {
    pub fn zeros<T: Scalar>(g: &mut Graph<'_, T>, kind: CellKind, batch: usize, hidden_dim: usize) -> Self {
        let h = g.constant(Tensor::zeros(&[batch, hidden_dim]));
        let c = kind.has_memory_cell().then(|| g.constant(Tensor::zeros(&[batch, hidden_dim])));
        Self { h, c }
    }

    /// Keeps `new` on rows where `mask` is set and `old` elsewhere.
    pub fn blend<T: Scalar>(g: &mut Graph<'_, T>, mask: &[bool], new: Self, old: Self) -> Result<Self> {
        let h = g.blend_rows(mask, new.h, old.h)?;
        let c = match (new.c, old.c) {
            (Some(n), Some(o)) => Some(g.blend_rows(mask, n, o)?),
            _ => None,
        };
        Ok(Self { h, c })
    }
}

/// Gate handles recorded by one step; materialised into a [`StepTrace`] on demand.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GateVars {
    pub input: Option<Var>,
    pub forget: Option<Var>,
    pub output: Option<Var>,
    pub update: Option<Var>,
    pub reset: Option<Var>,
    pub p: Option<Var>,
    pub q: Option<Var>,
}

impl GateVars {
    pub fn materialize<T: Scalar>(&self, g: &Graph<'_, T>, kind: CellKind) -> StepTrace<T> {
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        StepTrace {
            kind,
            input: get(self.input),
            forget: get(self.forget),
            output: get(self.output),
            update: get(self.update),
            reset: get(self.reset),
            p: get(self.p),
            q: get(self.q),
        }
    }
}

/// Per-step gate activations and transformed inputs. Fields a variant does
/// not compute are `None` (SRNN has no gates at all).
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace<T> {
    pub kind: CellKind,
    pub input: Option<Tensor<T>>,
    pub forget: Option<Tensor<T>>,
    pub output: Option<Tensor<T>>,
    pub update: Option<Tensor<T>>,
    pub reset: Option<Tensor<T>>,
    pub p: Option<Tensor<T>>,
    pub q: Option<Tensor<T>>,
}

impl<T: Scalar> StepTrace<T> {
    pub fn gates(&self) -> impl Iterator<Item = &Tensor<T>> {
        [&self.input, &self.forget, &self.output, &self.update, &self.reset].into_iter().flatten()
    }

    /// The slice of this trace belonging to batch row `r`.
    pub fn row(&self, r: usize) -> Self {
        let pick = |t: &Option<Tensor<T>>| {
            t.as_ref().map(|t| Tensor::new(vec![1, t.cols()], t.row(r).to_vec()).expect("row slice"))
        };
        Self {
            kind: self.kind,
            input: pick(&self.input),
            forget: pick(&self.forget),
            output: pick(&self.output),
            update: pick(&self.update),
            reset: pick(&self.reset),
            p: pick(&self.p),
            q: pick(&self.q),
        }
    }
}

/// A cell whose weights are registered on a graph.
#[derive(Clone, Debug)]
pub struct BoundCell {
    kind: CellKind,
    input_dim: usize,
    hidden_dim: usize,
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl BoundCell {
    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// `x·Wᵀ (+ bias)`
    fn affine<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, w: usize, bias: Option<usize>) -> Result<Var> {
        let out = g.matmul_t(x, self.weights[w])?;
        match bias.and_then(|b| self.biases.get(b)) {
            Some(&b) => g.add(out, b),
            None => Ok(out),
        }
    }

    /// Sum of an input-side and a recurrent-side product.
    fn gate_pre<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, h: Var, w: usize, u: usize, bias: usize) -> Result<Var> {
        let a = g.matmul_t(x, self.weights[w])?;
        let b = g.matmul_t(h, self.weights[u])?;
        let s = g.add(a, b)?;
        match self.biases.get(bias) {
            Some(&bv) => g.add(s, bv),
            None => Ok(s),
        }
    }

    /// Advances `state` by one input row batch `x`.
    pub fn step<T: Scalar>(&self, g: &mut Graph<'_, T>, state: StateVars, x: Var) -> Result<(StateVars, GateVars)> {
        let (xb, xd) = g.value(x).dims2()?;
        let (hb, hd) = g.value(state.h).dims2()?;
        if xd != self.input_dim || hd != self.hidden_dim || xb != hb {
            return Err(shape_err(
                "cell step",
                format!("{} cell ({}→{}) given x {xb}x{xd}, h {hb}x{hd}", self.kind, self.input_dim, self.hidden_dim),
            ));
        }
        let h = state.h;
        let mut gates = GateVars::default();
        let next = match self.kind {
            CellKind::Srnn => {
                let a = self.affine(g, x, 0, Some(0))?;
                let b = g.matmul_t(h, self.weights[1])?;
                let s = g.add(a, b)?;
                StateVars { h: g.tanh(s)?, c: None }
            }
            CellKind::Atr => {
                let q = g.matmul_t(h, self.weights[1])?;
                let p = self.affine(g, x, 0, Some(0))?;
                let sum = g.add(p, q)?;
                let diff = g.sub(p, q)?;
                let i = g.sigmoid(sum)?;
                let f = g.sigmoid(diff)?;
                let ip = g.mul(i, p)?;
                let fh = g.mul(f, h)?;
                gates = GateVars { input: Some(i), forget: Some(f), p: Some(p), q: Some(q), ..gates };
                StateVars { h: g.add(ip, fh)?, c: None }
            }
            CellKind::Gru => {
                let zp = self.gate_pre(g, x, h, 0, 1, 0)?;
                let z = g.sigmoid(zp)?;
                let rp = self.gate_pre(g, x, h, 2, 3, 1)?;
                let r = g.sigmoid(rp)?;
                let rh = g.mul(r, h)?;
                let cand = self.gate_pre(g, x, rh, 4, 5, 2)?;
                let cand = g.tanh(cand)?;
                let keep = g.mul(z, h)?;
                let nz = g.one_minus(z)?;
                let fresh = g.mul(nz, cand)?;
                gates = GateVars { update: Some(z), reset: Some(r), ..gates };
                StateVars { h: g.add(keep, fresh)?, c: None }
            }
            CellKind::Lstm => {
                let c = state.c.ok_or_else(|| Error::Contract("LSTM state without memory cell".into()))?;
                let ip = self.gate_pre(g, x, h, 0, 1, 0)?;
                let i = g.sigmoid(ip)?;
                let fp = self.gate_pre(g, x, h, 2, 3, 1)?;
                let f = g.sigmoid(fp)?;
                let op = self.gate_pre(g, x, h, 4, 5, 2)?;
                let o = g.sigmoid(op)?;
                let cp = self.gate_pre(g, x, h, 6, 7, 3)?;
                let cand = g.tanh(cp)?;
                let keep = g.mul(f, c)?;
                let fresh = g.mul(i, cand)?;
                let c_new = g.add(keep, fresh)?;
                let tc = g.tanh(c_new)?;
                gates = GateVars { input: Some(i), forget: Some(f), output: Some(o), ..gates };
                StateVars { h: g.mul(o, tc)?, c: Some(c_new) }
            }
            CellKind::Ran => {
                let ip = self.gate_pre(g, x, h, 0, 1, 0)?;
                let i = g.sigmoid(ip)?;
                let fp = self.gate_pre(g, x, h, 2, 3, 1)?;
                let f = g.sigmoid(fp)?;
                let content = if self.weights.len() == 5 { g.matmul_t(x, self.weights[4])? } else { x };
                let ic = g.mul(i, content)?;
                let fh = g.mul(f, h)?;
                gates = GateVars { input: Some(i), forget: Some(f), p: Some(content), ..gates };
                StateVars { h: g.add(ic, fh)?, c: None }
            }
        };
        Ok((next, gates))
    }
}

fn expect_kind<T: Scalar>(params: &CellParams<T>, kind: CellKind) -> Result<()> {
    if params.kind != kind {
        return Err(Error::Contract(format!("{} params passed to the {kind} step", params.kind)));
    }
    Ok(())
}

/// `q = W_h·h`, `p = W_x·x`, `i = σ(p+q)`, `f = σ(p−q)`, `h' = i⊙p + f⊙h`.
pub fn atr_step<T: Scalar>(params: &CellParams<T>, state: &CellState<T>, x: &Tensor<T>) -> Result<(CellState<T>, StepTrace<T>)> {
    expect_kind(params, CellKind::Atr)?;
    params.run_step(state, x)
}

pub fn gru_step<T: Scalar>(params: &CellParams<T>, state: &CellState<T>, x: &Tensor<T>) -> Result<(CellState<T>, StepTrace<T>)> {
    expect_kind(params, CellKind::Gru)?;
    params.run_step(state, x)
}

pub fn lstm_step<T: Scalar>(params: &CellParams<T>, state: &CellState<T>, x: &Tensor<T>) -> Result<(CellState<T>, StepTrace<T>)> {
    expect_kind(params, CellKind::Lstm)?;
    params.run_step(state, x)
}

pub fn ran_step<T: Scalar>(params: &CellParams<T>, state: &CellState<T>, x: &Tensor<T>) -> Result<(CellState<T>, StepTrace<T>)> {
    expect_kind(params, CellKind::Ran)?;
    params.run_step(state, x)
}

pub fn srnn_step<T: Scalar>(params: &CellParams<T>, state: &CellState<T>, x: &Tensor<T>) -> Result<(CellState<T>, StepTrace<T>)> {
    expect_kind(params, CellKind::Srnn)?;
    params.run_step(state, x)
}

/// Matrix transformations issued by one instrumented step at the given dims.
pub fn count_step_matmuls_at(kind: CellKind, input_dim: usize, hidden_dim: usize) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = CellParams::<f32>::init(kind, input_dim, hidden_dim, false, &mut rng);
    let mut g = Graph::inference();
    let cell = params.bind(&mut g);
    let state = StateVars::zeros(&mut g, kind, 1, hidden_dim);
    let x = g.constant(Tensor::zeros(&[1, input_dim]));
    let label = kind.name();
    g.scoped(label, |g| cell.step(g, state, x))?;
    Ok(g.op_counts()[label])
}

/// Per-step matrix transformations with equal input and hidden widths
/// (the configuration in which RAN needs no content projection).
pub fn count_step_matmuls(kind: CellKind) -> Result<u64> {
    count_step_matmuls_at(kind, 8, 8)
}

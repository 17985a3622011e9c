//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cells::{CellKind, CellParams, StateVars};
use crate::corpus::{Batch, EncodedPair, EOS};
use crate::error::{Error, Result};
use crate::seq2seq::{ModelConfig, Seq2SeqModel};
use crate::tensor::{Graph, Tensor, Var};

/// Default perturbation for central differences.
pub const STEP: f64 = 1e-5;

/// Relative errors below this denominator floor are measured absolutely,
/// so gradients that are zero analytically do not divide by noise.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct SlotCheck {
    pub name: String,
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub slots: Vec<SlotCheck>,
    pub worst_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward` against central differences for every element of
/// every named parameter. `loss` builds the scalar loss from the bound
/// parameter handles, in the order given.
///
/// `max_per_slot` caps how many elements of each slot are probed; elements
/// are taken at an even stride so the whole tensor is sampled.
pub fn check<F>(params: &[(String, Tensor<f64>)], max_per_slot: Option<usize>, loss: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t)).collect();
        let l = loss(&mut g, &vars)?;
        let mut grads = g.backward(l)?;
        vars.iter()
            .zip(params)
            .map(|(v, (_, t))| grads.remove(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect::<Vec<_>>()
    };

    let eval = |work: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = work.iter().map(|t| g.constant_ref(t)).collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut work: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut slots = Vec::with_capacity(params.len());
    for (s, (name, tensor)) in params.iter().enumerate() {
        let len = tensor.len();
        let stride = match max_per_slot {
            Some(cap) if cap > 0 && len > cap => len.div_ceil(cap),
            _ => 1,
        };
        let mut report = SlotCheck { name: name.clone(), checked: 0, worst_rel_err: 0.0, worst_abs_err: 0.0 };
        for j in (0..len).step_by(stride) {
            let orig = work[s].data()[j];
            work[s].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[s].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[s].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[s].data()[j];
            report.checked += 1;
            report.worst_rel_err = report.worst_rel_err.max(rel_err(a, numeric));
            report.worst_abs_err = report.worst_abs_err.max((a - numeric).abs());
        }
        slots.push(report);
    }
    let worst_rel_err = slots.iter().map(|s| s.worst_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { slots, worst_rel_err })
}

/// Initial weights are scaled up by this much before checking, so the
/// gates leave their near-linear region.
const WEIGHT_SCALE: f64 = 6.0;

/// Checks one biased cell unrolled over `steps` random inputs (batch of 2)
/// under the loss `sum(h_T²)`.
pub fn check_cell(kind: CellKind, input_dim: usize, hidden_dim: usize, steps: usize, seed: u64) -> Result<GradCheckReport> {
    if input_dim == 0 || hidden_dim == 0 || steps == 0 {
        return Err(Error::Config("gradcheck dimensions and steps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = CellParams::<f64>::init(kind, input_dim, hidden_dim, true, &mut rng);
    for (_, w) in params.tensors_mut() {
        *w = w.map(|v| v * WEIGHT_SCALE);
    }
    let xs: Vec<Tensor<f64>> = (0..steps).map(|_| Tensor::uniform(&[2, input_dim], -1.0, 1.0, &mut rng)).collect();
    let named: Vec<(String, Tensor<f64>)> = params.tensors().map(|(n, w)| (n.to_string(), w.clone())).collect();
    check(&named, None, |g, vars| {
        let cell = params.bind_vars(vars)?;
        let mut state = StateVars::zeros(g, kind, 2, hidden_dim);
        for x in &xs {
            let x = g.constant(x.clone());
            state = cell.step(g, state, x)?.0;
        }
        let sq = g.mul(state.h, state.h)?;
        g.sum(sq)
    })
}

/// Checks the full encoder-decoder loss on two fixed sentence pairs over a
/// vocabulary of 8.
pub fn check_seq2seq(cell: CellKind, embed_dim: usize, hidden_dim: usize, seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig { cell, src_vocab: 8, tgt_vocab: 8, embed_dim, hidden_dim, attn_dim: hidden_dim };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Seq2SeqModel::<f64>::init(config, &mut rng)?;
    for (_, w) in model.tensors_mut() {
        *w = w.map(|v| v * WEIGHT_SCALE);
    }
    let pairs = vec![EncodedPair { src: vec![4, 5, 6], tgt: vec![6, 5, EOS] }, EncodedPair { src: vec![7, 4], tgt: vec![4, 7, 7, EOS] }];
    let batch = Batch::from_pairs(&pairs, vec![0, 1]);
    let named: Vec<(String, Tensor<f64>)> = model.tensors().into_iter().map(|(n, w)| (n, w.clone())).collect();
    check(&named, None, |g, vars| model.bind_vars(vars)?.sequence_loss(g, &batch, 0.0, false))
}

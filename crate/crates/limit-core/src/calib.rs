//! Set-to-set meta-calibration: a one-layer single-head transformer that
//! co-adapts classifier rows and a query embedding. Each query instance
//! gets its own set (all classifier rows plus that instance's embedding),
//! so the transformed embedding is instance-specific.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Dropout behaviour switch; everything else is mode-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Bias-free projections plus the layer-norm affine pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wfc: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub dropout_p: f64,
    /// When set, layer norm runs before dropout inside the output
    /// transformation (the default is dropout first).
    pub norm_before_dropout: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl CalibrationParams {
    /// Scaled-uniform init with fan-in scaling; layer norm starts at
    /// gamma = 1, beta = 0.
    pub fn new<R: Rng>(d: usize, hidden: usize, dropout_p: f64, rng: &mut R) -> Self {
        let proj = |fan_in: usize, shape: Vec<usize>, rng: &mut R| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape, data).expect("projection shape")
        };
        CalibrationParams {
            wq: proj(d, vec![d, hidden], rng),
            wk: proj(d, vec![d, hidden], rng),
            wv: proj(d, vec![d, hidden], rng),
            wfc: proj(hidden, vec![hidden, d], rng),
            gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            beta: Tensor::zeros(vec![d]),
            dropout_p,
            norm_before_dropout: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> CalibVars {
        CalibVars {
            wq: tape.leaf(self.wq.clone(), trainable),
            wk: tape.leaf(self.wk.clone(), trainable),
            wv: tape.leaf(self.wv.clone(), trainable),
            wfc: tape.leaf(self.wfc.clone(), trainable),
            gamma: tape.leaf(self.gamma.clone(), trainable),
            beta: tape.leaf(self.beta.clone(), trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wfc,
            &mut self.gamma,
            &mut self.beta,
        ]
    }
}

/// Tape handles for the calibration parameters.
#[derive(Clone, Copy)]
pub struct CalibVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wfc: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl CalibVars {
    pub fn param_vars(&self) -> Vec<Var> {
        vec![self.wq, self.wk, self.wv, self.wfc, self.gamma, self.beta]
    }
}

/// The residual output transformation: dropout and layer norm.
fn tau<R: Rng>(
    tape: &mut Tape,
    vars: &CalibVars,
    params: &CalibrationParams,
    z: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let train = mode == Mode::Train;
    if params.norm_before_dropout {
        let normed = tape.layer_norm_rows(z, vars.gamma, vars.beta, LAYER_NORM_EPS)?;
        tape.dropout(normed, params.dropout_p, train, rng)
    } else {
        let dropped = tape.dropout(z, params.dropout_p, train, rng)?;
        tape.layer_norm_rows(dropped, vars.gamma, vars.beta, LAYER_NORM_EPS)
    }
}

/// Attention over pre-projected rows. `q`, `k`, `v` are the projected set
/// `[m, hidden]`; `x` is the unprojected set `[m, d]`. The attention
/// scale is `1/sqrt(d)` (the embedding dimension).
fn attend_projected<R: Rng>(
    tape: &mut Tape,
    vars: &CalibVars,
    params: &CalibrationParams,
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let d = params.embed_dim() as f64;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / d.sqrt());
    let attn = tape.softmax_rows(scaled)?;
    // canonical-order summation keeps row permutations exactly equivariant
    let mixed = tape.matmul_exact(attn, v)?;
    let back = tape.matmul(mixed, vars.wfc)?;
    let z = tape.add(x, back)?;
    tau(tape, vars, params, z, mode, rng)
}

/// One self-attention pass over a set of `m` row vectors.
pub fn self_attend<R: Rng>(
    tape: &mut Tape,
    vars: &CalibVars,
    params: &CalibrationParams,
    set: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Var, TensorError> {
    let q = tape.matmul(set, vars.wq)?;
    let k = tape.matmul(set, vars.wk)?;
    let v = tape.matmul(set, vars.wv)?;
    attend_projected(tape, vars, params, set, q, k, v, mode, rng)
}

/// Per-instance calibrated set outputs: `w_tilde` is the instance-specific
/// transformed classifier, `emb_tilde` the transformed query embedding.
pub struct Calibrated {
    /// `(w_tilde[n, d], emb_tilde[1, d])` per query instance.
    pub per_instance: Vec<(Var, Var)>,
}

/// Run the set-to-set function once per query instance over the joint set
/// of classifier rows and that instance's embedding. Classifier and
/// embedding projections are computed once and sliced per instance, which
/// is algebraically identical to projecting each per-instance set.
pub fn calibrate<R: Rng>(
    tape: &mut Tape,
    vars: &CalibVars,
    params: &CalibrationParams,
    w_hat: Var,
    emb: Var,
    mode: Mode,
    rng: &mut R,
) -> Result<Calibrated, TensorError> {
    let n = tape.value(w_hat).rows();
    let b = tape.value(emb).rows();

    let wq_rows = tape.matmul(w_hat, vars.wq)?;
    let wk_rows = tape.matmul(w_hat, vars.wk)?;
    let wv_rows = tape.matmul(w_hat, vars.wv)?;
    let eq_rows = tape.matmul(emb, vars.wq)?;
    let ek_rows = tape.matmul(emb, vars.wk)?;
    let ev_rows = tape.matmul(emb, vars.wv)?;

    let mut per_instance = Vec::with_capacity(b);
    for i in 0..b {
        let e_i = tape.slice_rows(emb, i, 1)?;
        let x = tape.concat_rows(&[w_hat, e_i])?;
        let eq_i = tape.slice_rows(eq_rows, i, 1)?;
        let ek_i = tape.slice_rows(ek_rows, i, 1)?;
        let ev_i = tape.slice_rows(ev_rows, i, 1)?;
        let q = tape.concat_rows(&[wq_rows, eq_i])?;
        let k = tape.concat_rows(&[wk_rows, ek_i])?;
        let v = tape.concat_rows(&[wv_rows, ev_i])?;
        let out = attend_projected(tape, vars, params, x, q, k, v, mode, rng)?;
        let w_tilde = tape.slice_rows(out, 0, n)?;
        let emb_tilde = tape.slice_rows(out, n, 1)?;
        per_instance.push((w_tilde, emb_tilde));
    }
    Ok(Calibrated { per_instance })
}

/// Per-instance inner product of the transformed classifier against the
/// transformed embedding, stacked into `[b, n]` logits.
pub fn calibrated_logits(tape: &mut Tape, cal: &Calibrated) -> Result<Var, TensorError> {
    let mut rows = Vec::with_capacity(cal.per_instance.len());
    for &(w_tilde, emb_tilde) in &cal.per_instance {
        let wt = tape.transpose(w_tilde)?;
        rows.push(tape.matmul(emb_tilde, wt)?);
    }
    tape.concat_rows(&rows)
}

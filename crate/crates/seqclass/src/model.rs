//! Forward computation: embedding lookup, recurrent cells, dropout and the
//! classifier head.
//!
//! The embedding multiplies a one-hot step vector against the embedding
//! weights, which collapses to a row lookup; the cells consume one embedded
//! step at a time starting from zero state. All three LSTM gates carry a
//! diagonal peephole on the previous cell state. The head sees only the
//! final hidden state, after dropout.

use crate::encoding::EncodedSequence;
use crate::error::{Error, Result};
use crate::numerics::{hadamard, matmul, sigmoid, softmax, tanh_act, Matrix, Rng};

/// Which recurrent cell the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Param(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Output head: a single sigmoid unit for binary tasks, or a softmax over
/// `k` classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Binary,
    Multiclass(usize),
}

impl HeadKind {
    /// Number of classes the head distinguishes.
    pub fn classes(&self) -> usize {
        match self {
            HeadKind::Binary => 2,
            HeadKind::Multiclass(k) => *k,
        }
    }

    /// Width of the output layer.
    pub fn out_dim(&self) -> usize {
        match self {
            HeadKind::Binary => 1,
            HeadKind::Multiclass(k) => *k,
        }
    }
}

/// Embedding table: one row per vocabulary index (row 0 serves padding and
/// unknown words).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub weights: Matrix, // vocab_size x embedding_dim
}

/// Elman cell parameters: h_t = tanh(x_t.w + h_prev.p + b).
#[derive(Clone, Debug, PartialEq)]
pub struct RnnParams {
    pub w: Matrix, // embedding_dim x hidden_dim
    pub p: Matrix, // hidden_dim x hidden_dim
    pub b: Matrix, // 1 x hidden_dim
}

/// Peephole LSTM parameters. For each gate, `w` maps the input, `p` the
/// previous hidden state and `q` (a diagonal, stored as a row vector) the
/// previous cell state. The candidate path has no peephole.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w_ig: Matrix,
    pub p_ig: Matrix,
    pub q_ig: Matrix,
    pub b_ig: Matrix,
    pub w_fg: Matrix,
    pub p_fg: Matrix,
    pub q_fg: Matrix,
    pub b_fg: Matrix,
    pub w_og: Matrix,
    pub p_og: Matrix,
    pub q_og: Matrix,
    pub b_og: Matrix,
    pub w_m: Matrix,
    pub p_m: Matrix,
    pub b_m: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellParams {
    Rnn(RnnParams),
    Lstm(LstmParams),
}

impl CellParams {
    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Rnn(_) => CellKind::Rnn,
            CellParams::Lstm(_) => CellKind::Lstm,
        }
    }
}

/// Output layer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_out: Matrix, // hidden_dim x out_dim
    pub b_out: Matrix, // 1 x out_dim
    pub kind: HeadKind,
}

/// Full parameter set for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embedding: EmbeddingParams,
    pub cell: CellParams,
    pub head: HeadParams,
    dropout_rate: f64,
}

fn glorot(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

impl ModelParams {
    /// Random initialization: weights uniform in +-sqrt(6/(fan_in+fan_out)),
    /// biases zero. Tensors are drawn in a fixed order (embedding, cell,
    /// head) so a given seed always produces the same model.
    pub fn new_random(
        vocab_size: usize,
        embedding_dim: usize,
        hidden_dim: usize,
        cell_kind: CellKind,
        head_kind: HeadKind,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if vocab_size == 0 || embedding_dim == 0 || hidden_dim == 0 {
            return Err(Error::Param(
                "vocab_size, embedding_dim and hidden_dim must be positive".into(),
            ));
        }
        if let HeadKind::Multiclass(k) = head_kind {
            if k < 2 {
                return Err(Error::Param(format!("multiclass head needs k >= 2, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Param(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let (e, h) = (embedding_dim, hidden_dim);
        let embedding = EmbeddingParams {
            weights: glorot(rng, vocab_size, e, vocab_size, e),
        };
        let cell = match cell_kind {
            CellKind::Rnn => CellParams::Rnn(RnnParams {
                w: glorot(rng, e, h, e, h),
                p: glorot(rng, h, h, h, h),
                b: Matrix::zeros(1, h),
            }),
            CellKind::Lstm => {
                let mut gate = || {
                    (
                        glorot(rng, e, h, e, h),
                        glorot(rng, h, h, h, h),
                        glorot(rng, 1, h, h, h),
                        Matrix::zeros(1, h),
                    )
                };
                let (w_ig, p_ig, q_ig, b_ig) = gate();
                let (w_fg, p_fg, q_fg, b_fg) = gate();
                let (w_og, p_og, q_og, b_og) = gate();
                CellParams::Lstm(LstmParams {
                    w_ig,
                    p_ig,
                    q_ig,
                    b_ig,
                    w_fg,
                    p_fg,
                    q_fg,
                    b_fg,
                    w_og,
                    p_og,
                    q_og,
                    b_og,
                    w_m: glorot(rng, e, h, e, h),
                    p_m: glorot(rng, h, h, h, h),
                    b_m: Matrix::zeros(1, h),
                })
            }
        };
        let k_out = head_kind.out_dim();
        let head = HeadParams {
            w_out: glorot(rng, h, k_out, h, k_out),
            b_out: Matrix::zeros(1, k_out),
            kind: head_kind,
        };
        Ok(ModelParams {
            embedding,
            cell,
            head,
            dropout_rate,
        })
    }

    /// Assembles a model from its parts, validating that every shape is
    /// mutually consistent.
    pub fn from_parts(
        embedding: EmbeddingParams,
        cell: CellParams,
        head: HeadParams,
        dropout_rate: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Param(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let emb_dim = embedding.weights.cols();
        let check = |cond: bool, what: &str| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::Param(format!("inconsistent model shapes: {what}")))
            }
        };
        let hidden = match &cell {
            CellParams::Rnn(r) => {
                let h = r.w.cols();
                check(r.w.rows() == emb_dim, "rnn input weights vs embedding dim")?;
                check(r.p.shape() == (h, h), "rnn recurrent weights")?;
                check(r.b.shape() == (1, h), "rnn bias")?;
                h
            }
            CellParams::Lstm(l) => {
                let h = l.w_ig.cols();
                let gates = [
                    (&l.w_ig, &l.p_ig, Some(&l.q_ig), &l.b_ig),
                    (&l.w_fg, &l.p_fg, Some(&l.q_fg), &l.b_fg),
                    (&l.w_og, &l.p_og, Some(&l.q_og), &l.b_og),
                    (&l.w_m, &l.p_m, None, &l.b_m),
                ];
                for (w, p, q, b) in gates {
                    check(w.shape() == (emb_dim, h), "lstm input weights")?;
                    check(p.shape() == (h, h), "lstm recurrent weights")?;
                    if let Some(q) = q {
                        check(q.shape() == (1, h), "lstm peephole weights")?;
                    }
                    check(b.shape() == (1, h), "lstm bias")?;
                }
                h
            }
        };
        check(
            head.w_out.shape() == (hidden, head.kind.out_dim()),
            "head weights vs hidden dim",
        )?;
        check(head.b_out.shape() == (1, head.kind.out_dim()), "head bias")?;
        Ok(ModelParams {
            embedding,
            cell,
            head,
            dropout_rate,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.weights.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.weights.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        match &self.cell {
            CellParams::Rnn(r) => r.p.rows(),
            CellParams::Lstm(l) => l.p_ig.rows(),
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    /// Parameter tensors in a fixed, named order. The same order is used by
    /// gradients, SGD updates, gradient checking and the model file.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![("embedding", &self.embedding.weights)];
        match &self.cell {
            CellParams::Rnn(r) => {
                out.extend([("rnn.w", &r.w), ("rnn.p", &r.p), ("rnn.b", &r.b)]);
            }
            CellParams::Lstm(l) => {
                out.extend([
                    ("lstm.w_ig", &l.w_ig),
                    ("lstm.p_ig", &l.p_ig),
                    ("lstm.q_ig", &l.q_ig),
                    ("lstm.b_ig", &l.b_ig),
                    ("lstm.w_fg", &l.w_fg),
                    ("lstm.p_fg", &l.p_fg),
                    ("lstm.q_fg", &l.q_fg),
                    ("lstm.b_fg", &l.b_fg),
                    ("lstm.w_og", &l.w_og),
                    ("lstm.p_og", &l.p_og),
                    ("lstm.q_og", &l.q_og),
                    ("lstm.b_og", &l.b_og),
                    ("lstm.w_m", &l.w_m),
                    ("lstm.p_m", &l.p_m),
                    ("lstm.b_m", &l.b_m),
                ]);
            }
        }
        out.extend([("head.w", &self.head.w_out), ("head.b", &self.head.b_out)]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut out: Vec<(&'static str, &mut Matrix)> =
            vec![("embedding", &mut self.embedding.weights)];
        match &mut self.cell {
            CellParams::Rnn(r) => {
                out.extend([
                    ("rnn.w", &mut r.w),
                    ("rnn.p", &mut r.p),
                    ("rnn.b", &mut r.b),
                ]);
            }
            CellParams::Lstm(l) => {
                out.extend([
                    ("lstm.w_ig", &mut l.w_ig),
                    ("lstm.p_ig", &mut l.p_ig),
                    ("lstm.q_ig", &mut l.q_ig),
                    ("lstm.b_ig", &mut l.b_ig),
                    ("lstm.w_fg", &mut l.w_fg),
                    ("lstm.p_fg", &mut l.p_fg),
                    ("lstm.q_fg", &mut l.q_fg),
                    ("lstm.b_fg", &mut l.b_fg),
                    ("lstm.w_og", &mut l.w_og),
                    ("lstm.p_og", &mut l.p_og),
                    ("lstm.q_og", &mut l.q_og),
                    ("lstm.b_og", &mut l.b_og),
                    ("lstm.w_m", &mut l.w_m),
                    ("lstm.p_m", &mut l.p_m),
                    ("lstm.b_m", &mut l.b_m),
                ]);
            }
        }
        out.extend([
            ("head.w", &mut self.head.w_out),
            ("head.b", &mut self.head.b_out),
        ]);
        out
    }
}

/// Embedding lookup: row `t` of the output is row `seq[t]` of the weights.
/// Equivalent to multiplying the one-hot step matrix by the weights.
pub fn embed(seq: &EncodedSequence, e: &EmbeddingParams) -> Result<Matrix> {
    if seq.is_empty() {
        return Err(Error::Param("cannot embed an empty sequence".into()));
    }
    let dim = e.weights.cols();
    let mut out = Matrix::zeros(seq.len(), dim);
    for (t, &idx) in seq.indices().iter().enumerate() {
        if idx >= e.weights.rows() {
            return Err(Error::Index {
                position: t,
                value: idx,
                bound: e.weights.rows(),
            });
        }
        out.row_mut(t).copy_from_slice(e.weights.row(idx));
    }
    Ok(out)
}

/// One Elman step: tanh(x_t.w + h_prev.p + b).
pub fn rnn_step(x_t: &Matrix, h_prev: &Matrix, p: &RnnParams) -> Result<Matrix> {
    let pre = matmul(x_t, &p.w)?
        .add(&matmul(h_prev, &p.p)?)?
        .add(&p.b)?;
    Ok(tanh_act(&pre))
}

/// Per-step LSTM activations kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct LstmStepTrace {
    pub ig: Matrix,
    pub fg: Matrix,
    pub og: Matrix,
    pub m1: Matrix,
    pub m: Matrix,
    pub h: Matrix,
}

pub(crate) fn lstm_step_trace(
    x_t: &Matrix,
    h_prev: &Matrix,
    m_prev: &Matrix,
    p: &LstmParams,
) -> Result<LstmStepTrace> {
    let gate_pre = |w: &Matrix, pp: &Matrix, q: &Matrix, b: &Matrix| -> Result<Matrix> {
        matmul(x_t, w)?
            .add(&matmul(h_prev, pp)?)?
            .add(&hadamard(m_prev, q)?)?
            .add(b)
    };
    let ig = sigmoid(&gate_pre(&p.w_ig, &p.p_ig, &p.q_ig, &p.b_ig)?);
    let fg = sigmoid(&gate_pre(&p.w_fg, &p.p_fg, &p.q_fg, &p.b_fg)?);
    // output gate peeps at the previous cell state, not the updated one
    let og = sigmoid(&gate_pre(&p.w_og, &p.p_og, &p.q_og, &p.b_og)?);
    let m1 = tanh_act(
        &matmul(x_t, &p.w_m)?
            .add(&matmul(h_prev, &p.p_m)?)?
            .add(&p.b_m)?,
    );
    let m = hadamard(&fg, m_prev)?.add(&hadamard(&ig, &m1)?)?;
    let h = hadamard(&og, &tanh_act(&m))?;
    debug_assert!(
        ig.data().iter().all(|&v| v > 0.0 && v < 1.0)
            && fg.data().iter().all(|&v| v > 0.0 && v < 1.0)
            && og.data().iter().all(|&v| v > 0.0 && v < 1.0),
        "gate activation escaped (0,1)"
    );
    debug_assert!(
        h.data().iter().all(|&v| v > -1.0 && v < 1.0),
        "hidden state escaped (-1,1)"
    );
    Ok(LstmStepTrace {
        ig,
        fg,
        og,
        m1,
        m,
        h,
    })
}

/// One peephole-LSTM step; returns the new hidden and cell state.
pub fn lstm_step(
    x_t: &Matrix,
    h_prev: &Matrix,
    m_prev: &Matrix,
    p: &LstmParams,
) -> Result<(Matrix, Matrix)> {
    let trace = lstm_step_trace(x_t, h_prev, m_prev, p)?;
    Ok((trace.h, trace.m))
}

/// Inverted dropout: in training mode each entry is zeroed with
/// probability `rate` and survivors are scaled by 1/(1-rate); inference is
/// an identity. A rate of exactly 0 draws nothing from the generator.
pub fn dropout(x: &Matrix, rate: f64, rng: &mut Rng, training: bool) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.rows(), x.cols(), rate, rng);
    hadamard(x, &mask)
}

/// Mask of scale factors: 0 for dropped entries, 1/(1-rate) for kept ones.
pub(crate) fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix {
    let keep_scale = 1.0 / (1.0 - rate);
    Matrix::from_fn(rows, cols, |_, _| {
        if rng.next_f64() < rate {
            0.0
        } else {
            keep_scale
        }
    })
}

/// Per-step activations recorded by `forward`, consumed by the backward
/// pass and available read-only for inspection.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) indices: Vec<usize>,
    pub(crate) inputs: Vec<Matrix>, // embedded x_t, 1 x embedding_dim
    pub(crate) trace: CellTrace,
    pub(crate) dropout_scale: Option<Matrix>,
    pub(crate) head_input: Matrix, // final hidden state after dropout
    pub(crate) probs: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) enum CellTrace {
    Rnn {
        h: Vec<Matrix>,
    },
    Lstm {
        h: Vec<Matrix>,
        m: Vec<Matrix>,
        ig: Vec<Matrix>,
        fg: Vec<Matrix>,
        og: Vec<Matrix>,
        m1: Vec<Matrix>,
    },
}

impl ForwardCache {
    /// Hidden states h_1..h_T in step order.
    pub fn hidden_states(&self) -> &[Matrix] {
        match &self.trace {
            CellTrace::Rnn { h } => h,
            CellTrace::Lstm { h, .. } => h,
        }
    }

    /// Cell states m_1..m_T; None for RNN models.
    pub fn cell_states(&self) -> Option<&[Matrix]> {
        match &self.trace {
            CellTrace::Rnn { .. } => None,
            CellTrace::Lstm { m, .. } => Some(m),
        }
    }

    pub fn input_gates(&self) -> Option<&[Matrix]> {
        match &self.trace {
            CellTrace::Rnn { .. } => None,
            CellTrace::Lstm { ig, .. } => Some(ig),
        }
    }

    pub fn forget_gates(&self) -> Option<&[Matrix]> {
        match &self.trace {
            CellTrace::Rnn { .. } => None,
            CellTrace::Lstm { fg, .. } => Some(fg),
        }
    }

    pub fn output_gates(&self) -> Option<&[Matrix]> {
        match &self.trace {
            CellTrace::Rnn { .. } => None,
            CellTrace::Lstm { og, .. } => Some(og),
        }
    }

    /// Head output: 1x1 for the sigmoid head, 1xk for softmax.
    pub fn probabilities(&self) -> &Matrix {
        &self.probs
    }
}

/// Class decision from head probabilities: the sigmoid head compares
/// against `threshold`, the softmax head takes the argmax (lowest index on
/// exact ties).
pub fn predict_class(probs: &Matrix, kind: HeadKind, threshold: f64) -> usize {
    match kind {
        HeadKind::Binary => usize::from(probs.get(0, 0) >= threshold),
        HeadKind::Multiclass(_) => {
            let mut best = 0;
            for j in 1..probs.cols() {
                if probs.get(0, j) > probs.get(0, best) {
                    best = j;
                }
            }
            best
        }
    }
}

/// Full forward pass: embed, run the cell over every step from zero state,
/// apply dropout to the final hidden state, apply the head. Returns the
/// probabilities and the cache needed for backpropagation through time.
pub fn forward(
    seq: &EncodedSequence,
    model: &ModelParams,
    rng: &mut Rng,
    training: bool,
) -> Result<(Matrix, ForwardCache)> {
    let embedded = embed(seq, &model.embedding)?;
    let steps = seq.len();
    let hidden_dim = model.hidden_dim();
    let mut inputs = Vec::with_capacity(steps);
    for t in 0..steps {
        inputs.push(Matrix::from_vec(1, embedded.cols(), embedded.row(t).to_vec())?);
    }

    let trace = match &model.cell {
        CellParams::Rnn(p) => {
            let mut h_states = Vec::with_capacity(steps);
            let mut h_prev = Matrix::zeros(1, hidden_dim);
            for x_t in &inputs {
                let h = rnn_step(x_t, &h_prev, p)?;
                h_prev = h.clone();
                h_states.push(h);
            }
            CellTrace::Rnn { h: h_states }
        }
        CellParams::Lstm(p) => {
            let mut h_states = Vec::with_capacity(steps);
            let mut m_states = Vec::with_capacity(steps);
            let mut igs = Vec::with_capacity(steps);
            let mut fgs = Vec::with_capacity(steps);
            let mut ogs = Vec::with_capacity(steps);
            let mut m1s = Vec::with_capacity(steps);
            let mut h_prev = Matrix::zeros(1, hidden_dim);
            let mut m_prev = Matrix::zeros(1, hidden_dim);
            for x_t in &inputs {
                let step = lstm_step_trace(x_t, &h_prev, &m_prev, p)?;
                h_prev = step.h.clone();
                m_prev = step.m.clone();
                h_states.push(step.h);
                m_states.push(step.m);
                igs.push(step.ig);
                fgs.push(step.fg);
                ogs.push(step.og);
                m1s.push(step.m1);
            }
            CellTrace::Lstm {
                h: h_states,
                m: m_states,
                ig: igs,
                fg: fgs,
                og: ogs,
                m1: m1s,
            }
        }
    };

    let final_h = match &trace {
        CellTrace::Rnn { h } => h.last().unwrap().clone(),
        CellTrace::Lstm { h, .. } => h.last().unwrap().clone(),
    };

    let (head_input, dropout_scale) = if training && model.dropout_rate > 0.0 {
        let mask = dropout_mask(1, hidden_dim, model.dropout_rate, rng);
        (hadamard(&final_h, &mask)?, Some(mask))
    } else {
        (final_h, None)
    };

    let logits = matmul(&head_input, &model.head.w_out)?.add(&model.head.b_out)?;
    let probs = match model.head.kind {
        HeadKind::Binary => sigmoid(&logits),
        HeadKind::Multiclass(_) => softmax(&logits),
    };

    let cache = ForwardCache {
        indices: seq.indices().to_vec(),
        inputs,
        trace,
        dropout_scale,
        head_input,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodedSequence;

    fn seq(indices: &[usize]) -> EncodedSequence {
        EncodedSequence::from_indices(indices.to_vec())
    }

    fn scalar(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    fn ones(rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| 1.0)
    }

    #[test]
    fn embed_shape_matches_sequence_and_dim() {
        let mut rng = Rng::new(1);
        let weights = Matrix::from_fn(7, 512, |_, _| rng.uniform(-0.1, 0.1));
        let e = EmbeddingParams { weights };
        let indices: Vec<usize> = (0..35).map(|t| t % 7).collect();
        let out = embed(&seq(&indices), &e).unwrap();
        assert_eq!(out.shape(), (35, 512));
    }

    #[test]
    fn embed_padded_step_reads_row_zero() {
        let weights = Matrix::from_vec(2, 3, vec![9.0, 8.0, 7.0, 1.0, 2.0, 3.0]).unwrap();
        let e = EmbeddingParams { weights };
        let out = embed(&seq(&[0, 1]), &e).unwrap();
        assert_eq!(out.row(0), &[9.0, 8.0, 7.0]);
        assert_eq!(out.row(1), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn embed_rejects_out_of_range_index() {
        let e = EmbeddingParams {
            weights: Matrix::zeros(3, 2),
        };
        let err = embed(&seq(&[0, 5]), &e).unwrap_err();
        match err {
            Error::Index {
                position,
                value,
                bound,
            } => {
                assert_eq!((position, value, bound), (1, 5, 3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn embed_matches_one_hot_matmul() {
        let mut rng = Rng::new(17);
        let weights = Matrix::from_fn(4, 3, |_, _| rng.uniform(-2.0, 2.0));
        let e = EmbeddingParams {
            weights: weights.clone(),
        };
        let indices = vec![2, 0, 3, 3, 1];
        let looked_up = embed(&seq(&indices), &e).unwrap();
        let mut one_hot = Matrix::zeros(indices.len(), 4);
        for (t, &i) in indices.iter().enumerate() {
            one_hot.set(t, i, 1.0);
        }
        let product = matmul(&one_hot, &weights).unwrap();
        assert_eq!(looked_up, product);
    }

    #[test]
    fn rnn_step_zero_params_gives_zero() {
        let p = RnnParams {
            w: Matrix::zeros(3, 2),
            p: Matrix::zeros(2, 2),
            b: Matrix::zeros(1, 2),
        };
        let h = rnn_step(&ones(1, 3), &Matrix::zeros(1, 2), &p).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rnn_step_scalar_tanh() {
        let p = RnnParams {
            w: scalar(1.0),
            p: scalar(1.0),
            b: scalar(0.0),
        };
        let h = rnn_step(&scalar(1.0), &scalar(0.0), &p).unwrap();
        assert!((h.get(0, 0) - 0.7615941559557649).abs() < 1e-15);
    }

    #[test]
    fn rnn_step_bias_only() {
        let p = RnnParams {
            w: scalar(1.0),
            p: scalar(1.0),
            b: scalar(1.0),
        };
        let h = rnn_step(&scalar(0.0), &scalar(0.0), &p).unwrap();
        assert!((h.get(0, 0) - 0.7615941559557649).abs() < 1e-15);
    }

    fn scalar_lstm(weight: f64, bias: f64) -> LstmParams {
        LstmParams {
            w_ig: scalar(weight),
            p_ig: scalar(weight),
            q_ig: scalar(weight),
            b_ig: scalar(bias),
            w_fg: scalar(weight),
            p_fg: scalar(weight),
            q_fg: scalar(weight),
            b_fg: scalar(bias),
            w_og: scalar(weight),
            p_og: scalar(weight),
            q_og: scalar(weight),
            b_og: scalar(bias),
            w_m: scalar(weight),
            p_m: scalar(weight),
            b_m: scalar(bias),
        }
    }

    #[test]
    fn lstm_step_all_zero_params() {
        let p = scalar_lstm(0.0, 0.0);
        let (h, m) = lstm_step(&scalar(5.0), &scalar(0.0), &scalar(0.0), &p).unwrap();
        assert_eq!(h.get(0, 0), 0.0);
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn lstm_step_scalar_trace() {
        // independent scalar evaluation of the gate equations with all
        // weights 1, biases 0, x=1, zero previous state
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        let m_expected = sig1 * 1.0f64.tanh();
        let h_expected = sig1 * m_expected.tanh();
        let p = scalar_lstm(1.0, 0.0);
        let (h, m) = lstm_step(&scalar(1.0), &scalar(0.0), &scalar(0.0), &p).unwrap();
        assert!((m.get(0, 0) - m_expected).abs() < 1e-15, "m = {}", m.get(0, 0));
        assert!((h.get(0, 0) - h_expected).abs() < 1e-15, "h = {}", h.get(0, 0));
        assert!((m.get(0, 0) - 0.5567699411459397).abs() < 1e-12);
        assert!((h.get(0, 0) - 0.3696063529357058).abs() < 1e-12);
    }

    #[test]
    fn lstm_step_saturated_gates_carry_cell_state() {
        let mut p = scalar_lstm(0.0, 0.0);
        p.b_fg = scalar(20.0);
        p.b_ig = scalar(-20.0);
        let (_, m) = lstm_step(&scalar(1.0), &scalar(0.0), &scalar(1.0), &p).unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-8, "m = {}", m.get(0, 0));
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let x = ones(4, 5);
        let mut rng = Rng::new(1);
        let out = dropout(&x, 0.0, &mut rng, true).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let x = ones(4, 5);
        let mut rng = Rng::new(1);
        let out = dropout(&x, 0.9, &mut rng, false).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let x = ones(1, 1);
        let mut rng = Rng::new(1);
        assert!(dropout(&x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_zeroed_fraction_concentrates() {
        let x = ones(100, 1000);
        let mut rng = Rng::new(123);
        let out = dropout(&x, 0.1, &mut rng, true).unwrap();
        let zeroed = out.data().iter().filter(|&&v| v == 0.0).count() as f64;
        let fraction = zeroed / 1e5;
        assert!((fraction - 0.1).abs() < 0.01, "fraction = {fraction}");
        // survivors carry the inverse keep probability
        let survivor = out.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((survivor - 1.0 / 0.9).abs() < 1e-15);
    }

    fn tiny_model(cell: CellKind, head: HeadKind, seed: u64, rate: f64) -> ModelParams {
        let mut rng = Rng::new(seed);
        ModelParams::new_random(6, 4, 3, cell, head, rate, &mut rng).unwrap()
    }

    #[test]
    fn forward_binary_head_in_unit_interval() {
        let model = tiny_model(CellKind::Lstm, HeadKind::Binary, 2, 0.0);
        let mut rng = Rng::new(0);
        let (p, _) = forward(&seq(&[0, 1, 2, 3]), &model, &mut rng, false).unwrap();
        assert_eq!(p.shape(), (1, 1));
        let v = p.get(0, 0);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn forward_multiclass_head_normalizes() {
        let model = tiny_model(CellKind::Rnn, HeadKind::Multiclass(3), 3, 0.0);
        let mut rng = Rng::new(0);
        let (p, _) = forward(&seq(&[1, 2, 3, 4, 5]), &model, &mut rng, false).unwrap();
        assert_eq!(p.shape(), (1, 3));
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_zero_params_gives_uniform_softmax() {
        let mut model = tiny_model(CellKind::Lstm, HeadKind::Multiclass(3), 4, 0.0);
        for (_, tensor) in model.tensors_mut() {
            for v in tensor.data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = Rng::new(0);
        let (p, _) = forward(&seq(&[1, 2, 3]), &model, &mut rng, false).unwrap();
        for j in 0..3 {
            assert!((p.get(0, j) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(CellKind::Lstm, HeadKind::Binary, 5, 0.5);
        let s = seq(&[1, 2, 0, 3]);
        let run = || {
            let mut rng = Rng::new(99);
            forward(&s, &model, &mut rng, true).unwrap().0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_dropout_zero_training_equals_inference() {
        let model = tiny_model(CellKind::Lstm, HeadKind::Binary, 6, 0.0);
        let s = seq(&[2, 4, 1]);
        let mut rng1 = Rng::new(7);
        let mut rng2 = Rng::new(7);
        let (train_p, _) = forward(&s, &model, &mut rng1, true).unwrap();
        let (infer_p, _) = forward(&s, &model, &mut rng2, false).unwrap();
        assert_eq!(train_p, infer_p);
        // no draws consumed in either mode
        assert_eq!(rng1.next_u64(), rng2.next_u64());
    }

    #[test]
    fn forward_cell_state_growth_bounded() {
        let model = tiny_model(CellKind::Lstm, HeadKind::Binary, 8, 0.0);
        let mut rng = Rng::new(0);
        let indices: Vec<usize> = (0..20).map(|t| (t * 5 + 1) % 6).collect();
        let (_, cache) = forward(&seq(&indices), &model, &mut rng, false).unwrap();
        let m = cache.cell_states().unwrap();
        for t in 0..m.len() {
            for j in 0..m[t].cols() {
                let prev = if t == 0 { 0.0 } else { m[t - 1].get(0, j).abs() };
                assert!(
                    m[t].get(0, j).abs() <= prev + 1.0 + 1e-12,
                    "cell state grew by more than 1 at step {t}"
                );
            }
        }
    }

    #[test]
    fn forward_rejects_empty_sequence() {
        let model = tiny_model(CellKind::Rnn, HeadKind::Binary, 9, 0.0);
        let mut rng = Rng::new(0);
        assert!(forward(&seq(&[]), &model, &mut rng, false).is_err());
    }
}

//! Losses, backpropagation through time, SGD and the epoch loop.
//!
//! Gradients are hand-derived and unrolled over every timestep, including
//! the peephole paths through the gate equations and the embedding rows a
//! batch touches. A central finite-difference oracle (`grad_check`)
//! verifies the analytic gradients entry by entry.

use crate::encoding::{EncodedDataset, EncodedSequence};
use crate::error::{Error, Result};
use crate::model::{
    forward, predict_class, CellKind, CellParams, CellTrace, ForwardCache, HeadKind, LstmParams,
    ModelParams, RnnParams,
};
use crate::numerics::{matmul, tanh_act, Matrix, Rng};

/// All hyperparameters for one training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    /// Defaults to `embedding_dim` when None.
    pub hidden_dim: Option<usize>,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub cell_kind: CellKind,
    pub head_kind: HeadKind,
    pub seed: u64,
    /// Cap on the number of distinct tokens receiving vocabulary indices.
    pub top_words: Option<usize>,
    /// Optional per-class loss weights for imbalanced data; unweighted when
    /// None.
    pub class_weights: Option<Vec<f64>>,
    /// Per-batch L2 gradient clip; None disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 512,
            hidden_dim: None,
            learning_rate: 0.01,
            dropout_rate: 0.1,
            epochs: 30,
            batch_size: 32,
            max_len: 35,
            cell_kind: CellKind::Lstm,
            head_kind: HeadKind::Binary,
            seed: 42,
            top_words: None,
            class_weights: None,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn hidden(&self) -> usize {
        self.hidden_dim.unwrap_or(self.embedding_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Param(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Param(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Param(
                "epochs, batch_size and max_len must be at least 1".into(),
            ));
        }
        if self.embedding_dim == 0 || self.hidden() == 0 {
            return Err(Error::Param(
                "embedding_dim and hidden_dim must be at least 1".into(),
            ));
        }
        if let HeadKind::Multiclass(k) = self.head_kind {
            if k < 2 {
                return Err(Error::Param(format!("multiclass head needs k >= 2, got {k}")));
            }
        }
        if let Some(weights) = &self.class_weights {
            if weights.len() != self.head_kind.classes() {
                return Err(Error::Param(format!(
                    "{} class weights for {} classes",
                    weights.len(),
                    self.head_kind.classes()
                )));
            }
            if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Param("class weights must be finite and nonnegative".into()));
            }
        }
        if let Some(clip) = self.grad_clip {
            if clip <= 0.0 || clip.is_nan() {
                return Err(Error::Param(format!("gradient clip {clip} must be positive")));
            }
        }
        Ok(())
    }
}

/// One gradient tensor per parameter tensor, shape-matched and sharing the
/// parameter naming/order.
#[derive(Clone, Debug)]
pub struct Gradients {
    store: ModelParams,
}

impl Gradients {
    pub fn zeros_like(model: &ModelParams) -> Self {
        let mut store = model.clone();
        for (_, tensor) in store.tensors_mut() {
            for v in tensor.data_mut() {
                *v = 0.0;
            }
        }
        Gradients { store }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        self.store.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        self.store.tensors_mut()
    }

    /// Global L2 norm over every tensor.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    fn scale_in_place(&mut self, factor: f64) {
        for (_, tensor) in self.tensors_mut() {
            tensor.scale_in_place(factor);
        }
    }

    /// Disjoint mutable views: embedding, cell tensors, head weights, head
    /// bias.
    fn split_mut(&mut self) -> (&mut Matrix, &mut CellParams, &mut Matrix, &mut Matrix) {
        (
            &mut self.store.embedding.weights,
            &mut self.store.cell,
            &mut self.store.head.w_out,
            &mut self.store.head.b_out,
        )
    }
}

/// Binary cross-entropy; the probability is clamped to
/// [1e-12, 1 - 1e-12] first so the result is always finite.
pub fn bce_loss(p: f64, y: usize) -> f64 {
    debug_assert!(y < 2, "binary label must be 0 or 1");
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Categorical cross-entropy -ln p[y], with the same clamping as
/// `bce_loss`.
pub fn cce_loss(p: &[f64], y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::Label {
            value: y,
            classes: p.len(),
        });
    }
    Ok(-p[y].clamp(1e-12, 1.0 - 1e-12).ln())
}

fn sample_loss(probs: &Matrix, head: HeadKind, label: usize) -> Result<f64> {
    match head {
        HeadKind::Binary => {
            if label >= 2 {
                return Err(Error::Label {
                    value: label,
                    classes: 2,
                });
            }
            Ok(bce_loss(probs.get(0, 0), label))
        }
        HeadKind::Multiclass(_) => cce_loss(probs.row(0), label),
    }
}

fn add_into_row(target: &mut Matrix, row: usize, delta: &Matrix) {
    for (t, d) in target.row_mut(row).iter_mut().zip(delta.data()) {
        *t += d;
    }
}

fn backward_rnn_sample(
    w_t: &Matrix,
    p_t: &Matrix,
    grads: &mut RnnParams,
    cache: &ForwardCache,
    mut dh: Matrix,
    d_embedding: &mut Matrix,
) -> Result<()> {
    let trace_h = match &cache.trace {
        CellTrace::Rnn { h } => h,
        CellTrace::Lstm { .. } => {
            return Err(Error::Inconsistent("LSTM cache passed to RNN backward".into()))
        }
    };
    let steps = trace_h.len();
    let hidden = dh.cols();
    let zero_state = Matrix::zeros(1, hidden);
    for t in (0..steps).rev() {
        let h_t = &trace_h[t];
        // through tanh: da = dh * (1 - h^2)
        let mut da = dh.clone();
        for (d, &h) in da.data_mut().iter_mut().zip(h_t.data()) {
            *d *= 1.0 - h * h;
        }
        let h_prev = if t == 0 { &zero_state } else { &trace_h[t - 1] };
        grads.w.add_outer_scaled(&cache.inputs[t], &da, 1.0)?;
        grads.p.add_outer_scaled(h_prev, &da, 1.0)?;
        grads.b.add_in_place(&da)?;
        let dx = matmul(&da, w_t)?;
        add_into_row(d_embedding, cache.indices[t], &dx);
        dh = matmul(&da, p_t)?;
    }
    Ok(())
}

/// Transposed LSTM weights, computed once per backward call.
struct LstmTransposed {
    w_ig: Matrix,
    w_fg: Matrix,
    w_og: Matrix,
    w_m: Matrix,
    p_ig: Matrix,
    p_fg: Matrix,
    p_og: Matrix,
    p_m: Matrix,
}

impl LstmTransposed {
    fn of(p: &LstmParams) -> Self {
        LstmTransposed {
            w_ig: p.w_ig.transpose(),
            w_fg: p.w_fg.transpose(),
            w_og: p.w_og.transpose(),
            w_m: p.w_m.transpose(),
            p_ig: p.p_ig.transpose(),
            p_fg: p.p_fg.transpose(),
            p_og: p.p_og.transpose(),
            p_m: p.p_m.transpose(),
        }
    }
}

fn backward_lstm_sample(
    params: &LstmParams,
    tr: &LstmTransposed,
    grads: &mut LstmParams,
    cache: &ForwardCache,
    mut dh: Matrix,
    d_embedding: &mut Matrix,
) -> Result<()> {
    let (h_tr, m_tr, ig_tr, fg_tr, og_tr, m1_tr) = match &cache.trace {
        CellTrace::Lstm {
            h,
            m,
            ig,
            fg,
            og,
            m1,
        } => (h, m, ig, fg, og, m1),
        CellTrace::Rnn { .. } => {
            return Err(Error::Inconsistent("RNN cache passed to LSTM backward".into()))
        }
    };
    let steps = h_tr.len();
    let hidden = dh.cols();
    let zero_state = Matrix::zeros(1, hidden);
    // gradient flowing into m_t from the step after t
    let mut dm_next = vec![0.0; hidden];
    for t in (0..steps).rev() {
        let (ig, fg, og, m1) = (&ig_tr[t], &fg_tr[t], &og_tr[t], &m1_tr[t]);
        let m_t = &m_tr[t];
        let h_prev = if t == 0 { &zero_state } else { &h_tr[t - 1] };
        let m_prev = if t == 0 { &zero_state } else { &m_tr[t - 1] };
        let tanh_m = tanh_act(m_t);

        let mut da_i = vec![0.0; hidden];
        let mut da_f = vec![0.0; hidden];
        let mut da_o = vec![0.0; hidden];
        let mut da_c = vec![0.0; hidden];
        let mut dm_prev = vec![0.0; hidden];
        for j in 0..hidden {
            let dh_j = dh.get(0, j);
            let tm = tanh_m.get(0, j);
            let (igv, fgv, ogv, m1v) = (ig.get(0, j), fg.get(0, j), og.get(0, j), m1.get(0, j));
            // h = og * tanh(m): gradient splits into the gate and the cell
            let dm_total = dm_next[j] + dh_j * ogv * (1.0 - tm * tm);
            da_o[j] = dh_j * tm * ogv * (1.0 - ogv);
            da_f[j] = dm_total * m_prev.get(0, j) * fgv * (1.0 - fgv);
            da_i[j] = dm_total * m1v * igv * (1.0 - igv);
            da_c[j] = dm_total * igv * (1.0 - m1v * m1v);
            // m_{t-1} feeds forward through the forget gate and through all
            // three peepholes
            dm_prev[j] = dm_total * fgv
                + da_i[j] * params.q_ig.get(0, j)
                + da_f[j] * params.q_fg.get(0, j)
                + da_o[j] * params.q_og.get(0, j);
        }
        let da_i = Matrix::from_vec(1, hidden, da_i)?;
        let da_f = Matrix::from_vec(1, hidden, da_f)?;
        let da_o = Matrix::from_vec(1, hidden, da_o)?;
        let da_c = Matrix::from_vec(1, hidden, da_c)?;

        let x_t = &cache.inputs[t];
        grads.w_ig.add_outer_scaled(x_t, &da_i, 1.0)?;
        grads.p_ig.add_outer_scaled(h_prev, &da_i, 1.0)?;
        grads.b_ig.add_in_place(&da_i)?;
        grads.w_fg.add_outer_scaled(x_t, &da_f, 1.0)?;
        grads.p_fg.add_outer_scaled(h_prev, &da_f, 1.0)?;
        grads.b_fg.add_in_place(&da_f)?;
        grads.w_og.add_outer_scaled(x_t, &da_o, 1.0)?;
        grads.p_og.add_outer_scaled(h_prev, &da_o, 1.0)?;
        grads.b_og.add_in_place(&da_o)?;
        grads.w_m.add_outer_scaled(x_t, &da_c, 1.0)?;
        grads.p_m.add_outer_scaled(h_prev, &da_c, 1.0)?;
        grads.b_m.add_in_place(&da_c)?;
        for j in 0..hidden {
            let m_prev_j = m_prev.get(0, j);
            grads.q_ig.data_mut()[j] += da_i.get(0, j) * m_prev_j;
            grads.q_fg.data_mut()[j] += da_f.get(0, j) * m_prev_j;
            grads.q_og.data_mut()[j] += da_o.get(0, j) * m_prev_j;
        }

        let dx = matmul(&da_i, &tr.w_ig)?
            .add(&matmul(&da_f, &tr.w_fg)?)?
            .add(&matmul(&da_o, &tr.w_og)?)?
            .add(&matmul(&da_c, &tr.w_m)?)?;
        add_into_row(d_embedding, cache.indices[t], &dx);

        dh = matmul(&da_i, &tr.p_ig)?
            .add(&matmul(&da_f, &tr.p_fg)?)?
            .add(&matmul(&da_o, &tr.p_og)?)?
            .add(&matmul(&da_c, &tr.p_m)?)?;
        dm_next = dm_prev;
    }
    Ok(())
}

/// Exact analytic gradients of the mean batch loss with respect to every
/// parameter tensor, unrolled over all timesteps. Returns the gradients
/// and the mean loss. `class_weights`, when given, scales each sample's
/// loss and gradient by the weight of its class.
pub fn backward_bptt(
    seqs: &[EncodedSequence],
    labels: &[usize],
    model: &ModelParams,
    caches: &[ForwardCache],
    class_weights: Option<&[f64]>,
) -> Result<(Gradients, f64)> {
    if seqs.len() != labels.len() || seqs.len() != caches.len() {
        return Err(Error::Inconsistent(format!(
            "batch has {} sequences, {} labels and {} caches",
            seqs.len(),
            labels.len(),
            caches.len()
        )));
    }
    if seqs.is_empty() {
        return Err(Error::EmptyInput("batch for backward pass"));
    }
    let classes = model.head.kind.classes();
    if let Some(weights) = class_weights {
        if weights.len() != classes {
            return Err(Error::Param(format!(
                "{} class weights for {classes} classes",
                weights.len()
            )));
        }
    }
    let k_out = model.head.kind.out_dim();
    let head_w_t = model.head.w_out.transpose();
    let batch = seqs.len() as f64;
    let mut grads = Gradients::zeros_like(model);
    let mut mean_loss = 0.0;

    // head backward first; per-sample dL/dh_T feeds the cell backward below
    let mut dh_finals = Vec::with_capacity(seqs.len());
    {
        let (_, _, d_head_w, d_head_b) = grads.split_mut();
        for ((seq, &label), cache) in seqs.iter().zip(labels).zip(caches) {
            if label >= classes {
                return Err(Error::Label {
                    value: label,
                    classes,
                });
            }
            if cache.indices != seq.indices() {
                return Err(Error::Inconsistent(
                    "cache was not produced from this sequence".into(),
                ));
            }
            if cache.probs.cols() != k_out || cache.head_input.cols() != model.hidden_dim() {
                return Err(Error::Inconsistent(
                    "cache shapes do not match the model".into(),
                ));
            }
            let weight = class_weights.map_or(1.0, |w| w[label]);
            let coeff = weight / batch;
            mean_loss += coeff * sample_loss(&cache.probs, model.head.kind, label)?;

            // cross-entropy through sigmoid/softmax: dL/dz = p - y
            let mut dz = Matrix::zeros(1, k_out);
            match model.head.kind {
                HeadKind::Binary => {
                    dz.set(0, 0, coeff * (cache.probs.get(0, 0) - label as f64));
                }
                HeadKind::Multiclass(_) => {
                    for j in 0..k_out {
                        let y = if j == label { 1.0 } else { 0.0 };
                        dz.set(0, j, coeff * (cache.probs.get(0, j) - y));
                    }
                }
            }
            d_head_w.add_outer_scaled(&cache.head_input, &dz, 1.0)?;
            d_head_b.add_in_place(&dz)?;
            let d_dropped = matmul(&dz, &head_w_t)?;
            let dh_final = match &cache.dropout_scale {
                Some(mask) => crate::numerics::hadamard(&d_dropped, mask)?,
                None => d_dropped,
            };
            dh_finals.push(dh_final);
        }
    }

    let (d_embedding, d_cell, _, _) = grads.split_mut();
    match (&model.cell, d_cell) {
        (CellParams::Rnn(p), CellParams::Rnn(g)) => {
            let w_t = p.w.transpose();
            let p_t = p.p.transpose();
            for (cache, dh) in caches.iter().zip(dh_finals) {
                backward_rnn_sample(&w_t, &p_t, g, cache, dh, d_embedding)?;
            }
        }
        (CellParams::Lstm(p), CellParams::Lstm(g)) => {
            let tr = LstmTransposed::of(p);
            for (cache, dh) in caches.iter().zip(dh_finals) {
                backward_lstm_sample(p, &tr, g, cache, dh, d_embedding)?;
            }
        }
        _ => {
            return Err(Error::Inconsistent(
                "gradient container does not match the model cell".into(),
            ))
        }
    }

    Ok((grads, mean_loss))
}

/// Scales the gradients so their global L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

/// One plain SGD step: every parameter entry decremented by
/// `lr * gradient`.
pub fn sgd_update(model: &mut ModelParams, grads: &Gradients, lr: f64) -> Result<()> {
    let g_tensors = grads.tensors();
    let mut m_tensors = model.tensors_mut();
    if g_tensors.len() != m_tensors.len() {
        return Err(Error::Inconsistent(
            "gradient tensor count does not match the model".into(),
        ));
    }
    for ((g_name, g), (m_name, m)) in g_tensors.iter().zip(m_tensors.iter_mut()) {
        if g_name != m_name {
            return Err(Error::Inconsistent(format!(
                "tensor order mismatch: {g_name} vs {m_name}"
            )));
        }
        if g.shape() != m.shape() {
            return Err(Error::shape("sgd_update", m.shape(), g.shape()));
        }
        for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv -= lr * gv;
        }
    }
    Ok(())
}

fn loss_at(model: &ModelParams, seq: &EncodedSequence, label: usize) -> Result<f64> {
    let mut rng = Rng::new(0);
    let (probs, _) = forward(seq, model, &mut rng, false)?;
    sample_loss(&probs, model.head.kind, label)
}

/// Central finite-difference check of the analytic gradients: perturbs
/// every parameter entry by +-eps and returns the worst relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Requires
/// dropout rate 0 so the loss is deterministic.
pub fn grad_check(
    model: &ModelParams,
    seq: &EncodedSequence,
    label: usize,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Param(format!("finite-difference step {eps} must be positive")));
    }
    if model.dropout_rate() != 0.0 {
        return Err(Error::Param(
            "gradient check requires dropout rate 0".into(),
        ));
    }
    let mut rng = Rng::new(0);
    let (_, cache) = forward(seq, model, &mut rng, true)?;
    let (grads, _) = backward_bptt(
        std::slice::from_ref(seq),
        std::slice::from_ref(&label),
        model,
        std::slice::from_ref(&cache),
        None,
    )?;

    let mut work = model.clone();
    let mut max_rel: f64 = 0.0;
    let tensor_count = grads.tensors().len();
    for ti in 0..tensor_count {
        let entries = grads.tensors()[ti].1.data().len();
        for e in 0..entries {
            let original = work.tensors()[ti].1.data()[e];
            work.tensors_mut()[ti].1.data_mut()[e] = original + eps;
            let loss_plus = loss_at(&work, seq, label)?;
            work.tensors_mut()[ti].1.data_mut()[e] = original - eps;
            let loss_minus = loss_at(&work, seq, label)?;
            work.tensors_mut()[ti].1.data_mut()[e] = original;
            let numeric = (loss_plus - loss_minus) / (2.0 * eps);
            let analytic = grads.tensors()[ti].1.data()[e];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Builds a reproducible small model plus one random sample, for gradient
/// checking. Vocabulary size 10, embedding dimension 3.
pub fn random_check_instance(
    cell: CellKind,
    head: HeadKind,
    hidden_dim: usize,
    max_len: usize,
    seed: u64,
) -> Result<(ModelParams, EncodedSequence, usize)> {
    if max_len == 0 {
        return Err(Error::Param("max_len must be at least 1".into()));
    }
    let vocab_size = 10;
    let mut rng = Rng::new(seed);
    let model = ModelParams::new_random(vocab_size, 3, hidden_dim, cell, head, 0.0, &mut rng)?;
    let indices: Vec<usize> = (0..max_len).map(|_| rng.next_below(vocab_size)).collect();
    let label = rng.next_below(head.classes());
    Ok((model, EncodedSequence::from_indices(indices), label))
}

/// Loss/accuracy per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
}

pub type TrainHistory = Vec<EpochStats>;

/// Mean inference-mode loss and accuracy over a dataset. Binary
/// predictions threshold at 0.5.
pub fn evaluate_loss_accuracy(model: &ModelParams, data: &EncodedDataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyInput("dataset for evaluation"));
    }
    let mut rng = Rng::new(0);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (seq, &label) in data.sequences.iter().zip(&data.labels) {
        let (probs, _) = forward(seq, model, &mut rng, false)?;
        loss += sample_loss(&probs, model.head.kind, label)?;
        if predict_class(&probs, model.head.kind, 0.5) == label {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Full training loop: per epoch, shuffle with the seeded generator, run
/// minibatch forward/backward/update, then record train loss plus
/// validation loss and accuracy. Returns the parameters from the epoch
/// with the best validation loss alongside the history.
pub fn train(
    train_set: &EncodedDataset,
    valid_set: &EncodedDataset,
    vocab_size: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if valid_set.is_empty() {
        return Err(Error::EmptyInput("validation set"));
    }
    let classes = cfg.head_kind.classes();
    for &label in train_set.labels.iter().chain(&valid_set.labels) {
        if label >= classes {
            return Err(Error::Label {
                value: label,
                classes,
            });
        }
    }

    let mut rng = Rng::new(cfg.seed);
    let mut model = ModelParams::new_random(
        vocab_size,
        cfg.embedding_dim,
        cfg.hidden(),
        cfg.cell_kind,
        cfg.head_kind,
        cfg.dropout_rate,
        &mut rng,
    )?;

    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<EncodedSequence> = chunk
                .iter()
                .map(|&i| train_set.sequences[i].clone())
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mut caches = Vec::with_capacity(chunk.len());
            for seq in &seqs {
                let (_, cache) = forward(seq, &model, &mut rng, true)?;
                caches.push(cache);
            }
            let (mut grads, batch_loss) =
                backward_bptt(&seqs, &labels, &model, &caches, cfg.class_weights.as_deref())?;
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            sgd_update(&mut model, &grads, cfg.learning_rate)?;
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let train_loss = epoch_loss / n as f64;
        let (valid_loss, valid_accuracy) = evaluate_loss_accuracy(&model, valid_set)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            valid_loss,
            valid_accuracy,
        });
        if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
            best = Some((valid_loss, model.clone()));
        }
    }

    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodedSequence;

    fn seq(indices: &[usize]) -> EncodedSequence {
        EncodedSequence::from_indices(indices.to_vec())
    }

    #[test]
    fn bce_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(0.5, 1) - ln2).abs() < 1e-15);
        assert!((bce_loss(0.5, 0) - ln2).abs() < 1e-15);
        assert!(bce_loss(1.0, 1) < 1e-11);
        assert!(bce_loss(0.0, 0) < 1e-11);
    }

    #[test]
    fn cce_closed_forms() {
        let third = 1.0 / 3.0;
        let uniform = [third, third, third];
        for y in 0..3 {
            assert!((cce_loss(&uniform, y).unwrap() - 3.0f64.ln()).abs() < 1e-12);
        }
        assert!(cce_loss(&[0.0, 1.0, 0.0], 1).unwrap() < 1e-11);
        assert!((cce_loss(&[0.5, 0.25, 0.25], 1).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        assert!(matches!(
            cce_loss(&uniform, 3),
            Err(Error::Label { value: 3, classes: 3 })
        ));
    }

    #[test]
    fn sgd_zero_lr_is_noop() {
        let (model, _, _) =
            random_check_instance(CellKind::Lstm, HeadKind::Binary, 3, 4, 1).unwrap();
        let grads = {
            let mut g = Gradients::zeros_like(&model);
            for (_, t) in g.tensors_mut() {
                for v in t.data_mut() {
                    *v = 0.5;
                }
            }
            g
        };
        let mut updated = model.clone();
        sgd_update(&mut updated, &grads, 0.0).unwrap();
        assert_eq!(updated, model);
    }

    #[test]
    fn sgd_scalar_arithmetic() {
        let (model, _, _) =
            random_check_instance(CellKind::Rnn, HeadKind::Binary, 1, 1, 2).unwrap();
        let mut m = model.clone();
        m.tensors_mut()[0].1.data_mut()[0] = 1.0;
        let mut g = Gradients::zeros_like(&m);
        g.tensors_mut()[0].1.data_mut()[0] = 0.5;
        sgd_update(&mut m, &g, 0.01).unwrap();
        assert!((m.tensors()[0].1.data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grads_leave_model_unchanged() {
        let (model, _, _) =
            random_check_instance(CellKind::Lstm, HeadKind::Multiclass(3), 2, 3, 3).unwrap();
        let grads = Gradients::zeros_like(&model);
        let mut updated = model.clone();
        sgd_update(&mut updated, &grads, 0.3).unwrap();
        assert_eq!(updated, model);
    }

    #[test]
    fn gradient_vanishes_near_a_minimum() {
        // zero cell and embedding; head bias pushed hard toward the true
        // label, so the softmax is within 1e-17 of one-hot
        let (mut model, sample, _) =
            random_check_instance(CellKind::Lstm, HeadKind::Multiclass(3), 3, 4, 4).unwrap();
        for (name, t) in model.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
            if name == "head.b" {
                t.data_mut()[0] = 40.0;
            }
        }
        let label = 0usize;
        let mut rng = Rng::new(0);
        let (_, cache) = forward(&sample, &model, &mut rng, true).unwrap();
        let (grads, loss) = backward_bptt(
            std::slice::from_ref(&sample),
            &[label],
            &model,
            std::slice::from_ref(&cache),
            None,
        )
        .unwrap();
        assert!(loss < 1e-11, "loss = {loss}");
        assert!(grads.l2_norm() < 1e-8, "gradient norm = {}", grads.l2_norm());
    }

    #[test]
    fn untouched_embedding_rows_have_zero_gradient() {
        let (model, _, _) =
            random_check_instance(CellKind::Lstm, HeadKind::Binary, 3, 4, 5).unwrap();
        let sample = seq(&[1, 2, 1, 2]);
        let mut rng = Rng::new(0);
        let (_, cache) = forward(&sample, &model, &mut rng, true).unwrap();
        let (grads, _) = backward_bptt(
            std::slice::from_ref(&sample),
            &[1],
            &model,
            std::slice::from_ref(&cache),
            None,
        )
        .unwrap();
        let d_emb = grads.tensors()[0].1.clone();
        for row in 0..d_emb.rows() {
            let touched = row == 1 || row == 2;
            let all_zero = d_emb.row(row).iter().all(|&v| v == 0.0);
            assert_eq!(all_zero, !touched, "row {row}");
        }
    }

    #[test]
    fn grad_check_lstm_binary() {
        let (model, sample, label) =
            random_check_instance(CellKind::Lstm, HeadKind::Binary, 3, 4, 7).unwrap();
        let err = grad_check(&model, &sample, label, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_rnn_binary() {
        let (model, sample, label) =
            random_check_instance(CellKind::Rnn, HeadKind::Binary, 3, 4, 8).unwrap();
        let err = grad_check(&model, &sample, label, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        let (model, sample, label) =
            random_check_instance(CellKind::Rnn, HeadKind::Binary, 2, 3, 9).unwrap();
        assert!(matches!(
            grad_check(&model, &sample, label, 0.0),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn grad_check_rejects_active_dropout() {
        let mut rng = Rng::new(1);
        let model = ModelParams::new_random(
            5,
            2,
            2,
            CellKind::Lstm,
            HeadKind::Binary,
            0.1,
            &mut rng,
        )
        .unwrap();
        assert!(matches!(
            grad_check(&model, &seq(&[1, 2]), 0, 1e-5),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn one_sgd_step_does_not_increase_loss() {
        for seed in 0..50u64 {
            let cell = if seed % 2 == 0 { CellKind::Lstm } else { CellKind::Rnn };
            let head = if seed % 3 == 0 {
                HeadKind::Multiclass(3)
            } else {
                HeadKind::Binary
            };
            let (mut model, sample, label) =
                random_check_instance(cell, head, 3, 4, 100 + seed).unwrap();
            let before = loss_at(&model, &sample, label).unwrap();
            let mut rng = Rng::new(0);
            let (_, cache) = forward(&sample, &model, &mut rng, true).unwrap();
            let (grads, _) = backward_bptt(
                std::slice::from_ref(&sample),
                std::slice::from_ref(&label),
                &model,
                std::slice::from_ref(&cache),
                None,
            )
            .unwrap();
            sgd_update(&mut model, &grads, 1e-3).unwrap();
            let after = loss_at(&model, &sample, label).unwrap();
            assert!(
                before - after >= -1e-15,
                "seed {seed}: loss rose from {before} to {after}"
            );
        }
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let (model, sample, label) =
            random_check_instance(CellKind::Rnn, HeadKind::Binary, 3, 4, 11).unwrap();
        let mut rng = Rng::new(0);
        let (_, cache) = forward(&sample, &model, &mut rng, true).unwrap();
        let (mut grads, _) = backward_bptt(
            std::slice::from_ref(&sample),
            &[label],
            &model,
            std::slice::from_ref(&cache),
            None,
        )
        .unwrap();
        let tiny = 1e-6;
        let norm_before = grads.l2_norm();
        clip_gradients(&mut grads, tiny);
        assert!(grads.l2_norm() <= tiny * (1.0 + 1e-12), "was {norm_before}");
    }

    fn toy_dataset(n: usize, max_len: usize) -> EncodedDataset {
        let mut rng = Rng::new(1234);
        let mut sequences = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let indices: Vec<usize> = (0..max_len).map(|_| rng.next_below(10)).collect();
            sequences.push(EncodedSequence::from_indices(indices));
            labels.push(i % 2);
        }
        EncodedDataset { sequences, labels }
    }

    #[test]
    fn train_zero_lr_keeps_initial_parameters() {
        let data = toy_dataset(6, 4);
        let cfg = TrainConfig {
            embedding_dim: 3,
            hidden_dim: Some(3),
            learning_rate: 0.0,
            dropout_rate: 0.0,
            epochs: 1,
            batch_size: 16,
            max_len: 4,
            cell_kind: CellKind::Lstm,
            head_kind: HeadKind::Binary,
            seed: 21,
            ..TrainConfig::default()
        };
        let (model, history) = train(&data, &data, 10, &cfg).unwrap();
        assert_eq!(history.len(), 1);
        let mut rng = Rng::new(cfg.seed);
        let fresh = ModelParams::new_random(
            10,
            cfg.embedding_dim,
            cfg.hidden(),
            cfg.cell_kind,
            cfg.head_kind,
            cfg.dropout_rate,
            &mut rng,
        )
        .unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn train_is_deterministic_for_a_seed() {
        let data = toy_dataset(10, 5);
        let cfg = TrainConfig {
            embedding_dim: 4,
            hidden_dim: Some(4),
            epochs: 3,
            batch_size: 4,
            max_len: 5,
            dropout_rate: 0.2,
            cell_kind: CellKind::Lstm,
            head_kind: HeadKind::Binary,
            seed: 77,
            ..TrainConfig::default()
        };
        let (model_a, hist_a) = train(&data, &data, 10, &cfg).unwrap();
        let (model_b, hist_b) = train(&data, &data, 10, &cfg).unwrap();
        assert_eq!(hist_a, hist_b);
        assert_eq!(model_a, model_b);
        assert_eq!(hist_a.len(), cfg.epochs);
        for s in &hist_a {
            assert!(
                s.train_loss.is_finite() && s.valid_loss.is_finite(),
                "non-finite loss at epoch {}",
                s.epoch
            );
        }
    }

    #[test]
    fn train_rejects_empty_training_set() {
        let empty = EncodedDataset {
            sequences: vec![],
            labels: vec![],
        };
        let data = toy_dataset(4, 3);
        let cfg = TrainConfig {
            embedding_dim: 2,
            max_len: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&empty, &data, 10, &cfg),
            Err(Error::EmptyInput("training set"))
        ));
    }

    #[test]
    fn train_rejects_out_of_range_labels() {
        let mut data = toy_dataset(4, 3);
        data.labels[2] = 5;
        let cfg = TrainConfig {
            embedding_dim: 2,
            max_len: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&data, &data, 10, &cfg),
            Err(Error::Label { value: 5, classes: 2 })
        ));
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = -1.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_ok());
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        cfg.dropout_rate = 0.1;
        cfg.class_weights = Some(vec![1.0]);
        assert!(cfg.validate().is_err());
        cfg.class_weights = Some(vec![1.0, 2.0]);
        assert!(cfg.validate().is_ok());
    }
}

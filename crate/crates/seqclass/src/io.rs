//! File formats: TSV record ingestion and the versioned text model file.
//!
//! The model file is plain text so it diffs and round-trips exactly:
//! parameter values are written with 17 significant digits, which is
//! enough to reconstruct every 64-bit float bit for bit. Saving a loaded
//! model reproduces the original file byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::encoding::{LabeledRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    CellKind, CellParams, EmbeddingParams, HeadKind, HeadParams, LstmParams, ModelParams,
    RnnParams,
};
use crate::numerics::Matrix;

pub const MODEL_MAGIC: &str = "SEQCLASS-MODEL v1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses `id<TAB>label<TAB>text` records. Blank lines and lines starting
/// with '#' are skipped; anything else malformed reports its line number.
pub fn load_tsv(path: &Path) -> Result<Vec<LabeledRecord>> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    parse_tsv(&content, &path.display().to_string())
}

pub fn parse_tsv(content: &str, origin: &str) -> Result<Vec<LabeledRecord>> {
    let mut records = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            msg: msg.to_string(),
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected id<TAB>label<TAB>text"))?;
        let (label_str, text) = rest
            .split_once('\t')
            .ok_or_else(|| parse_err("expected id<TAB>label<TAB>text"))?;
        let label: usize = label_str
            .trim()
            .parse()
            .map_err(|_| parse_err(&format!("label {label_str:?} is not a nonnegative integer")))?;
        records.push(LabeledRecord::new(id, label, text));
    }
    Ok(records)
}

/// Prediction input: `(id, text)` pairs. Tries the labeled layout first so
/// labeled files work unchanged, then falls back to `id<TAB>text`.
pub fn load_tsv_texts(path: &Path) -> Result<Vec<(String, String)>> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let origin = path.display().to_string();
    if let Ok(records) = parse_tsv(&content, &origin) {
        return Ok(records.into_iter().map(|r| (r.id, r.text)).collect());
    }
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: origin.clone(),
            line: i + 1,
            msg: "expected id<TAB>text".to_string(),
        })?;
        out.push((id.to_string(), text.to_string()));
    }
    Ok(out)
}

/// A model file: parameters plus the vocabulary and sequence length they
/// were trained with.
#[derive(Clone, Debug)]
pub struct SavedModel {
    pub model: ModelParams,
    pub vocab: Vocabulary,
    pub max_len: usize,
}

fn head_kind_name(kind: HeadKind) -> &'static str {
    match kind {
        HeadKind::Binary => "binary",
        HeadKind::Multiclass(_) => "multiclass",
    }
}

/// Serializes a model to the text format. Deterministic: tensors appear in
/// their fixed order, vocabulary in index order, and every value carries
/// 17 significant digits.
pub fn model_to_string(model: &ModelParams, vocab: &Vocabulary, max_len: usize) -> Result<String> {
    if vocab.size() != model.vocab_size() {
        return Err(Error::Inconsistent(format!(
            "vocabulary size {} does not match embedding rows {}",
            vocab.size(),
            model.vocab_size()
        )));
    }
    if max_len == 0 {
        return Err(Error::Param("max_len must be at least 1".into()));
    }
    let mut out = String::new();
    out.push_str(MODEL_MAGIC);
    out.push('\n');
    out.push_str(&format!("cell: {}\n", model.cell.kind().as_str()));
    out.push_str(&format!("head: {}\n", head_kind_name(model.head.kind)));
    out.push_str(&format!("classes: {}\n", model.head.kind.classes()));
    out.push_str(&format!("vocab_size: {}\n", model.vocab_size()));
    out.push_str(&format!("max_len: {max_len}\n"));
    out.push_str(&format!("embedding_dim: {}\n", model.embedding_dim()));
    out.push_str(&format!("hidden_dim: {}\n", model.hidden_dim()));
    out.push_str(&format!("dropout: {}\n", model.dropout_rate()));
    out.push_str(&format!("VOCAB {}\n", vocab.tokens().len()));
    for (i, token) in vocab.tokens().iter().enumerate() {
        out.push_str(&format!("{token}\t{}\n", i + 1));
    }
    for (name, tensor) in model.tensors() {
        out.push_str(&format!(
            "PARAM {name} {} {}\n",
            tensor.rows(),
            tensor.cols()
        ));
        for i in 0..tensor.rows() {
            let row: Vec<String> = tensor.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn save_model(
    model: &ModelParams,
    vocab: &Vocabulary,
    max_len: usize,
    path: &Path,
) -> Result<()> {
    let text = model_to_string(model, vocab, max_len)?;
    fs::write(path, text).map_err(io_err(path))
}

struct HeaderValues {
    cell: CellKind,
    head_name: String,
    classes: usize,
    vocab_size: usize,
    max_len: usize,
    embedding_dim: usize,
    hidden_dim: usize,
    dropout: f64,
}

fn parse_header(fields: &HashMap<String, String>) -> Result<HeaderValues> {
    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| Error::Format(format!("missing header field {key:?}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::Format(format!("header field {key:?} is not an integer")))
    };
    let cell: CellKind = get("cell")?
        .parse()
        .map_err(|_| Error::Format(format!("unknown cell kind {:?}", fields["cell"])))?;
    let dropout: f64 = get("dropout")?
        .parse()
        .map_err(|_| Error::Format("header field \"dropout\" is not a number".into()))?;
    Ok(HeaderValues {
        cell,
        head_name: get("head")?.clone(),
        classes: parse_usize("classes")?,
        vocab_size: parse_usize("vocab_size")?,
        max_len: parse_usize("max_len")?,
        embedding_dim: parse_usize("embedding_dim")?,
        hidden_dim: parse_usize("hidden_dim")?,
        dropout,
    })
}

/// Expected tensor names and shapes for a model with the given dimensions.
fn expected_tensors(
    cell: CellKind,
    vocab_size: usize,
    emb: usize,
    hidden: usize,
    k_out: usize,
) -> Vec<(&'static str, (usize, usize))> {
    let mut expected = vec![("embedding", (vocab_size, emb))];
    match cell {
        CellKind::Rnn => {
            expected.extend([
                ("rnn.w", (emb, hidden)),
                ("rnn.p", (hidden, hidden)),
                ("rnn.b", (1, hidden)),
            ]);
        }
        CellKind::Lstm => {
            expected.extend([
                ("lstm.w_ig", (emb, hidden)),
                ("lstm.p_ig", (hidden, hidden)),
                ("lstm.q_ig", (1, hidden)),
                ("lstm.b_ig", (1, hidden)),
                ("lstm.w_fg", (emb, hidden)),
                ("lstm.p_fg", (hidden, hidden)),
                ("lstm.q_fg", (1, hidden)),
                ("lstm.b_fg", (1, hidden)),
                ("lstm.w_og", (emb, hidden)),
                ("lstm.p_og", (hidden, hidden)),
                ("lstm.q_og", (1, hidden)),
                ("lstm.b_og", (1, hidden)),
                ("lstm.w_m", (emb, hidden)),
                ("lstm.p_m", (hidden, hidden)),
                ("lstm.b_m", (1, hidden)),
            ]);
        }
    }
    expected.extend([("head.w", (hidden, k_out)), ("head.b", (1, k_out))]);
    expected
}

/// Parses the text model format back into a model, vocabulary and
/// max_len. Validates the magic line, header completeness, dense
/// vocabulary indices, tensor shapes and value counts.
pub fn model_from_str(content: &str) -> Result<SavedModel> {
    let mut lines = content.lines();
    let magic = lines
        .next()
        .ok_or_else(|| Error::Format("empty model file".into()))?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "unsupported model version: expected {MODEL_MAGIC:?}, found {magic:?}"
        )));
    }

    // header lines until VOCAB
    let mut fields = HashMap::new();
    let mut vocab_count: Option<usize> = None;
    for line in lines.by_ref() {
        if let Some(count) = line.strip_prefix("VOCAB ") {
            vocab_count = Some(count.parse().map_err(|_| {
                Error::Format(format!("bad VOCAB count {count:?}"))
            })?);
            break;
        }
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        fields.insert(key.to_string(), value.to_string());
    }
    let header = parse_header(&fields)?;
    let vocab_count =
        vocab_count.ok_or_else(|| Error::Format("missing VOCAB section".into()))?;
    if vocab_count + 1 != header.vocab_size {
        return Err(Error::Format(format!(
            "VOCAB lists {vocab_count} tokens but vocab_size is {}",
            header.vocab_size
        )));
    }
    let head_kind = match (header.head_name.as_str(), header.classes) {
        ("binary", 2) => HeadKind::Binary,
        ("multiclass", k) if k >= 2 => HeadKind::Multiclass(k),
        (name, k) => {
            return Err(Error::Format(format!(
                "unsupported head {name:?} with {k} classes"
            )))
        }
    };

    // vocabulary
    let mut tokens = Vec::with_capacity(vocab_count);
    for i in 0..vocab_count {
        let line = lines.next().ok_or_else(|| {
            Error::Format(format!("VOCAB section truncated after {i} of {vocab_count} tokens"))
        })?;
        let (token, index_str) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("malformed VOCAB line {line:?}")))?;
        let index: usize = index_str
            .parse()
            .map_err(|_| Error::Format(format!("bad vocabulary index {index_str:?}")))?;
        if index != i + 1 {
            return Err(Error::Format(format!(
                "vocabulary indices must be dense and ascending: expected {}, found {index}",
                i + 1
            )));
        }
        tokens.push(token.to_string());
    }
    let vocab = Vocabulary::from_tokens(tokens)?;

    // parameter sections
    let expected = expected_tensors(
        header.cell,
        header.vocab_size,
        header.embedding_dim,
        header.hidden_dim,
        head_kind.out_dim(),
    );
    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    let mut pending: Option<(String, usize, usize, Vec<f64>)> = None;
    for line in lines {
        if let Some(rest) = line.strip_prefix("PARAM ") {
            if let Some((name, rows, cols, values)) = pending.take() {
                finish_tensor(&mut tensors, name, rows, cols, values)?;
            }
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("malformed PARAM line {line:?}")));
            }
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad PARAM rows in {line:?}")))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad PARAM cols in {line:?}")))?;
            pending = Some((parts[0].to_string(), rows, cols, Vec::with_capacity(rows * cols)));
            continue;
        }
        let Some((name, _, _, values)) = pending.as_mut() else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::Format(format!(
                "unexpected content outside a PARAM section: {line:?}"
            )));
        };
        for field in line.split_whitespace() {
            let value: f64 = field.parse().map_err(|_| {
                Error::Format(format!("tensor {name}: bad value {field:?}"))
            })?;
            if !value.is_finite() {
                return Err(Error::Format(format!("tensor {name}: non-finite value {field}")));
            }
            values.push(value);
        }
    }
    if let Some((name, rows, cols, values)) = pending.take() {
        finish_tensor(&mut tensors, name, rows, cols, values)?;
    }

    // check the tensor set and shapes against the header
    for (name, shape) in &expected {
        let tensor = tensors
            .get(*name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if tensor.shape() != *shape {
            return Err(Error::Format(format!(
                "tensor {name}: declared {}x{}, header implies {}x{}",
                tensor.rows(),
                tensor.cols(),
                shape.0,
                shape.1
            )));
        }
    }
    if tensors.len() != expected.len() {
        let known: Vec<&str> = expected.iter().map(|(n, _)| *n).collect();
        let extra: Vec<String> = tensors
            .keys()
            .filter(|k| !known.contains(&k.as_str()))
            .cloned()
            .collect();
        return Err(Error::Format(format!("unexpected tensors: {extra:?}")));
    }

    let mut take = |name: &str| tensors.remove(name).expect("presence checked above");
    let embedding = EmbeddingParams {
        weights: take("embedding"),
    };
    let cell = match header.cell {
        CellKind::Rnn => CellParams::Rnn(RnnParams {
            w: take("rnn.w"),
            p: take("rnn.p"),
            b: take("rnn.b"),
        }),
        CellKind::Lstm => CellParams::Lstm(LstmParams {
            w_ig: take("lstm.w_ig"),
            p_ig: take("lstm.p_ig"),
            q_ig: take("lstm.q_ig"),
            b_ig: take("lstm.b_ig"),
            w_fg: take("lstm.w_fg"),
            p_fg: take("lstm.p_fg"),
            q_fg: take("lstm.q_fg"),
            b_fg: take("lstm.b_fg"),
            w_og: take("lstm.w_og"),
            p_og: take("lstm.p_og"),
            q_og: take("lstm.q_og"),
            b_og: take("lstm.b_og"),
            w_m: take("lstm.w_m"),
            p_m: take("lstm.p_m"),
            b_m: take("lstm.b_m"),
        }),
    };
    let head = HeadParams {
        w_out: take("head.w"),
        b_out: take("head.b"),
        kind: head_kind,
    };
    let model = ModelParams::from_parts(embedding, cell, head, header.dropout)
        .map_err(|e| Error::Format(format!("inconsistent model file: {e}")))?;
    Ok(SavedModel {
        model,
        vocab,
        max_len: header.max_len,
    })
}

fn finish_tensor(
    tensors: &mut HashMap<String, Matrix>,
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::Format(format!(
            "tensor {name}: expected {} values for {rows}x{cols}, found {}",
            rows * cols,
            values.len()
        )));
    }
    let matrix = Matrix::from_vec(rows, cols, values)
        .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
    if tensors.insert(name.clone(), matrix).is_some() {
        return Err(Error::Format(format!("duplicate tensor name {name}")));
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    model_from_str(&content)
}

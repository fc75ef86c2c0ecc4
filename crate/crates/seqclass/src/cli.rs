//! Command-line surface: train, eval, predict, gradcheck and sweep.
//!
//! Exit codes are a stable contract: 0 success, 1 usage or failed check,
//! 2 I/O, 3 data format, 4 model/data schema mismatch.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::encoding::{build_vocabulary, encode_dataset, encode_sequence, tokenize};
use crate::error::{Error, Result};
use crate::io::{load_model, load_tsv, load_tsv_texts, save_model};
use crate::metrics::{confusion, EvalReport};
use crate::model::{forward, predict_class, CellKind, HeadKind};
use crate::numerics::Rng;
use crate::training::{grad_check, random_check_instance, train, TrainConfig, TrainHistory};

#[derive(Parser, Debug)]
#[command(name = "seqclass", version, about = "Recurrent-network tweet classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from labeled TSV splits
    Train(TrainArgs),
    /// Evaluate a saved model on labeled data
    Eval(EvalArgs),
    /// Predict classes for new text
    Predict(PredictArgs),
    /// Check analytic BPTT gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Train across several embedding sizes, several trials each
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Labeled training TSV (id<TAB>label<TAB>text)
    #[arg(long)]
    pub train: PathBuf,
    /// Labeled validation TSV
    #[arg(long)]
    pub valid: PathBuf,
    /// Output model file
    #[arg(long)]
    pub out: PathBuf,
    /// Optional per-epoch history TSV
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Recurrent cell: rnn or lstm
    #[arg(long, default_value = "lstm")]
    pub cell: String,
    /// Number of classes (2 selects the sigmoid head)
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 512)]
    pub embedding: usize,
    /// Hidden dimension; defaults to the embedding size
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 35)]
    pub max_len: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Keep only the N most frequent tokens
    #[arg(long)]
    pub top_words: Option<usize>,
    /// Comma-separated per-class loss weights, e.g. 1,8
    #[arg(long)]
    pub class_weights: Option<String>,
    /// L2 gradient clip per batch; 0 disables
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled TSV to score
    #[arg(long)]
    pub data: PathBuf,
    /// Classes for the micro-averaged metrics, e.g. 1,2. Defaults to every
    /// nonzero class
    #[arg(long)]
    pub subset: Option<String>,
    /// Positive class reported under the adr_* keys
    #[arg(long, default_value_t = 1)]
    pub positive: usize,
    /// Decision threshold for the sigmoid head
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// TSV with id<TAB>text (a labeled file also works)
    #[arg(long)]
    pub data: PathBuf,
    /// Output file; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Recurrent cell: rnn or lstm
    #[arg(long, default_value = "lstm")]
    pub cell: String,
    #[arg(long, default_value_t = 3)]
    pub hidden: usize,
    /// Sequence length of the random sample
    #[arg(long, default_value_t = 4)]
    pub len: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long, default_value = "lstm")]
    pub cell: String,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Comma-separated embedding sizes to compare
    #[arg(long, default_value = "128,256,512")]
    pub sizes: String,
    /// Trials per size; trial t uses seed + t
    #[arg(long, default_value_t = 2)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 35)]
    pub max_len: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub top_words: Option<usize>,
}

fn head_kind_for(classes: usize) -> Result<HeadKind> {
    match classes {
        0 | 1 => Err(Error::Param(format!("--classes must be at least 2, got {classes}"))),
        2 => Ok(HeadKind::Binary),
        k => Ok(HeadKind::Multiclass(k)),
    }
}

fn parse_class_weights(spec: Option<&str>, classes: usize) -> Result<Option<Vec<f64>>> {
    let Some(spec) = spec else { return Ok(None) };
    let weights: Vec<f64> = spec
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::Param(format!("bad class weight {part:?}")))
        })
        .collect::<Result<_>>()?;
    if weights.len() != classes {
        return Err(Error::Param(format!(
            "{} class weights for {classes} classes",
            weights.len()
        )));
    }
    Ok(Some(weights))
}

fn parse_class_list(spec: &str, classes: usize) -> Result<Vec<usize>> {
    let list: Vec<usize> = spec
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Param(format!("bad class index {part:?}")))
        })
        .collect::<Result<_>>()?;
    for &c in &list {
        if c >= classes {
            return Err(Error::Param(format!(
                "subset class {c} out of range for {classes} classes"
            )));
        }
    }
    Ok(list)
}

fn parse_usize_list(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Param(format!("bad size {part:?}")))
        })
        .collect()
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn history_to_string(history: &TrainHistory) -> String {
    let mut text = String::from("# epoch\ttrain_loss\tvalid_loss\tvalid_acc\n");
    for s in history {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            s.epoch, s.train_loss, s.valid_loss, s.valid_accuracy
        ));
    }
    text
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cell: CellKind = args.cell.parse()?;
    let head = head_kind_for(args.classes)?;
    let train_records = load_tsv(&args.train)?;
    let valid_records = load_tsv(&args.valid)?;
    for record in train_records.iter().chain(&valid_records) {
        if record.label >= args.classes {
            return Err(Error::Label {
                value: record.label,
                classes: args.classes,
            });
        }
    }
    let vocab = build_vocabulary(&train_records, args.top_words)?;
    // overlong tweets are dropped from training but only truncated elsewhere
    let train_set = encode_dataset(&train_records, &vocab, args.max_len, true);
    let valid_set = encode_dataset(&valid_records, &vocab, args.max_len, false);
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set after length filtering"));
    }

    let cfg = TrainConfig {
        embedding_dim: args.embedding,
        hidden_dim: args.hidden,
        learning_rate: args.lr,
        dropout_rate: args.dropout,
        epochs: args.epochs,
        batch_size: args.batch,
        max_len: args.max_len,
        cell_kind: cell,
        head_kind: head,
        seed: args.seed,
        top_words: args.top_words,
        class_weights: parse_class_weights(args.class_weights.as_deref(), args.classes)?,
        grad_clip: if args.clip > 0.0 { Some(args.clip) } else { None },
    };

    eprintln!(
        "training {} ({} train / {} valid records, vocab {}, embedding {}, hidden {})",
        cell.as_str(),
        train_set.len(),
        valid_set.len(),
        vocab.size(),
        cfg.embedding_dim,
        cfg.hidden()
    );
    let (model, history) = train(&train_set, &valid_set, vocab.size(), &cfg)?;
    for s in &history {
        eprintln!(
            "epoch {:>3}  train_loss {:.6}  valid_loss {:.6}  valid_acc {:.4}",
            s.epoch, s.train_loss, s.valid_loss, s.valid_accuracy
        );
    }

    save_model(&model, &vocab, args.max_len, &args.out)?;
    if let Some(history_path) = &args.history {
        write_file(history_path, &history_to_string(&history))?;
    }
    println!("wrote model to {}", args.out.display());
    Ok(0)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let saved = load_model(&args.model)?;
    let records = load_tsv(&args.data)?;
    let classes = saved.model.head.kind.classes();
    for record in &records {
        if record.label >= classes {
            return Err(Error::SchemaMismatch(format!(
                "label {} in {} does not fit the model's {} classes",
                record.label,
                args.data.display(),
                classes
            )));
        }
    }
    let dataset = encode_dataset(&records, &saved.vocab, saved.max_len, false);
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluation data"));
    }
    if args.positive >= classes {
        return Err(Error::Param(format!(
            "positive class {} out of range for {classes} classes",
            args.positive
        )));
    }
    let subset = match &args.subset {
        Some(spec) => parse_class_list(spec, classes)?,
        None => (1..classes).collect(),
    };

    let mut rng = Rng::new(0);
    let mut preds = Vec::with_capacity(dataset.len());
    for seq in &dataset.sequences {
        let (probs, _) = forward(seq, &saved.model, &mut rng, false)?;
        preds.push(predict_class(&probs, saved.model.head.kind, args.threshold));
    }
    let cm = confusion(&preds, &dataset.labels, classes)?;
    let report = EvalReport::from_confusion(cm, &subset)?;
    print!("{}", report.render_text(args.positive, args.threshold));
    print!("{}", report.render_key_values(args.positive));
    Ok(0)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<i32> {
    let saved = load_model(&args.model)?;
    let texts = load_tsv_texts(&args.data)?;
    let mut rng = Rng::new(0);
    let mut out = String::new();
    for (id, text) in &texts {
        let tokens = tokenize(text);
        let seq = encode_sequence(&tokens, &saved.vocab, saved.max_len);
        let (probs, _) = forward(&seq, &saved.model, &mut rng, false)?;
        let class = predict_class(&probs, saved.model.head.kind, args.threshold);
        let prob_text: Vec<String> = probs.data().iter().map(|p| format!("{p:.6}")).collect();
        out.push_str(&format!("{id}\t{class}\t{}\n", prob_text.join(",")));
    }
    match &args.out {
        Some(path) => write_file(path, &out)?,
        None => print!("{out}"),
    }
    Ok(0)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let cell: CellKind = args.cell.parse()?;
    let head = head_kind_for(args.classes)?;
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(Error::Param(format!(
            "--eps must be positive, got {}",
            args.eps
        )));
    }
    let (model, seq, label) = random_check_instance(cell, head, args.hidden, args.len, args.seed)?;
    let max_rel = grad_check(&model, &seq, label, args.eps)?;
    let pass = max_rel < 1e-4;
    println!(
        "cell={} hidden={} len={} classes={} seed={} eps={:e}",
        cell.as_str(),
        args.hidden,
        args.len,
        args.classes,
        args.seed,
        args.eps
    );
    println!(
        "max relative error = {max_rel:.3e} ({})",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(i32::from(!pass))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let cell: CellKind = args.cell.parse()?;
    let head = head_kind_for(args.classes)?;
    let sizes = parse_usize_list(&args.sizes)?;
    if sizes.is_empty() || args.trials == 0 {
        return Err(Error::Param("--sizes and --trials must be nonempty".into()));
    }
    let train_records = load_tsv(&args.train)?;
    let valid_records = load_tsv(&args.valid)?;
    for record in train_records.iter().chain(&valid_records) {
        if record.label >= args.classes {
            return Err(Error::Label {
                value: record.label,
                classes: args.classes,
            });
        }
    }
    let vocab = build_vocabulary(&train_records, args.top_words)?;
    let train_set = encode_dataset(&train_records, &vocab, args.max_len, true);
    let valid_set = encode_dataset(&valid_records, &vocab, args.max_len, false);
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set after length filtering"));
    }

    println!(
        "{:<10} {:<6} {:<8} {:<11} {:<12} {:<10}",
        "embedding", "trial", "seed", "best_epoch", "valid_loss", "valid_acc"
    );
    for &size in &sizes {
        for trial in 0..args.trials {
            let seed = args.seed.wrapping_add(trial as u64);
            let cfg = TrainConfig {
                embedding_dim: size,
                hidden_dim: None,
                learning_rate: args.lr,
                dropout_rate: args.dropout,
                epochs: args.epochs,
                batch_size: args.batch,
                max_len: args.max_len,
                cell_kind: cell,
                head_kind: head,
                seed,
                top_words: args.top_words,
                class_weights: None,
                grad_clip: Some(5.0),
            };
            let (_, history) = train(&train_set, &valid_set, vocab.size(), &cfg)?;
            let mut best = &history[0];
            for s in &history[1..] {
                if s.valid_loss < best.valid_loss {
                    best = s;
                }
            }
            println!(
                "{:<10} {:<6} {:<8} {:<11} {:<12.6} {:<10.4}",
                size,
                trial + 1,
                seed,
                best.epoch,
                best.valid_loss,
                best.valid_accuracy
            );
        }
    }
    Ok(0)
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

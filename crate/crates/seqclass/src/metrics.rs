//! Shared-task evaluation quantities: per-class and binary
//! precision/recall/F-score, micro-averaged P/R/F over a class subset,
//! accuracy and the confusion matrix they all derive from.
//!
//! Every rate uses the zero-denominator convention: a ratio with an empty
//! denominator is 0, never NaN, so degenerate predictors still produce a
//! well-formed report.

use crate::error::{Error, Result};

/// k x k count table; rows index the true class, columns the predicted
/// class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        assert!(k > 0, "confusion matrix needs at least one class");
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Builds directly from counts laid out row-major.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Param(format!(
                "{} counts for a {k}x{k} confusion matrix",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        assert!(truth < self.k && predicted < self.k);
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_total(&self, truth: usize) -> u64 {
        (0..self.k).map(|j| self.count(truth, j)).sum()
    }

    fn col_total(&self, predicted: usize) -> u64 {
        (0..self.k).map(|i| self.count(i, predicted)).sum()
    }
}

/// Tallies predictions against labels into a confusion matrix.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Inconsistent(format!(
            "{} predictions against {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= k {
            return Err(Error::Label { value: p, classes: k });
        }
        if l >= k {
            return Err(Error::Label { value: l, classes: k });
        }
        cm.counts[l * k + p] += 1;
    }
    Ok(cm)
}

/// Precision/recall/F triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf_from_counts(tp: u64, fp: u64, fn_: u64) -> Prf {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

/// One-vs-rest precision/recall/F for a single class of any k-class
/// matrix.
pub fn class_prf(cm: &ConfusionMatrix, class: usize) -> Prf {
    assert!(class < cm.classes(), "class {class} out of range");
    let tp = cm.count(class, class);
    let fp = cm.col_total(class) - tp;
    let fn_ = cm.row_total(class) - tp;
    prf_from_counts(tp, fp, fn_)
}

/// Precision/recall/F of the positive class of a 2-class matrix.
pub fn binary_prf(cm: &ConfusionMatrix, positive: usize) -> Prf {
    assert_eq!(cm.classes(), 2, "binary_prf expects a 2-class matrix");
    class_prf(cm, positive)
}

/// Micro-averaged precision/recall/F restricted to a class subset: TP, FP
/// and FN are summed over the subset classes before the ratios are taken.
pub fn micro_prf_subset(cm: &ConfusionMatrix, subset: &[usize]) -> Result<Prf> {
    if subset.is_empty() {
        return Err(Error::Param("micro-average subset must be nonempty".into()));
    }
    let mut seen = vec![false; cm.classes()];
    for &c in subset {
        if c >= cm.classes() {
            return Err(Error::Param(format!(
                "subset class {c} out of range for {} classes",
                cm.classes()
            )));
        }
        if seen[c] {
            return Err(Error::Param(format!("subset class {c} listed twice")));
        }
        seen[c] = true;
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for &c in subset {
        let diag = cm.count(c, c);
        tp += diag;
        fp += cm.col_total(c) - diag;
        fn_ += cm.row_total(c) - diag;
    }
    Ok(prf_from_counts(tp, fp, fn_))
}

/// Full evaluation: per-class PRF, subset micro PRF, accuracy and the
/// confusion matrix itself.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub per_class: Vec<Prf>,
    pub micro: Prf,
    pub subset: Vec<usize>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix, subset: &[usize]) -> Result<Self> {
        let per_class = (0..cm.classes()).map(|c| class_prf(&cm, c)).collect();
        let micro = micro_prf_subset(&cm, subset)?;
        let total = cm.total();
        let diag: u64 = (0..cm.classes()).map(|c| cm.count(c, c)).sum();
        let accuracy = if total > 0 {
            diag as f64 / total as f64
        } else {
            0.0
        };
        Ok(EvalReport {
            per_class,
            micro,
            subset: subset.to_vec(),
            accuracy,
            confusion: cm,
        })
    }

    /// Human-readable aligned report. The header declares the scoring
    /// conventions in force.
    pub fn render_text(&self, positive: usize, threshold: f64) -> String {
        let mut out = String::new();
        let subset_list = self
            .subset
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "# conventions: threshold={threshold} positive_class={positive} \
             micro_subset={{{subset_list}}} zero_denominator=0\n"
        ));
        out.push_str(&format!(
            "{:<8} {:>10} {:>10} {:>10}\n",
            "class", "precision", "recall", "f1"
        ));
        for (c, prf) in self.per_class.iter().enumerate() {
            out.push_str(&format!(
                "{:<8} {:>10.3} {:>10.3} {:>10.3}\n",
                c, prf.precision, prf.recall, prf.f1
            ));
        }
        out.push_str(&format!(
            "{:<8} {:>10.3} {:>10.3} {:>10.3}\n",
            "micro", self.micro.precision, self.micro.recall, self.micro.f1
        ));
        out.push_str(&format!("accuracy {:.3}\n", self.accuracy));
        out.push_str("confusion (rows = true, cols = predicted):\n");
        for i in 0..self.confusion.classes() {
            let row: Vec<String> = (0..self.confusion.classes())
                .map(|j| format!("{:>8}", self.confusion.count(i, j)))
                .collect();
            out.push_str(&format!("{}\n", row.join(" ")));
        }
        out
    }

    /// Machine-readable block with the fixed key set.
    pub fn render_key_values(&self, positive: usize) -> String {
        let adr = &self.per_class[positive];
        format!(
            "adr_precision={:.6}\nadr_recall={:.6}\nadr_f1={:.6}\n\
             micro_precision={:.6}\nmicro_recall={:.6}\nmicro_f1={:.6}\n\
             accuracy={:.6}\n",
            adr.precision,
            adr.recall,
            adr.f1,
            self.micro.precision,
            self.micro.recall,
            self.micro.f1,
            self.accuracy
        )
    }
}

//! Slide-level aggregation and the clinical metric suite: AUROC,
//! accuracy, sensitivity, specificity, PPV, NPV and F1, for the binary
//! and the 3-class one-vs-rest settings.
//!
//! AUROC is the Mann-Whitney statistic (#concordant + half the ties over
//! pos*neg pairs), computed by a sorted sweep with integer pair counts so
//! it matches the brute-force pairwise definition exactly, ties included.
//! Undefined metrics (0/0) are reported as explicit `None`, never as 0
//! or 1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How per-bag probabilities are combined into one slide prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Arithmetic mean of probability vectors (default).
    Mean,
    /// Element-wise maximum, renormalized to sum 1.
    Max,
    /// Majority vote over per-bag argmax decisions.
    Vote,
}

/// Aggregated prediction for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub probs: Vec<f64>,
    pub true_label: usize,
}

/// Metric row for one cohort and one class (or the binary task).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cohort: String,
    pub class_label: String,
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub f1: Option<f64>,
}

/// Combine the probability vectors of all bags of one slide.
pub fn aggregate_slide(
    slide_id: &str,
    bag_probs: &[Vec<f64>],
    true_label: usize,
    method: Aggregation,
) -> Result<SlidePrediction> {
    if bag_probs.is_empty() {
        return Err(Error::Data(format!("slide {slide_id} has no bags to aggregate")));
    }
    let k = bag_probs[0].len();
    if bag_probs.iter().any(|p| p.len() != k) {
        return Err(Error::Dimension {
            what: format!("bag probabilities for slide {slide_id}"),
            expected: k,
            got: bag_probs.iter().map(Vec::len).find(|&l| l != k).unwrap_or(k),
        });
    }
    let n = bag_probs.len() as f64;
    let probs = match method {
        Aggregation::Mean => {
            let mut acc = vec![0.0; k];
            for p in bag_probs {
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n);
            acc
        }
        Aggregation::Max => {
            let mut acc = vec![f64::NEG_INFINITY; k];
            for p in bag_probs {
                for (a, v) in acc.iter_mut().zip(p) {
                    *a = a.max(*v);
                }
            }
            let total: f64 = acc.iter().sum();
            acc.iter_mut().for_each(|a| *a /= total);
            acc
        }
        Aggregation::Vote => {
            let mut votes = vec![0usize; k];
            for p in bag_probs {
                votes[argmax(p)] += 1;
            }
            votes.iter().map(|&v| v as f64 / n).collect()
        }
    };
    Ok(SlidePrediction {
        slide_id: slide_id.to_string(),
        probs,
        true_label,
    })
}

/// Index of the maximum, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mann-Whitney AUROC with tie handling. `None` when either class is
/// absent. Exact: the sweep counts concordant and tied pairs as
/// integers, so the result equals the brute-force pairwise statistic
/// bit for bit.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    debug_assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut concordant: u128 = 0;
    let mut tied: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_pos: u128 = 0;
        let mut group_neg: u128 = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                group_pos += 1;
            } else {
                group_neg += 1;
            }
            j += 1;
        }
        concordant += group_pos * neg_below;
        tied += group_pos * group_neg;
        neg_below += group_neg;
        i = j;
    }
    Some((2 * concordant + tied) as f64 / (2 * pos * neg) as f64)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Metrics from raw confusion counts. AUROC stays unset.
pub fn report_from_counts(
    cohort: &str,
    class_label: &str,
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
) -> MetricsReport {
    let sensitivity = ratio(tp, tp + fn_);
    let ppv = ratio(tp, tp + fp);
    let f1 = match (ppv, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    MetricsReport {
        cohort: cohort.to_string(),
        class_label: class_label.to_string(),
        auroc: None,
        accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        sensitivity,
        specificity: ratio(tn, tn + fp),
        ppv,
        npv: ratio(tn, tn + fn_),
        f1,
    }
}

/// Binary confusion metrics at a decision threshold (score >= threshold
/// predicts positive) plus the threshold-free AUROC.
pub fn confusion_metrics(
    cohort: &str,
    scores: &[f64],
    labels: &[usize],
    threshold: f64,
) -> MetricsReport {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut report = report_from_counts(cohort, "N+", tp, fp, tn, fn_);
    report.auroc = roc_auc(scores, labels);
    report
}

/// One-vs-rest metrics for each class: argmax decisions for the
/// confusion-derived metrics, the class probability column for AUROC.
pub fn multiclass_metrics(
    cohort: &str,
    prob_vectors: &[Vec<f64>],
    labels: &[usize],
    class_names: &[&str],
) -> Vec<MetricsReport> {
    let predictions: Vec<usize> = prob_vectors.iter().map(|p| argmax(p)).collect();
    class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
            for (&pred, &label) in predictions.iter().zip(labels) {
                match (pred == c, label == c) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
            let mut report = report_from_counts(cohort, name, tp, fp, tn, fn_);
            let scores: Vec<f64> = prob_vectors.iter().map(|p| p[c]).collect();
            let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
            report.auroc = roc_auc(&scores, &binary);
            report
        })
        .collect()
}

/// One point of the ROC sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve points: the (0,0) anchor at threshold infinity, then one
/// point per distinct score, descending.
pub fn roc_points(scores: &[f64], labels: &[usize]) -> Vec<RocPoint> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: if neg == 0 { 0.0 } else { fp as f64 / neg as f64 },
            tpr: if pos == 0 { 0.0 } else { tp as f64 / pos as f64 },
            threshold,
        });
    }
    points
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "NA".to_string(),
    }
}

/// Metric table columns, in the order reports print them.
pub const METRIC_COLUMNS: [&str; 7] = [
    "auroc",
    "accuracy",
    "sensitivity",
    "specificity",
    "ppv",
    "npv",
    "f1",
];

/// CSV rows `cohort,class,auroc,...,f1` with NA for undefined cells.
pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("cohort,class,auroc,accuracy,sensitivity,specificity,ppv,npv,f1\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.cohort,
            r.class_label,
            cell(r.auroc),
            cell(r.accuracy),
            cell(r.sensitivity),
            cell(r.specificity),
            cell(r.ppv),
            cell(r.npv),
            cell(r.f1),
        );
    }
    out
}

/// Markdown table in the same column order.
pub fn render_markdown(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "| Cohort | Class | AUROC | Accuracy | Sensitivity | Specificity | PPV | NPV | F1 |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.cohort,
            r.class_label,
            cell(r.auroc),
            cell(r.accuracy),
            cell(r.sensitivity),
            cell(r.specificity),
            cell(r.ppv),
            cell(r.npv),
            cell(r.f1),
        );
    }
    out
}

/// ROC curve CSV `fpr,tpr,threshold`.
pub fn render_roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        let _ = writeln!(out, "{:.6},{:.6},{}", p.fpr, p.tpr, p.threshold);
    }
    out
}

/// Brute-force pairwise AUROC; the oracle the sweep must match exactly.
/// Exposed so the acceptance suite can run it against `roc_auc`.
pub fn roc_auc_bruteforce(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                sum += 1.0;
            } else if p == n {
                sum += 0.5;
            }
        }
    }
    Some(sum / (pos.len() * neg.len()) as f64)
}

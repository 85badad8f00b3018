//! Optimization: softmax cross-entropy over bag labels, plain SGD with
//! L2 weight decay plus an L1 penalty, and cosine annealing with warm
//! restarts for the learning rate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval;
use crate::milnet::{self, BagInput, MilModel};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay_l2: f64,
    pub l1_weight: f64,
    pub epochs: usize,
    /// First restart cycle length T_0, in epochs.
    pub restart_period: usize,
    /// Cycle length multiplier T_mult.
    pub restart_mult: usize,
    pub eta_min: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            weight_decay_l2: 1e-3,
            l1_weight: 1e-6,
            epochs: 200,
            restart_period: 10,
            restart_mult: 2,
            eta_min: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay_l2", self.weight_decay_l2),
            ("l1_weight", self.l1_weight),
            ("eta_min", self.eta_min),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.restart_period == 0 {
            return Err(Error::Config("restart_period must be >= 1".into()));
        }
        if self.restart_mult == 0 {
            return Err(Error::Config("restart_mult must be >= 1".into()));
        }
        if self.eta_min > self.base_lr {
            return Err(Error::Config("eta_min must not exceed base_lr".into()));
        }
        Ok(())
    }
}

/// Softmax cross-entropy with max subtraction.
/// Returns (loss, dloss/dlogits); the gradient is softmax(logits) minus
/// the one-hot label and sums to zero.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Dimension {
            what: "class label".into(),
            expected: logits.len(),
            got: label,
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut dlogits: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    dlogits[label] -= 1.0;
    Ok((loss, dlogits))
}

/// Learning rate at epoch `t` under cosine annealing with warm restarts.
///
/// Cycle i spans T_i = T_0 * mult^i steps plus its endpoint: the rate is
/// base_lr at the cycle start (cos 0), eta_min at the cycle end
/// (cos pi), and restarts to base_lr on the next epoch.
pub fn cosine_warm_restarts(t: usize, cfg: &TrainConfig) -> f64 {
    let mut remaining = t;
    let mut cycle_len = cfg.restart_period;
    while remaining > cycle_len {
        remaining -= cycle_len + 1;
        cycle_len *= cfg.restart_mult;
    }
    let angle = std::f64::consts::PI * remaining as f64 / cycle_len as f64;
    cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1.0 + angle.cos())
}

/// One SGD update: theta <- theta - lr * (g + l2 * theta + l1 * sign(theta)),
/// with sign(0) = 0.
pub fn sgd_step(model: &mut MilModel, lr: f64, cfg: &TrainConfig) -> Result<()> {
    for (name, tensor) in model.params_mut() {
        let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let data = tensor.data_mut();
        for (theta, g) in data.iter_mut().zip(&grad) {
            let sign = if *theta > 0.0 {
                1.0
            } else if *theta < 0.0 {
                -1.0
            } else {
                0.0
            };
            *theta -= lr * (g + cfg.weight_decay_l2 * *theta + cfg.l1_weight * sign);
            if !theta.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite update in parameter {name} (lr {lr})"
                )));
            }
        }
    }
    Ok(())
}

/// Training data access: the loop pulls bags by index so sources can
/// re-augment per epoch while keeping the loop deterministic.
pub trait BagSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn slide_id(&self, idx: usize) -> &str;
    fn label(&self, idx: usize) -> usize;
    /// Materialize one bag. `epoch` lets training sources re-sample
    /// augmentation; evaluation sources ignore it.
    fn bag(&self, idx: usize, epoch: usize) -> Result<BagInput>;
}

/// Plain in-memory bag list (no augmentation).
pub struct MaterializedBags {
    pub bags: Vec<(String, usize, BagInput)>,
}

impl BagSource for MaterializedBags {
    fn len(&self) -> usize {
        self.bags.len()
    }
    fn slide_id(&self, idx: usize) -> &str {
        &self.bags[idx].0
    }
    fn label(&self, idx: usize) -> usize {
        self.bags[idx].1
    }
    fn bag(&self, idx: usize, _epoch: usize) -> Result<BagInput> {
        Ok(self.bags[idx].2.clone())
    }
}

/// One training-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
}

/// Outcome of a training run: the best-validation checkpoint (final
/// parameters when validation AUROC was never defined) and the log.
pub struct TrainOutcome {
    pub model: MilModel,
    pub best_epoch: Option<usize>,
    pub best_val_auroc: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// Slide-level validation AUROC: aggregate per-bag softmax probabilities
/// per slide, then score. Binary uses the positive-class column; with
/// more classes this is the mean of the defined one-vs-rest AUROCs.
pub fn slide_level_auroc(model: &MilModel, source: &dyn BagSource) -> Result<Option<f64>> {
    let preds = slide_predictions(model, source, eval::Aggregation::Mean, 0)?;
    Ok(auroc_of_predictions(&preds, model.cfg.classes))
}

pub(crate) fn auroc_of_predictions(preds: &[eval::SlidePrediction], classes: usize) -> Option<f64> {
    if classes == 2 {
        let scores: Vec<f64> = preds.iter().map(|p| p.probs[1]).collect();
        let labels: Vec<usize> = preds.iter().map(|p| p.true_label).collect();
        eval::roc_auc(&scores, &labels)
    } else {
        let mut defined = Vec::new();
        for c in 0..classes {
            let scores: Vec<f64> = preds.iter().map(|p| p.probs[c]).collect();
            let labels: Vec<usize> = preds.iter().map(|p| usize::from(p.true_label == c)).collect();
            if let Some(a) = eval::roc_auc(&scores, &labels) {
                defined.push(a);
            }
        }
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

/// Forward every bag of a source and aggregate per slide (sorted order).
pub fn slide_predictions(
    model: &MilModel,
    source: &dyn BagSource,
    aggregation: eval::Aggregation,
    epoch: usize,
) -> Result<Vec<eval::SlidePrediction>> {
    let mut by_slide: std::collections::BTreeMap<String, (usize, Vec<Vec<f64>>)> =
        std::collections::BTreeMap::new();
    for idx in 0..source.len() {
        let bag = source.bag(idx, epoch)?;
        let fwd = milnet::forward(model, &bag)?;
        let probs = milnet::softmax(&fwd.logits);
        by_slide
            .entry(source.slide_id(idx).to_string())
            .or_insert_with(|| (source.label(idx), Vec::new()))
            .1
            .push(probs);
    }
    by_slide
        .into_iter()
        .map(|(slide_id, (label, probs))| eval::aggregate_slide(&slide_id, &probs, label, aggregation))
        .collect()
}

/// The optimization loop: per epoch, shuffle the training bags (seeded),
/// run forward/backward/step per bag at the scheduled rate, evaluate the
/// validation AUROC, and keep the parameters of the best epoch.
pub fn train_loop(
    mut model: MilModel,
    train: &dyn BagSource,
    val: &dyn BagSource,
    cfg: &TrainConfig,
    run_seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Data("training cohort is empty".into()));
    }
    let mut shuffle_rng = seed::rng_from(seed::subseed(run_seed, "shuffle"));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MilModel)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_warm_restarts(epoch, cfg);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for &idx in &order {
            let bag = train.bag(idx, epoch)?;
            model.zero_grads();
            let fwd = milnet::forward(&model, &bag)?;
            let (loss, dlogits) = cross_entropy(&fwd.logits, train.label(idx))?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss;
            milnet::backward(&mut model, &fwd, &dlogits)?;
            sgd_step(&mut model, lr, cfg)?;
        }
        let val_auroc = if val.is_empty() {
            None
        } else {
            slide_level_auroc(&model, val)?
        };
        // Ties keep the latest epoch: with small validation cohorts the
        // AUROC saturates early while the decision margins still grow.
        if let Some(a) = val_auroc {
            if best.as_ref().is_none_or(|(b, _, _)| a >= *b) {
                best = Some((a, epoch, model.clone()));
            }
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len().max(1) as f64,
            val_auroc,
        });
    }
    let (model, best_epoch, best_val_auroc) = match best {
        Some((a, e, m)) => (m, Some(e), Some(a)),
        None => (model, None, None),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_auroc,
        log,
    })
}

/// Render the training log CSV body: epoch, lr, train_loss, val_auroc
/// with 8 decimal digits (NA when the validation AUROC is undefined).
pub fn render_log_csv(log: &[EpochLog]) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("epoch,lr,train_loss,val_auroc\n");
    for e in log {
        let val = match e.val_auroc {
            Some(a) => format!("{a:.8}"),
            None => "NA".to_string(),
        };
        let _ = writeln!(out, "{},{:.8},{:.8},{}", e.epoch, e.lr, e.train_loss, val);
    }
    out
}

//! Optimization and evaluation: Adam, the mini-batch training loop, and
//! the metric suite (confusion matrix, F1, ROC/AUC, feature histograms).

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{argmax, logits, Classifier, MsrtModel};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::{softmax_in_place, Graph, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            epochs: 12,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        Ok(())
    }

    /// Optimizer steps for one run over `n` records (last batch may be short).
    pub fn steps_for(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// Adam moment accumulators, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_module<M: Module + ?Sized>(model: &M) -> Self {
        let mut ps = Vec::new();
        model.named_params("", &mut ps);
        AdamState::new(&ps.iter().map(|(_, p)| p.len()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut Param],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} state buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "parameter {i}: {} values, grad {}, state {}",
                    p.len(),
                    g.len(),
                    state.m[i].len()
                ),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let data = p.data_mut();
        for (((w, m), v), &g) in data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Mean cross-entropy of plain logit rows (log-sum-exp stabilized).
pub fn cross_entropy(logit_rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logit_rows.len() != labels.len() {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} rows, {} labels", logit_rows.len(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::Empty("cross_entropy"));
    }
    let mut total = 0.0;
    for (row, &y) in logit_rows.iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::Contract(format!(
                "label {y} out of range for {} classes",
                row.len()
            )));
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Summary of one training epoch, from the predictions made while
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub trajectory: Vec<EpochStats>,
    pub steps: usize,
}

/// Runs `cfg.epochs` epochs of mini-batch Adam on mean cross-entropy.
pub fn train<M: Classifier>(
    model: &mut M,
    samples: &[&[f64]],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, samples, labels, cfg, |_, _| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every epoch; `Break` ends the run.
pub fn train_with<M, F>(
    model: &mut M,
    samples: &[&[f64]],
    labels: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    M: Classifier,
    F: FnMut(&M, &EpochStats) -> ControlFlow<()>,
{
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("train"));
    }
    if samples.len() != labels.len() {
        return Err(Error::dim(
            "train",
            format!("{} records, {} labels", samples.len(), labels.len()),
        ));
    }
    let n_classes = model.config().n_classes;
    let len = model.config().input_len;
    for (i, (s, &y)) in samples.iter().zip(labels).enumerate() {
        if y >= n_classes {
            return Err(Error::Contract(format!(
                "record {i}: label {y} out of range for {n_classes} classes"
            )));
        }
        if s.len() != len {
            return Err(Error::dim(
                "train",
                format!("record {i}: expected length {len}, got {}", s.len()),
            ));
        }
    }
    let mut state = AdamState::for_module(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut outcome = TrainOutcome {
        trajectory: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut predicted = vec![0; samples.len()];
        for batch in order.chunks(cfg.batch_size) {
            let (grads, results) = batch_gradients(model, samples, labels, batch)?;
            for (&i, (loss, pred)) in batch.iter().zip(results) {
                loss_sum += loss;
                predicted[i] = pred;
            }
            let mut params = Vec::new();
            model.params_mut(&mut params);
            adam_step(&mut params, &grads, &mut state, cfg)?;
            outcome.steps += 1;
        }
        let cm = ConfusionMatrix::from_predictions(labels, &predicted, n_classes)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / samples.len() as f64,
            accuracy: cm.accuracy(),
            macro_f1: f1_scores(&cm).macro_f1,
        };
        let flow = on_epoch(model, &stats);
        outcome.trajectory.push(stats);
        if flow.is_break() {
            break;
        }
    }
    Ok(outcome)
}

/// Mean gradient of the batch loss, plus (loss, predicted class) per record.
fn batch_gradients<M: Classifier>(
    model: &M,
    samples: &[&[f64]],
    labels: &[usize],
    batch: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<(f64, usize)>)> {
    let mut named = Vec::new();
    model.named_params("", &mut named);
    let params: Vec<&Param> = named.iter().map(|(_, p)| *p).collect();
    let len = model.config().input_len;
    let per_record = batch
        .par_iter()
        .map(|&i| -> Result<_> {
            let mut g = Graph::new();
            let x = g.constant(&[1, len], samples[i].to_vec())?;
            let z = model.record_logits(&mut g, x)?;
            let pred = argmax(g.value(z));
            let loss = g.cross_entropy(z, &[labels[i]])?;
            let lv = g.value(loss)[0];
            g.backward(loss)?;
            let grads: Vec<Option<Vec<f64>>> = params
                .iter()
                .map(|p| g.param_grad(p).map(<[f64]>::to_vec))
                .collect();
            Ok((grads, lv, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut results = Vec::with_capacity(batch.len());
    for (grads, lv, pred) in per_record {
        for (acc, g) in total.iter_mut().zip(grads) {
            if let Some(g) = g {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        results.push((lv, pred));
    }
    total
        .iter_mut()
        .for_each(|t| t.iter_mut().for_each(|v| *v *= scale));
    Ok((total, results))
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(
                "confusion",
                format!("{} labels, {} predictions", truth.len(), predicted.len()),
            ));
        }
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::Contract(format!(
                    "class pair ({t}, {p}) out of range for {n_classes} classes"
                )));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.n_classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    /// Classes where a 0/0 rate was replaced by 0.
    pub degenerate: Vec<usize>,
}

/// One-vs-rest precision, recall and F1 per class, and their unweighted mean.
pub fn f1_scores(cm: &ConfusionMatrix) -> F1Report {
    let n = cm.n_classes();
    let mut r = F1Report {
        precision: Vec::with_capacity(n),
        recall: Vec::with_capacity(n),
        f1: Vec::with_capacity(n),
        macro_f1: 0.0,
        degenerate: Vec::new(),
    };
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    for c in 0..n {
        let tp = cm.counts[c][c];
        let predicted: u64 = (0..n).map(|t| cm.counts[t][c]).sum();
        let actual: u64 = cm.counts[c].iter().sum();
        let p = ratio(tp, predicted);
        let q = ratio(tp, actual);
        if p.is_none() || q.is_none() {
            r.degenerate.push(c);
        }
        let (p, q) = (p.unwrap_or(0.0), q.unwrap_or(0.0));
        r.precision.push(p);
        r.recall.push(q);
        r.f1.push(f1(p, q));
    }
    if n > 0 {
        r.macro_f1 = r.f1.iter().sum::<f64>() / n as f64;
    }
    r
}

/// Mean of per-epoch macro-F1 values.
pub fn epoch_average_f1(per_epoch: &[f64]) -> Result<f64> {
    if per_epoch.is_empty() {
        return Err(Error::Empty("epoch_average_f1"));
    }
    Ok(per_epoch.iter().sum::<f64>() / per_epoch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// `(false positive rate, true positive rate)`, from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve by sweeping every distinct score as a threshold; tied scores
/// cross the threshold together. AUC is the trapezoid area, evaluated in
/// integer counts so it matches the pairwise statistic exactly.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<Roc> {
    if scores.len() != truth.len() {
        return Err(Error::dim(
            "roc_auc",
            format!("{} scores, {} labels", scores.len(), truth.len()),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Contract("roc_auc: NaN score".into()));
    }
    let pos = truth.iter().filter(|&&t| t).count() as u64;
    let neg = truth.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(
            "roc_auc needs at least one positive and one negative".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        let (tp0, fp0) = (tp, fp);
        while i < idx.len() && scores[idx[i]] == s {
            if truth[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = twice_area as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(Roc { points, auc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `n_bins + 1` equally spaced edges from min to max.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram over `[min, max]`; the top edge is inclusive.
pub fn feature_histogram(values: &[f64], n_bins: usize) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::Empty("feature_histogram"));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; n_bins];
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(n_bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Amplitude histograms of every backbone (`C2..C5`) and pyramid
/// (`P2..P5`) map for one record.
pub fn pyramid_histograms(model: &MsrtModel, record: &[f64], n_bins: usize) -> Result<Vec<(String, Histogram)>> {
    let mut g = Graph::inference();
    let x = g.constant(&[1, record.len()], record.to_vec())?;
    let maps = model.pyramid(&mut g, x)?;
    let mut out = Vec::with_capacity(8);
    for (prefix, level) in [("C", &maps.c), ("P", &maps.p)] {
        for (i, t) in level.iter().enumerate() {
            out.push((format!("{prefix}{}", i + 2), feature_histogram(g.value(*t), n_bins)?));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRoc {
    pub class: usize,
    /// `None` when the evaluation set lacks positives or negatives.
    pub roc: Option<Roc>,
}

/// Everything reported about one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_f1: f64,
    /// Classes whose precision or recall was 0/0.
    pub degenerate_classes: Vec<usize>,
    /// Mean of the per-epoch training macro-F1 values, when a trajectory
    /// is attached.
    pub epoch_average_f1: Option<f64>,
    pub roc: Vec<ClassRoc>,
    pub trajectory: Vec<EpochStats>,
}

impl EvalReport {
    pub fn from_logits(logit_rows: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Self> {
        if logit_rows.is_empty() {
            return Err(Error::Empty("evaluate"));
        }
        let loss = cross_entropy(logit_rows, labels)?;
        let predicted: Vec<usize> = logit_rows.iter().map(|r| argmax(r)).collect();
        let cm = ConfusionMatrix::from_predictions(labels, &predicted, n_classes)?;
        let f = f1_scores(&cm);
        let probs: Vec<Vec<f64>> = logit_rows
            .iter()
            .map(|r| {
                let mut p = r.clone();
                softmax_in_place(&mut p);
                p
            })
            .collect();
        let roc = (0..n_classes)
            .map(|c| {
                let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
                let truth: Vec<bool> = labels.iter().map(|&y| y == c).collect();
                ClassRoc {
                    class: c,
                    roc: roc_auc(&scores, &truth).ok(),
                }
            })
            .collect();
        Ok(EvalReport {
            n_records: labels.len(),
            loss,
            accuracy: cm.accuracy(),
            confusion: cm,
            precision: f.precision,
            recall: f.recall,
            f1: f.f1,
            macro_f1: f.macro_f1,
            degenerate_classes: f.degenerate,
            epoch_average_f1: None,
            roc,
            trajectory: Vec::new(),
        })
    }

    /// Attaches a training trajectory and its epoch-averaged F1.
    pub fn with_trajectory(mut self, trajectory: Vec<EpochStats>) -> Self {
        let f: Vec<f64> = trajectory.iter().map(|e| e.macro_f1).collect();
        self.epoch_average_f1 = epoch_average_f1(&f).ok();
        self.trajectory = trajectory;
        self
    }

    pub fn auc(&self, class: usize) -> Option<f64> {
        self.roc.get(class)?.roc.as_ref().map(|r| r.auc)
    }
}

pub fn evaluate<M: Classifier + ?Sized>(model: &M, samples: &[&[f64]], labels: &[usize]) -> Result<EvalReport> {
    let rows = logits(model, samples)?;
    EvalReport::from_logits(&rows, labels, model.config().n_classes)
}

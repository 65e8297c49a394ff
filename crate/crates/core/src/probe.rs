//! Linear probes: per-category softmax regression on frozen representations
//! with early stopping on validation loss, scored by macro-F1.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_cross_entropy, Adam, AdamConfig, Graph, Tensor};
use crate::dataset::{EpisodeDataset, SplitAssignment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Standard deviation of the initial weights (after standardization).
    pub init_std: f64,
    /// Standardize each feature with train-split mean and deviation.
    pub standardize: bool,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 256,
            patience: 5,
            max_epochs: 200,
            init_std: 0.01,
            standardize: true,
        }
    }
}

impl ProbeHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 || !(self.init_std >= 0.0) {
            return Err(Error::Config(format!("invalid probe hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub category: String,
    pub classes: usize,
    /// `[width, classes]`
    pub weights: Tensor,
    /// `[classes]`
    pub bias: Tensor,
    /// Per-feature `(mean, scale)` applied before the linear map.
    pub standardization: Option<(Vec<f64>, Vec<f64>)>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_losses: Vec<f64>,
}

impl ProbeModel {
    pub fn width(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.width() {
            return Err(Error::dim(format!(
                "probe of width {} applied to width {}",
                self.width(),
                x.cols()
            )));
        }
        let z = match &self.standardization {
            Some((mean, scale)) => standardize(x, mean, scale),
            None => x.clone(),
        };
        let mut out = z.matmul(&self.weights)?;
        let c = self.classes;
        for row in out.data_mut().chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn feature_stats(x: &Tensor, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let w = x.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; w];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; w];
    for &r in rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn standardize(x: &Tensor, mean: &[f64], scale: &[f64]) -> Tensor {
    let w = x.cols();
    let data: Vec<f64> = x
        .data()
        .chunks_exact(w)
        .flat_map(|row| row.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s))
        .collect();
    Tensor::new(&[x.rows(), w], data).expect("shape preserved")
}

/// Trains a softmax-regression probe on `split.train`, early-stopping on
/// `split.validation`. Test rows are never read.
pub fn train_probe(
    category: &str,
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    split: &SplitAssignment,
    hyper: &ProbeHyper,
    seed: u64,
) -> Result<ProbeModel> {
    hyper.validate()?;
    if x.shape().len() != 2 || x.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{:?} representations for {} labels",
            x.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Dataset("probe needs non-empty train and validation splits".into()));
    }
    let first = labels[split.train[0]];
    if split.train.iter().all(|&i| labels[i] == first) {
        return Err(Error::DegenerateLabels(format!(
            "category `{category}` has a single class ({first}) in the training split"
        )));
    }

    let standardization = hyper.standardize.then(|| feature_stats(x, &split.train));
    // train rows first, validation rows after
    let rows: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
    let mut z = x.gather_rows(&rows)?;
    if let Some((m, s)) = &standardization {
        z = standardize(&z, m, s);
    }
    let train_rows: Vec<usize> = (0..split.train.len()).collect();
    let val_rows: Vec<usize> = (split.train.len()..rows.len()).collect();
    let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let val_x = z.gather_rows(&val_rows)?;
    let val_y: Vec<usize> = val_rows.iter().map(|&i| y[i]).collect();

    let width = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![
        Tensor::randn(&[width, classes], hyper.init_std, &mut rng),
        Tensor::zeros(&[classes]),
    ];
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));

    let val_loss = |p: &[Tensor]| -> Result<f64> {
        let mut logits = val_x.matmul(&p[0])?;
        for row in logits.data_mut().chunks_exact_mut(classes) {
            for (v, b) in row.iter_mut().zip(p[1].data()) {
                *v += b;
            }
        }
        Ok(softmax_cross_entropy(&logits, &val_y)?.item())
    };

    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut val_losses = Vec::new();
    let mut order = train_rows;
    let mut since_best = 0;
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let bx = z.gather_rows(batch)?;
            let by: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let xin = g.input(bx);
            let w = g.param(params[0].clone());
            let b = g.param(params[1].clone());
            let logits = g.matmul(xin, w)?;
            let logits = g.add(logits, b)?;
            let loss = g.softmax_cross_entropy(logits, &by)?;
            let grads = g.backward(loss)?.wrt(&[w, b]);
            adam.step(&mut params, &grads)?;
        }
        let vl = val_loss(&params)?;
        val_losses.push(vl);
        if vl < best.0 {
            best = (vl, epoch, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    let (_, best_epoch, mut best_params) = best;
    let bias = best_params.pop().unwrap();
    let weights = best_params.pop().unwrap();
    Ok(ProbeModel {
        category: category.to_string(),
        classes,
        weights,
        bias,
        standardization,
        best_epoch,
        epochs_run: val_losses.len(),
        val_losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_class: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Per-class precision, recall and F1 (0 when undefined), and their macro
/// mean over classes that occur in `reference`.
pub fn classification_metrics(predicted: &[usize], reference: &[usize], classes: usize) -> Result<Evaluation> {
    if predicted.len() != reference.len() || reference.is_empty() {
        return Err(Error::dim(format!(
            "{} predictions for {} references",
            predicted.len(),
            reference.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &r) in predicted.iter().zip(reference) {
        if p >= classes || r >= classes {
            return Err(Error::invalid(format!("class index outside {classes} classes")));
        }
        support[r] += 1;
        if p == r {
            tp[p] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let mut per_class = Vec::new();
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let fn_ = support[c] - tp[c];
        let precision = if tp[c] + fp[c] > 0 { tp[c] as f64 / (tp[c] + fp[c]) as f64 } else { 0.0 };
        let recall = tp[c] as f64 / (tp[c] + fn_) as f64;
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        per_class.push(ClassMetrics { class: c, precision, recall, f1, support: support[c] });
    }
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / per_class.len() as f64;
    let accuracy = tp.iter().sum::<usize>() as f64 / reference.len() as f64;
    Ok(Evaluation { per_class, macro_f1, accuracy })
}

pub fn evaluate_probe(model: &ProbeModel, x: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    classification_metrics(&model.predict(x)?, labels, model.classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub name: String,
    /// Test macro-F1, absent when training failed.
    pub f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub categories: Vec<CategoryResult>,
    /// Arithmetic mean of the successful categories' F1.
    pub mean_f1: f64,
}

impl ProbeReport {
    pub fn f1(&self, name: &str) -> Option<f64> {
        self.categories.iter().find(|c| c.name == name).and_then(|c| c.f1)
    }
}

/// One probe per schema category on identical splits. Category `i` trains
/// with seed `seed + i`, so results do not depend on scheduling.
pub fn probe_suite(
    dataset: &EpisodeDataset,
    x: &Tensor,
    split: &SplitAssignment,
    hyper: &ProbeHyper,
    seed: u64,
) -> Result<ProbeReport> {
    if x.rows() != dataset.frame_count() {
        return Err(Error::dim(format!(
            "{} representations for {} frames",
            x.rows(),
            dataset.frame_count()
        )));
    }
    if split.test.is_empty() {
        return Err(Error::Dataset("empty test split".into()));
    }
    let test_x = x.gather_rows(&split.test)?;
    let schema = dataset.schema();
    let categories: Vec<CategoryResult> = (0..schema.len())
        .into_par_iter()
        .map(|c| {
            let name = schema.name(c).to_string();
            let labels = dataset.category_labels(c);
            let test_y: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
            let outcome = train_probe(&name, x, &labels, schema.class_count(c), split, hyper, seed.wrapping_add(c as u64))
                .and_then(|m| evaluate_probe(&m, &test_x, &test_y).map(|e| (m, e)));
            match outcome {
                Ok((m, e)) => CategoryResult {
                    name,
                    f1: Some(e.macro_f1),
                    best_epoch: Some(m.best_epoch),
                    epochs_run: Some(m.epochs_run),
                    error: None,
                },
                Err(err) => CategoryResult {
                    name,
                    f1: None,
                    best_epoch: None,
                    epochs_run: None,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<f64> = categories.iter().filter_map(|c| c.f1).collect();
    let mean_f1 = if ok.is_empty() { 0.0 } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    Ok(ProbeReport { categories, mean_f1 })
}

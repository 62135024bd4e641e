use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, auroc, weighted_f1};
use crate::error::{contract, ensure_dims, Error, Result};
use crate::nn::{
    backprop_gradients, forward_trace, Activation, DenseLayer, LayerGradient, Loss,
    RmsPropConfig, RmsPropState,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryMetric {
    /// AUROC of the positive class (class 1) probability.
    Auroc,
    WeightedF1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub n_classes: usize,
    pub metric: PrimaryMetric,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, n_classes: usize, metric: PrimaryMetric) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config(format!("task needs ≥ 2 classes, got {n_classes}")));
        }
        if metric == PrimaryMetric::Auroc && n_classes != 2 {
            return Err(Error::Config("AUROC tasks must be binary".into()));
        }
        Ok(Self {
            name: name.into(),
            n_classes,
            metric,
        })
    }

    /// The six note-derived tasks: three mortality horizons scored by
    /// AUROC, diagnostic/procedural category and gender by weighted F1.
    pub fn standard(name: &str) -> Option<Self> {
        let (n, metric) = match name {
            "in_hosp" | "d30" | "y1" => (2, PrimaryMetric::Auroc),
            "diag_cat" => (20, PrimaryMetric::WeightedF1),
            "proc_cat" => (18, PrimaryMetric::WeightedF1),
            "gender" => (2, PrimaryMetric::WeightedF1),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            n_classes: n,
            metric,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![256],
            epochs: 100,
            batch_size: 64,
            optimizer: RmsPropConfig::default(),
            patience: 10,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) || self.batch_size == 0 {
            return Err(Error::Config("hidden sizes and batch size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// What early stopping maximizes on the validation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    PrimaryMetric,
    /// Negative mean cross-entropy; used when the primary metric is
    /// undefined on the validation labels.
    NegativeLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub input_dim: usize,
    pub layers: Vec<DenseLayer>,
    pub task: TaskSpec,
    pub config: MlpConfig,
    pub loss_trace: Vec<f64>,
    pub validation_trace: Vec<f64>,
    pub selection: SelectionCriterion,
    /// 1-based epoch of the restored snapshot (0 when untrained).
    pub best_epoch: usize,
    pub best_validation: f64,
}

impl MlpModel {
    pub fn initialize(input_dim: usize, task: &TaskSpec, config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).split(0);
        let mut layers = Vec::new();
        let mut in_dim = input_dim;
        for &h in &config.hidden_sizes {
            layers.push(DenseLayer::glorot_uniform(in_dim, h, Activation::Sigmoid, &mut rng));
            in_dim = h;
        }
        layers.push(DenseLayer::glorot_uniform(
            in_dim,
            task.n_classes,
            Activation::Softmax,
            &mut rng,
        ));
        Ok(Self {
            input_dim,
            layers,
            task: task.clone(),
            config: config.clone(),
            loss_trace: Vec::new(),
            validation_trace: Vec::new(),
            selection: SelectionCriterion::PrimaryMetric,
            best_epoch: 0,
            best_validation: f64::NEG_INFINITY,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.task.n_classes
    }

    pub fn proba_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(forward_trace(&self.layers, x)?.output().to_vec())
    }
}

/// Borrowed rows and labels.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub x: &'a [Vec<f64>],
    pub y: &'a [usize],
}

impl<'a> Dataset<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [usize]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(contract("dataset rows and labels differ in length"));
        }
        Ok(Self { x, y })
    }

    fn check(&self, input_dim: usize, n_classes: usize) -> Result<()> {
        for row in self.x {
            ensure_dims("classifier input", input_dim, row.len())?;
        }
        if let Some(&bad) = self.y.iter().find(|&&c| c >= n_classes) {
            return Err(contract(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(())
    }
}

pub fn predict_proba(model: &MlpModel, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    x.par_iter().map(|row| model.proba_row(row)).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn predict(model: &MlpModel, x: &[Vec<f64>]) -> Result<Vec<usize>> {
    Ok(predict_proba(model, x)?.iter().map(|p| argmax(p)).collect())
}

fn primary_metric(task: &TaskSpec, proba: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    match task.metric {
        PrimaryMetric::Auroc => {
            let scores: Vec<f64> = proba.iter().map(|p| p[1]).collect();
            auroc(&scores, truth)
        }
        PrimaryMetric::WeightedF1 => {
            let pred: Vec<usize> = proba.iter().map(|p| argmax(p)).collect();
            weighted_f1(&pred, truth, task.n_classes)
        }
    }
}

fn mean_cross_entropy(proba: &[Vec<f64>], truth: &[usize]) -> f64 {
    let total: f64 = proba
        .iter()
        .zip(truth)
        .map(|(p, &t)| -p[t].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / truth.len().max(1) as f64
}

// fixed chunking keeps the reduction order independent of thread count
const GRAD_CHUNK: usize = 8;

fn batch_gradients(
    layers: &[DenseLayer],
    data: &Dataset,
    batch: &[usize],
    n_classes: usize,
) -> Result<(Vec<LayerGradient>, f64)> {
    let partials: Vec<Result<(Vec<LayerGradient>, f64)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc: Vec<LayerGradient> = layers.iter().map(LayerGradient::zeros_like).collect();
            let mut loss = 0.0;
            let mut target = vec![0.0; n_classes];
            for &i in chunk {
                target[data.y[i]] = 1.0;
                let g = backprop_gradients(layers, &data.x[i], &target, Loss::CrossEntropy)?;
                target[data.y[i]] = 0.0;
                for (a, gi) in acc.iter_mut().zip(&g.layers) {
                    a.add_scaled(gi, 1.0);
                }
                loss += g.loss;
            }
            Ok((acc, loss))
        })
        .collect();
    let mut total: Vec<LayerGradient> = layers.iter().map(LayerGradient::zeros_like).collect();
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for p in partials {
        let (g, l) = p?;
        for (t, gi) in total.iter_mut().zip(&g) {
            t.add_scaled(gi, inv);
        }
        loss += l;
    }
    Ok((total, loss))
}

/// Mini-batch RMSProp on categorical cross-entropy with early stopping on
/// the validation set; the best validation snapshot is restored.
pub fn train_mlp_classifier(
    train: Dataset,
    task: &TaskSpec,
    config: &MlpConfig,
    validation: Dataset,
) -> Result<MlpModel> {
    let input_dim = train
        .x
        .first()
        .map(Vec::len)
        .ok_or_else(|| contract("classifier training set is empty"))?;
    train.check(input_dim, task.n_classes)?;
    validation.check(input_dim, task.n_classes)?;
    if validation.x.is_empty() {
        return Err(contract("validation set is empty"));
    }
    let mut model = MlpModel::initialize(input_dim, task, config)?;
    for c in 0..task.n_classes {
        if !train.y.contains(&c) {
            warn!("task {}: class {c} absent from training labels", task.name);
        }
    }

    let selection = match primary_metric(task, &predict_proba(&model, validation.x)?, validation.y) {
        Ok(_) => SelectionCriterion::PrimaryMetric,
        Err(Error::UndefinedMetric(msg)) => {
            warn!("task {}: {msg} on validation set, early stopping on loss", task.name);
            SelectionCriterion::NegativeLoss
        }
        Err(e) => return Err(e),
    };
    model.selection = selection;

    let mut optimizer = RmsPropState::for_layers(config.optimizer, &model.layers)?;
    let mut rng = Rng::new(config.seed).split(1);
    let mut order: Vec<usize> = (0..train.x.len()).collect();
    let mut best_layers = model.layers.clone();
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let (grads, loss) = batch_gradients(&model.layers, &train, batch, task.n_classes)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "task {}: non-finite loss at epoch {epoch} batch {b}",
                    task.name
                )));
            }
            optimizer.step_layers(&mut model.layers, &grads)?;
            epoch_loss += loss;
        }
        let mean_loss = epoch_loss / train.x.len() as f64;
        model.loss_trace.push(mean_loss);

        let proba = predict_proba(&model, validation.x)?;
        let score = match selection {
            SelectionCriterion::PrimaryMetric => primary_metric(task, &proba, validation.y)?,
            SelectionCriterion::NegativeLoss => -mean_cross_entropy(&proba, validation.y),
        };
        model.validation_trace.push(score);
        info!("task {} epoch {epoch}: loss {mean_loss:.6} validation {score:.6}", task.name);
        if score > model.best_validation {
            model.best_validation = score;
            model.best_epoch = epoch;
            best_layers.clone_from(&model.layers);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    model.layers = best_layers;
    Ok(model)
}

/// Predictions and metrics for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskSpec,
    pub metrics: BTreeMap<String, f64>,
    pub patient_ids: Vec<String>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

pub fn evaluate(
    model: &MlpModel,
    patient_ids: &[String],
    data: Dataset,
) -> Result<EvalReport> {
    if patient_ids.len() != data.x.len() {
        return Err(contract("evaluate: id/row count mismatch"));
    }
    data.check(model.input_dim, model.n_classes())?;
    let probabilities = predict_proba(model, data.x)?;
    let predicted: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("accuracy".to_string(), accuracy(&predicted, data.y)?);
    metrics.insert(
        "weighted_f1".to_string(),
        weighted_f1(&predicted, data.y, model.n_classes())?,
    );
    if model.n_classes() == 2 {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
        match auroc(&scores, data.y) {
            Ok(v) => {
                metrics.insert("auroc".to_string(), v);
            }
            Err(Error::UndefinedMetric(msg)) => warn!("auroc not reported: {msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        task: model.task.clone(),
        metrics,
        patient_ids: patient_ids.to_vec(),
        truth: data.y.to_vec(),
        predicted,
        probabilities,
    })
}

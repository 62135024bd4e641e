//! PV-DBOW paragraph vectors trained with negative sampling.
//!
//! Each document vector is trained to predict words sampled from the
//! document: every sliding window of `window` tokens contributes one
//! uniformly chosen target word, contrasted against `negatives` words
//! drawn from the unigram^0.75 noise distribution.

use log::warn;
use rand::distr::weighted::WeightedIndex;
use serde::{Deserialize, Serialize};

use crate::corpus::{NormalizationMode, Vocabulary};
use crate::error::{contract, Error, Result};
use crate::nn::{sigmoid, Matrix};
use crate::repr::Representation;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Doc2vecConfig {
    pub dim: usize,
    pub epochs: usize,
    pub window: usize,
    pub min_frequency: u64,
    pub negatives: usize,
    pub initial_learning_rate: f64,
    pub final_learning_rate: f64,
    pub seed: u64,
}

impl Default for Doc2vecConfig {
    fn default() -> Self {
        Self {
            dim: 300,
            epochs: 5,
            window: 3,
            min_frequency: 10,
            negatives: 5,
            initial_learning_rate: 0.025,
            final_learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl Doc2vecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.min_frequency == 0 {
            return Err(Error::Config(
                "doc2vec dim, window and min_frequency must be positive".into(),
            ));
        }
        let rates = [self.initial_learning_rate, self.final_learning_rate];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("doc2vec learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Negative-sampling distribution, `P(w) ∝ frequency(w)^0.75`.
#[derive(Debug, Clone)]
pub struct NoiseDistribution {
    probabilities: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl NoiseDistribution {
    pub fn from_frequencies(frequencies: &[u64]) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::Data("noise distribution over an empty vocabulary".into()));
        }
        let weights: Vec<f64> = frequencies.iter().map(|&f| (f as f64).powf(0.75)).collect();
        let total: f64 = weights.iter().sum();
        let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::Data(format!("noise distribution: {e}")))?;
        Ok(Self {
            probabilities,
            index,
        })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        rng.sample(&self.index)
    }
}

impl PartialEq for NoiseDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.probabilities == other.probabilities
    }
}

pub fn build_noise_distribution(vocab: &Vocabulary) -> Result<NoiseDistribution> {
    NoiseDistribution::from_frequencies(&vocab.frequencies())
}

/// Loss and gradients of one positive/negative-sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct DbowStepLoss {
    pub loss: f64,
    pub grad_doc: Vec<f64>,
    pub grad_target: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `L = −ln σ(u_w·d) − Σₙ ln σ(−u_n·d)` and its gradients with respect to
/// the document vector, the target output vector and each negative.
pub fn dbow_step_loss(doc: &[f64], target: &[f64], negatives: &[&[f64]]) -> DbowStepLoss {
    let s_pos = dot(target, doc);
    let g_pos = sigmoid(s_pos) - 1.0;
    let mut loss = -log_sigmoid(s_pos);
    let mut grad_doc: Vec<f64> = target.iter().map(|u| g_pos * u).collect();
    let grad_target = doc.iter().map(|d| g_pos * d).collect();
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for u in negatives {
        let s = dot(u, doc);
        loss -= log_sigmoid(-s);
        let g = sigmoid(s);
        for (gd, ui) in grad_doc.iter_mut().zip(u.iter()) {
            *gd += g * ui;
        }
        grad_negatives.push(doc.iter().map(|d| g * d).collect());
    }
    DbowStepLoss {
        loss,
        grad_doc,
        grad_target,
        grad_negatives,
    }
}

/// Linear decay from `initial` at the first update to `last` at update
/// `total − 1`.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub initial: f64,
    pub last: f64,
    pub total: u64,
}

impl LinearSchedule {
    pub fn rate(&self, t: u64) -> f64 {
        if self.total <= 1 {
            return self.last;
        }
        let frac = t as f64 / (self.total - 1) as f64;
        self.initial + (self.last - self.initial) * frac
    }
}

fn window_count(len: usize, window: usize) -> usize {
    if len == 0 {
        0
    } else {
        len.saturating_sub(window).saturating_add(1).max(1)
    }
}

fn uniform_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    let half = 0.5 / dim as f64;
    (0..dim).map(|_| rng.uniform_range(-half, half)).collect()
}

// rng stream keys
const STREAM_DOCS: u64 = 0;
const STREAM_WORDS: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_INFER_INIT: u64 = 3;
const STREAM_INFER: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct DocEmbeddingModel {
    /// n_docs × dim
    pub doc_vectors: Matrix,
    /// |vocab| × dim output word vectors
    pub word_vectors: Matrix,
    pub noise: NoiseDistribution,
    pub vocab: Vocabulary,
    pub patient_ids: Vec<String>,
    pub config: Doc2vecConfig,
    pub updates_per_epoch: u64,
    /// Learning rate used by the last update.
    pub last_learning_rate: f64,
    pub warnings: Vec<String>,
}

impl DocEmbeddingModel {
    pub fn representations(&self) -> Vec<Representation> {
        self.patient_ids
            .iter()
            .enumerate()
            .map(|(i, id)| Representation::new(id.clone(), self.doc_vectors.row(i).to_vec()))
            .collect()
    }

    fn ids_of(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .filter_map(|t| self.vocab.id(t).map(|i| i as usize))
            .collect()
    }
}

struct Sgd<'a> {
    config: &'a Doc2vecConfig,
    noise: &'a NoiseDistribution,
    schedule: LinearSchedule,
    step: u64,
    negatives: Vec<usize>,
}

impl Sgd<'_> {
    fn sample_negatives(&mut self, target: usize, rng: &mut Rng) {
        self.negatives.clear();
        while self.negatives.len() < self.config.negatives {
            let w = self.noise.sample(rng);
            if w != target {
                self.negatives.push(w);
            }
        }
    }

    /// One pass of updates over a document. `words` is `None` when the
    /// output vectors are frozen.
    fn document_pass(
        &mut self,
        doc: &mut [f64],
        ids: &[usize],
        mut words: Option<&mut Matrix>,
        frozen: Option<&Matrix>,
        rng: &mut Rng,
    ) {
        let window = self.config.window;
        for start in 0..window_count(ids.len(), window) {
            let span = &ids[start..(start + window).min(ids.len())];
            let target = span[rng.below(span.len())];
            self.sample_negatives(target, rng);
            let lr = self.schedule.rate(self.step);
            self.step += 1;

            let u: &Matrix = match (&words, frozen) {
                (Some(w), _) => w,
                (None, Some(f)) => f,
                (None, None) => unreachable!("either trainable or frozen vectors"),
            };
            let negs: Vec<&[f64]> = self.negatives.iter().map(|&n| u.row(n)).collect();
            let step = dbow_step_loss(doc, u.row(target), &negs);

            for (d, g) in doc.iter_mut().zip(&step.grad_doc) {
                *d -= lr * g;
            }
            if let Some(w) = words.as_deref_mut() {
                for (v, g) in w.row_mut(target).iter_mut().zip(&step.grad_target) {
                    *v -= lr * g;
                }
                for (&n, grad) in self.negatives.iter().zip(&step.grad_negatives) {
                    for (v, g) in w.row_mut(n).iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
            }
        }
    }
}

/// Trains document vectors for already-normalized token streams. The
/// vocabulary is built from these documents with `config.min_frequency`.
pub fn train_dbow(
    patient_ids: Vec<String>,
    docs: &[Vec<String>],
    config: &Doc2vecConfig,
) -> Result<DocEmbeddingModel> {
    config.validate()?;
    if patient_ids.len() != docs.len() {
        return Err(contract("doc2vec: id/document count mismatch"));
    }
    let vocab = Vocabulary::from_documents(docs, NormalizationMode::Doc2vec, config.min_frequency)?;
    if vocab.len() < 2 && config.negatives > 0 {
        return Err(Error::Data(format!(
            "negative sampling needs at least 2 vocabulary words, found {}",
            vocab.len()
        )));
    }
    let noise = build_noise_distribution(&vocab)?;
    let master = Rng::new(config.seed);
    let dim = config.dim;

    let mut doc_rng = master.split(STREAM_DOCS);
    let mut doc_vectors = Matrix::zeros(docs.len(), dim);
    for i in 0..docs.len() {
        doc_vectors
            .row_mut(i)
            .copy_from_slice(&uniform_vector(dim, &mut doc_rng));
    }
    let mut word_rng = master.split(STREAM_WORDS);
    let mut word_vectors = Matrix::zeros(vocab.len(), dim);
    for i in 0..vocab.len() {
        word_vectors
            .row_mut(i)
            .copy_from_slice(&uniform_vector(dim, &mut word_rng));
    }

    let id_docs: Vec<Vec<usize>> = docs
        .iter()
        .map(|d| d.iter().filter_map(|t| vocab.id(t).map(|i| i as usize)).collect())
        .collect();
    let mut warnings = Vec::new();
    for (pid, ids) in patient_ids.iter().zip(&id_docs) {
        if ids.is_empty() {
            let msg = format!("patient {pid}: no in-vocabulary tokens, vector left at initialization");
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    let updates_per_epoch: u64 = id_docs
        .iter()
        .map(|ids| window_count(ids.len(), config.window) as u64)
        .sum();

    let mut sgd = Sgd {
        config,
        noise: &noise,
        schedule: LinearSchedule {
            initial: config.initial_learning_rate,
            last: config.final_learning_rate,
            total: updates_per_epoch * config.epochs as u64,
        },
        step: 0,
        negatives: Vec::with_capacity(config.negatives),
    };
    let mut rng = master.split(STREAM_TRAIN);
    let mut doc = vec![0.0; dim];
    for _ in 0..config.epochs {
        for (i, ids) in id_docs.iter().enumerate() {
            doc.copy_from_slice(doc_vectors.row(i));
            sgd.document_pass(&mut doc, ids, Some(&mut word_vectors), None, &mut rng);
            doc_vectors.row_mut(i).copy_from_slice(&doc);
        }
    }
    let last_learning_rate = if sgd.step > 0 {
        sgd.schedule.rate(sgd.step - 1)
    } else {
        config.initial_learning_rate
    };
    if !doc_vectors.is_finite() || !word_vectors.is_finite() {
        return Err(Error::Training("doc2vec produced non-finite vectors".into()));
    }

    Ok(DocEmbeddingModel {
        doc_vectors,
        word_vectors,
        noise,
        vocab,
        patient_ids,
        config: config.clone(),
        updates_per_epoch,
        last_learning_rate,
        warnings,
    })
}

/// Starting point of every inferred vector for a given config.
pub fn initial_doc_vector(config: &Doc2vecConfig) -> Vec<f64> {
    uniform_vector(config.dim, &mut Rng::new(config.seed).split(STREAM_INFER_INIT))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub vector: Vec<f64>,
    pub warning: Option<String>,
}

/// Fits a fresh document vector against the frozen output vectors.
pub fn infer_doc_vector(
    model: &DocEmbeddingModel,
    tokens: &[String],
    config: &Doc2vecConfig,
) -> Result<Inference> {
    config.validate()?;
    if config.dim != model.config.dim {
        return Err(contract(format!(
            "inference dim {} differs from model dim {}",
            config.dim, model.config.dim
        )));
    }
    let mut vector = initial_doc_vector(config);
    let ids = model.ids_of(tokens);
    if ids.is_empty() {
        let msg = "document has no in-vocabulary tokens; returning the initial vector".to_string();
        warn!("{msg}");
        return Ok(Inference {
            vector,
            warning: Some(msg),
        });
    }
    let per_pass = window_count(ids.len(), config.window) as u64;
    let mut sgd = Sgd {
        config,
        noise: &model.noise,
        schedule: LinearSchedule {
            initial: config.initial_learning_rate,
            last: config.final_learning_rate,
            total: per_pass * config.epochs as u64,
        },
        step: 0,
        negatives: Vec::with_capacity(config.negatives),
    };
    let mut rng = Rng::new(config.seed).split(STREAM_INFER);
    for _ in 0..config.epochs {
        sgd.document_pass(&mut vector, &ids, None, Some(&model.word_vectors), &mut rng);
    }
    Ok(Inference {
        vector,
        warning: None,
    })
}

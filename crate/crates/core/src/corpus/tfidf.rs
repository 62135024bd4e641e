use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::PatientRecord;
use super::tokenize::{NormalizationMode, Normalizer};
use super::vocab::{record_tokens, Vocabulary};
use crate::error::{contract, Error, Result};

/// Sparse vector with strictly increasing indices and no explicit zeros.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn from_dense(dense: &[f64]) -> Self {
        let mut row = SparseRow::default();
        for (i, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                row.indices.push(i as u32);
                row.values.push(v);
            }
        }
        row
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] = v;
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::Data("sparse row index/value length mismatch".into()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("sparse row indices not strictly increasing".into()));
        }
        if self.indices.last().is_some_and(|&i| i as usize >= dim) {
            return Err(Error::Data("sparse row index out of range".into()));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v == 0.0) {
            return Err(Error::Data("sparse row holds a zero or non-finite value".into()));
        }
        Ok(())
    }
}

/// Per-document TF-IDF rows over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub vocab_hash: String,
    pub patient_ids: Vec<String>,
    pub rows: Vec<SparseRow>,
}

impl FeatureMatrix {
    pub fn new(
        dim: usize,
        vocab_hash: impl Into<String>,
        patient_ids: Vec<String>,
        rows: Vec<SparseRow>,
    ) -> Result<Self> {
        let m = Self {
            dim,
            vocab_hash: vocab_hash.into(),
            patient_ids,
            rows,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patient_ids.len() != self.rows.len() {
            return Err(Error::Data("feature matrix id/row count mismatch".into()));
        }
        for row in &self.rows {
            row.validate(self.dim)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps only the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            dim: self.dim,
            vocab_hash: self.vocab_hash.clone(),
            patient_ids: rows.iter().map(|&r| self.patient_ids[r].clone()).collect(),
            rows: rows.iter().map(|&r| self.rows[r].clone()).collect(),
        }
    }

    pub fn dense_rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.to_dense(self.dim)).collect()
    }
}

/// `idf(t) = ln((1+N)/(1+df(t))) + 1` with N and df from the vocabulary.
pub fn idf_weights(vocab: &Vocabulary) -> Vec<f64> {
    let n = vocab.n_documents() as f64;
    vocab
        .entries()
        .iter()
        .map(|e| ((1.0 + n) / (1.0 + e.document_frequency as f64)).ln() + 1.0)
        .collect()
}

fn tfidf_row(tokens: &[String], vocab: &Vocabulary, idf: &[f64]) -> SparseRow {
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for t in tokens {
        if let Some(id) = vocab.id(t) {
            *counts.entry(id).or_default() += 1;
        }
    }
    let mut row = SparseRow {
        indices: counts.keys().copied().collect(),
        values: counts
            .iter()
            .map(|(&id, &c)| c as f64 * idf[id as usize])
            .collect(),
    };
    let norm = row.norm();
    if norm > 0.0 {
        row.values.iter_mut().for_each(|v| *v /= norm);
    }
    row
}

/// TF-IDF rows for already-normalized token streams.
pub fn featurize_tokens(
    patient_ids: Vec<String>,
    docs: &[Vec<String>],
    vocab: &Vocabulary,
) -> Result<FeatureMatrix> {
    if patient_ids.len() != docs.len() {
        return Err(contract("featurize: id/document count mismatch"));
    }
    let idf = idf_weights(vocab);
    let rows: Vec<SparseRow> = docs.par_iter().map(|d| tfidf_row(d, vocab, &idf)).collect();
    for (id, row) in patient_ids.iter().zip(&rows) {
        if row.nnz() == 0 {
            warn!("patient {id}: no in-vocabulary tokens, emitting an all-zero row");
        }
    }
    Ok(FeatureMatrix {
        dim: vocab.len(),
        vocab_hash: vocab.hash(),
        patient_ids,
        rows,
    })
}

/// Raw count × smoothed IDF per term, then L2-normalized rows.
/// Out-of-vocabulary tokens are ignored.
pub fn featurize_tfidf(
    corpus: &[PatientRecord],
    vocab: &Vocabulary,
    normalizer: &Normalizer,
) -> Result<FeatureMatrix> {
    if vocab.mode() != NormalizationMode::Sdae {
        return Err(contract("TF-IDF features need an sdae-mode vocabulary"));
    }
    let docs: Vec<Vec<String>> = corpus
        .par_iter()
        .map(|r| record_tokens(r, NormalizationMode::Sdae, normalizer))
        .collect();
    let ids = corpus.iter().map(|r| r.patient_id.clone()).collect();
    featurize_tokens(ids, &docs, vocab)
}

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::PatientRecord;
use super::tokenize::{NormalizationMode, Normalizer};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyEntry {
    pub token: String,
    /// Total occurrences across the corpus.
    pub frequency: u64,
    /// Number of documents containing the token.
    pub document_frequency: u64,
}

/// Token ↔ id map. Ids are contiguous from 0 in lexicographic token order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    mode: NormalizationMode,
    min_frequency: u64,
    n_documents: u64,
    entries: Vec<VocabularyEntry>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_entries(
        mode: NormalizationMode,
        min_frequency: u64,
        n_documents: u64,
        mut entries: Vec<VocabularyEntry>,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.token.cmp(&b.token));
        if entries.windows(2).any(|w| w[0].token == w[1].token) {
            return Err(Error::Data("duplicate token in vocabulary".into()));
        }
        let ids = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.token.clone(), i as u32))
            .collect();
        Ok(Self {
            mode,
            min_frequency,
            n_documents,
            entries,
            ids,
        })
    }

    /// Counts tokens over already-normalized documents and keeps those with
    /// corpus frequency ≥ `min_frequency`.
    pub fn from_documents<S: AsRef<str>>(
        docs: &[Vec<S>],
        mode: NormalizationMode,
        min_frequency: u64,
    ) -> Result<Self> {
        if min_frequency < 1 {
            return Err(contract("min_frequency must be at least 1"));
        }
        let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
        for doc in docs {
            let mut seen: Vec<&str> = Vec::with_capacity(doc.len());
            for tok in doc {
                let tok = tok.as_ref();
                counts.entry(tok).or_default().0 += 1;
                seen.push(tok);
            }
            seen.sort_unstable();
            seen.dedup();
            for tok in seen {
                counts.get_mut(tok).expect("counted above").1 += 1;
            }
        }
        let entries = counts
            .into_iter()
            .filter(|(_, (freq, _))| *freq >= min_frequency)
            .map(|(token, (frequency, document_frequency))| VocabularyEntry {
                token: token.to_string(),
                frequency,
                document_frequency,
            })
            .collect();
        Self::from_entries(mode, min_frequency, docs.len() as u64, entries)
    }

    pub fn mode(&self) -> NormalizationMode {
        self.mode
    }

    pub fn min_frequency(&self) -> u64 {
        self.min_frequency
    }

    /// Documents seen when the vocabulary was built (the IDF base).
    pub fn n_documents(&self) -> u64 {
        self.n_documents
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.entries[id as usize].token
    }

    pub fn entries(&self) -> &[VocabularyEntry] {
        &self.entries
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.token.as_str())
    }

    pub fn frequencies(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frequency).collect()
    }

    pub fn document_frequencies(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.document_frequency).collect()
    }

    /// SHA-256 over everything that influences featurization.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}\0{}\0{}\0", self.mode, self.min_frequency, self.n_documents));
        for e in &self.entries {
            h.update(e.token.as_bytes());
            h.update([0u8]);
            h.update(e.frequency.to_le_bytes());
            h.update(e.document_frequency.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Tokens of a record's notes, concatenated in order.
pub fn record_tokens(
    record: &PatientRecord,
    mode: NormalizationMode,
    normalizer: &Normalizer,
) -> Vec<String> {
    record
        .notes
        .iter()
        .flat_map(|n| normalizer.tokenize(n, mode))
        .collect()
}

pub fn build_vocabulary(
    corpus: &[PatientRecord],
    mode: NormalizationMode,
    min_frequency: u64,
    normalizer: &Normalizer,
) -> Result<Vocabulary> {
    use rayon::prelude::*;
    let docs: Vec<Vec<String>> = corpus
        .par_iter()
        .map(|r| record_tokens(r, mode, normalizer))
        .collect();
    Vocabulary::from_documents(&docs, mode, min_frequency)
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    kind: String,
    mode: NormalizationMode,
    min_frequency: u64,
    n_documents: u64,
    hash: String,
    entries: Vec<VocabularyEntry>,
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            kind: "vocabulary".into(),
            hash: v.hash(),
            mode: v.mode,
            min_frequency: v.min_frequency,
            n_documents: v.n_documents,
            entries: v.entries,
        }
    }
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabularyFile) -> Result<Self> {
        if f.kind != "vocabulary" {
            return Err(Error::Data(format!("expected a vocabulary file, found {:?}", f.kind)));
        }
        let v = Vocabulary::from_entries(f.mode, f.min_frequency, f.n_documents, f.entries)?;
        if v.hash() != f.hash {
            return Err(Error::Data("vocabulary file hash does not match its contents".into()));
        }
        Ok(v)
    }
}

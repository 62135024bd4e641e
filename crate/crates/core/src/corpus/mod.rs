//! Note ingestion, normalization, vocabularies and TF-IDF features.

mod io;
mod synth;
mod tfidf;
mod tokenize;
mod vocab;

pub use io::{check_unique_ids, read_jsonl, write_jsonl, PatientRecord};
pub use synth::{generate_synthetic_corpus, MarkerRule, SyntheticCorpusSpec};
pub use tfidf::{featurize_tfidf, featurize_tokens, FeatureMatrix, SparseRow};
pub use tokenize::{
    tokenize_and_normalize, NormalizationMode, Normalizer, Placeholder, ReplacementRule,
};
pub use vocab::{build_vocabulary, record_tokens, Vocabulary, VocabularyEntry};

use rand::distr::weighted::WeightedIndex;
use serde::{Deserialize, Serialize};

use super::io::PatientRecord;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Binary task whose positive patients are exactly those mentioning at
/// least one marker token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerRule {
    pub task: String,
    pub markers: Vec<String>,
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub n_patients: usize,
    pub n_topics: usize,
    /// One entry per topic, or a single entry shared by all topics.
    pub topic_vocab_sizes: Vec<usize>,
    pub background_vocab_size: usize,
    pub zipf_exponent: f64,
    pub notes_per_patient: usize,
    pub tokens_per_note: usize,
    /// Probability that a token is drawn from the patient's topic words.
    pub topic_token_rate: f64,
    /// Probability that a token is a number/time/measurement mention.
    pub numeric_mention_rate: f64,
    pub marker_rules: Vec<MarkerRule>,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_patients: 200,
            n_topics: 2,
            topic_vocab_sizes: vec![40],
            background_vocab_size: 400,
            zipf_exponent: 1.0,
            notes_per_patient: 2,
            tokens_per_note: 60,
            topic_token_rate: 0.3,
            numeric_mention_rate: 0.03,
            marker_rules: vec![MarkerRule {
                task: "y1".into(),
                markers: vec!["expired".into(), "autopsy".into(), "unresponsive".into()],
                prevalence: 0.3,
            }],
            id_prefix: "p".into(),
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    fn topic_vocab_size(&self, topic: usize) -> usize {
        if self.topic_vocab_sizes.len() == 1 {
            self.topic_vocab_sizes[0]
        } else {
            self.topic_vocab_sizes[topic]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_patients < 1 {
            return bad("n_patients must be at least 1".into());
        }
        if self.n_topics < 1 {
            return bad("n_topics must be at least 1".into());
        }
        if self.topic_vocab_sizes.len() != 1 && self.topic_vocab_sizes.len() != self.n_topics {
            return bad(format!(
                "topic_vocab_sizes has {} entries for {} topics",
                self.topic_vocab_sizes.len(),
                self.n_topics
            ));
        }
        if self.topic_vocab_sizes.contains(&0) || self.background_vocab_size == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad(format!("zipf exponent {} invalid", self.zipf_exponent));
        }
        let rates = [self.topic_token_rate, self.numeric_mention_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) || rates.iter().sum::<f64>() > 1.0 {
            return bad("token rates must lie in [0,1] and sum to at most 1".into());
        }
        if self.notes_per_patient < 1 {
            return bad("notes_per_patient must be at least 1".into());
        }
        for rule in &self.marker_rules {
            if rule.markers.is_empty() || !(0.0..=1.0).contains(&rule.prevalence) {
                return bad(format!("marker rule {:?} is malformed", rule.task));
            }
            for m in &rule.markers {
                if !is_plain_marker(m) {
                    return bad(format!(
                        "marker {m:?} must be a lowercase alphabetic word"
                    ));
                }
            }
        }
        Ok(())
    }
}

// generated words are `w<digits>` / `t<digits>_<digits>`, so letters-only
// markers can never collide with them
fn is_plain_marker(m: &str) -> bool {
    !m.is_empty() && m.chars().all(|c| c.is_ascii_lowercase())
}

/// Rank sampler with `P(rank r) ∝ r^(−s)`, ranks starting at 1.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    index: WeightedIndex<f64>,
}

impl ZipfSampler {
    pub fn new(n: usize, exponent: f64) -> Result<Self> {
        let weights = (1..=n).map(|r| (r as f64).powf(-exponent));
        let index = WeightedIndex::new(weights)
            .map_err(|e| Error::Config(format!("zipf sampler: {e}")))?;
        Ok(Self { index })
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        rng.sample(&self.index) + 1
    }
}

fn numeric_mention(rng: &mut Rng) -> String {
    match rng.below(4) {
        0 => format!("{}mg", 1 + rng.below(500)),
        1 => format!("{}:{:02}", rng.below(24), rng.below(60)),
        2 => format!("{}/{}", 90 + rng.below(80), 50 + rng.below(50)),
        _ => format!("{}", rng.below(1000)),
    }
}

/// Deterministic synthetic corpus: each patient gets a topic, Zipfian
/// background words, topic words, numeric mentions and, for positive
/// patients of each marker rule, one or more marker tokens.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let zipf = ZipfSampler::new(spec.background_vocab_size, spec.zipf_exponent)?;
    let master = Rng::new(spec.seed);
    let mut out = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let mut rng = master.split(i as u64);
        let topic = rng.below(spec.n_topics);
        let topic_size = spec.topic_vocab_size(topic);
        let mut notes: Vec<Vec<String>> = (0..spec.notes_per_patient)
            .map(|_| {
                (0..spec.tokens_per_note)
                    .map(|_| {
                        let u = rng.uniform();
                        let mut tok = if u < spec.numeric_mention_rate {
                            numeric_mention(&mut rng)
                        } else if u < spec.numeric_mention_rate + spec.topic_token_rate {
                            format!("t{topic}_{}", rng.below(topic_size))
                        } else {
                            format!("w{}", zipf.sample(&mut rng))
                        };
                        if rng.bernoulli(0.07) {
                            tok.push('.');
                        }
                        tok
                    })
                    .collect()
            })
            .collect();

        let mut record = PatientRecord::new(format!("{}{}_{i}", spec.id_prefix, spec.seed), vec![])
            .with_label("topic", topic);
        for rule in &spec.marker_rules {
            let positive = rng.bernoulli(rule.prevalence);
            if positive {
                let mut markers = rule.markers.clone();
                rng.shuffle(&mut markers);
                let count = 1 + rng.below(markers.len());
                for m in markers.into_iter().take(count) {
                    let which = rng.below(notes.len());
                    let note = &mut notes[which];
                    let pos = rng.below(note.len() + 1);
                    note.insert(pos, m);
                }
            }
            record.labels.insert(rule.task.clone(), positive as usize);
        }
        record.notes = notes.into_iter().map(|n| n.join(" ")).collect();
        out.push(record);
    }
    Ok(out)
}

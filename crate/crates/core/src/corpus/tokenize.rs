use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// Numbers, times and measurements become placeholder tokens;
    /// punctuation is dropped.
    Sdae,
    /// Numbers, times and measurements are deleted; punctuation is kept.
    Doc2vec,
}

impl std::str::FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sdae" => Ok(Self::Sdae),
            "doc2vec" => Ok(Self::Doc2vec),
            other => Err(Error::Config(format!("unknown normalization mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placeholder {
    #[serde(rename = "<num>")]
    Num,
    #[serde(rename = "<time>")]
    Time,
    #[serde(rename = "<meas>")]
    Meas,
}

impl Placeholder {
    pub fn token(self) -> &'static str {
        match self {
            Placeholder::Num => "<num>",
            Placeholder::Time => "<time>",
            Placeholder::Meas => "<meas>",
        }
    }

    fn parse(token: &str) -> Option<Self> {
        match token {
            "<num>" => Some(Placeholder::Num),
            "<time>" => Some(Placeholder::Time),
            "<meas>" => Some(Placeholder::Meas),
            _ => None,
        }
    }
}

/// One line of the replacement rules file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementRule {
    pub pattern: String,
    pub replace: Placeholder,
}

const DEFAULT_RULES: &str = include_str!("../../rules/default_rules.json");

/// Tokenizer plus an ordered replacement rule table. Each rule's pattern
/// must match a whole token; the first matching rule wins.
#[derive(Debug, Clone)]
pub struct Normalizer {
    rules: Vec<ReplacementRule>,
    compiled: Vec<Regex>,
}

impl Normalizer {
    pub fn new(rules: Vec<ReplacementRule>) -> Result<Self> {
        let compiled = rules
            .iter()
            .map(|r| Regex::new(&format!("^(?:{})$", r.pattern)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { rules, compiled })
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Self::new(serde_json::from_str(json)?)
    }

    pub fn rules(&self) -> &[ReplacementRule] {
        &self.rules
    }

    fn classify(&self, token: &str) -> Option<Placeholder> {
        self.compiled
            .iter()
            .zip(&self.rules)
            .find(|(re, _)| re.is_match(token))
            .map(|(_, r)| r.replace)
    }

    pub fn tokenize(&self, text: &str, mode: NormalizationMode) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            let chunk = chunk.to_lowercase();
            if mode == NormalizationMode::Sdae && Placeholder::parse(&chunk).is_some() {
                out.push(chunk);
                continue;
            }
            let chars: Vec<char> = chunk.chars().collect();
            let lead = chars.iter().take_while(|c| is_punct(**c)).count();
            if lead == chars.len() {
                if mode == NormalizationMode::Doc2vec {
                    out.extend(chars.iter().map(|c| c.to_string()));
                }
                continue;
            }
            let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
            let core: String = chars[lead..chars.len() - trail].iter().collect();
            let keep_punct = mode == NormalizationMode::Doc2vec;
            if keep_punct {
                out.extend(chars[..lead].iter().map(|c| c.to_string()));
            }
            match (self.classify(&core), mode) {
                (Some(p), NormalizationMode::Sdae) => out.push(p.token().to_string()),
                (Some(_), NormalizationMode::Doc2vec) => {}
                (None, _) => out.push(core),
            }
            if keep_punct {
                out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
            }
        }
        out
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::from_json(DEFAULT_RULES).expect("bundled rule table is valid")
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Tokenizes with the bundled rule table.
pub fn tokenize_and_normalize(text: &str, mode: NormalizationMode) -> Vec<String> {
    static DEFAULT: OnceLock<Normalizer> = OnceLock::new();
    DEFAULT.get_or_init(Normalizer::default).tokenize(text, mode)
}

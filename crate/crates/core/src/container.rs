//! Versioned binary model files.
//!
//! Layout: `b"CLRP"`, format version (u32 LE), metadata length (u64 LE),
//! UTF-8 JSON metadata, then the arrays listed in the metadata as
//! contiguous little-endian f64 values.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::{MlpConfig, MlpModel, SelectionCriterion, TaskSpec};
use crate::corpus::Vocabulary;
use crate::doc2vec::{build_noise_distribution, DocEmbeddingModel, Doc2vecConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, Matrix};
use crate::sdae::{DaeLayer, SdaeConfig, SdaeModel};

pub const MAGIC: [u8; 4] = *b"CLRP";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[FORMAT_VERSION];
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    fn len(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetadata {
    pub kind: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_hash: Option<String>,
    pub config: Value,
    /// Kind-specific fields that are not arrays.
    pub extra: Value,
    pub arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub metadata: ContainerMetadata,
    pub arrays: Vec<Vec<f64>>,
}

impl ModelContainer {
    pub fn new(metadata: ContainerMetadata, arrays: Vec<Vec<f64>>) -> Result<Self> {
        if metadata.arrays.len() != arrays.len() {
            return Err(Error::Length(format!(
                "{} arrays declared, {} given",
                metadata.arrays.len(),
                arrays.len()
            )));
        }
        for (spec, a) in metadata.arrays.iter().zip(&arrays) {
            if spec.len() != Some(a.len()) {
                return Err(Error::Length(format!(
                    "array {} has {} values, shape {:?}",
                    spec.name,
                    a.len(),
                    spec.shape
                )));
            }
        }
        Ok(Self { metadata, arrays })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let payload: usize = self.arrays.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload * 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for a in &self.arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Validates magic, version and every length before allocating arrays.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length(format!("header truncated at {} bytes", bytes.len())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if !SUPPORTED_VERSIONS.contains(&version) {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: SUPPORTED_VERSIONS.to_vec(),
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[HEADER_LEN..];
        let meta_len = usize::try_from(meta_len)
            .ok()
            .filter(|&m| m <= rest.len())
            .ok_or_else(|| {
                Error::Length(format!("metadata length {meta_len} exceeds the {} bytes left", rest.len()))
            })?;
        let metadata: ContainerMetadata = serde_json::from_slice(&rest[..meta_len])?;
        let payload = &rest[meta_len..];
        let mut expected = 0usize;
        for spec in &metadata.arrays {
            expected = spec
                .len()
                .and_then(|n| n.checked_mul(8))
                .and_then(|n| n.checked_add(expected))
                .ok_or_else(|| Error::Length(format!("array {} shape overflows", spec.name)))?;
        }
        if expected != payload.len() {
            return Err(Error::Length(format!(
                "payload is {} bytes, metadata declares {expected}",
                payload.len()
            )));
        }
        let mut arrays = Vec::with_capacity(metadata.arrays.len());
        let mut chunks = payload.chunks_exact(8);
        for spec in &metadata.arrays {
            let n = spec.len().expect("checked above");
            arrays.push(
                chunks
                    .by_ref()
                    .take(n)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
        }
        Ok(Self { metadata, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.metadata.kind != kind {
            return Err(Error::Data(format!(
                "expected a {kind} model, found {}",
                self.metadata.kind
            )));
        }
        Ok(())
    }

    fn array(&self, i: usize) -> Result<&ArraySpec> {
        self.metadata
            .arrays
            .get(i)
            .ok_or_else(|| Error::Length(format!("missing array {i}")))
    }

    fn matrix(&self, i: usize) -> Result<Matrix> {
        let spec = self.array(i)?;
        match spec.shape[..] {
            [r, c] => Matrix::from_vec(r, c, self.arrays[i].clone()),
            _ => Err(Error::Data(format!("array {} is not a matrix", spec.name))),
        }
    }

    fn vector(&self, i: usize) -> Result<Vec<f64>> {
        self.array(i)?;
        Ok(self.arrays[i].clone())
    }
}

/// Conversion to and from the container format.
pub trait Persist: Sized {
    const KIND: &'static str;
    fn to_container(&self) -> Result<ModelContainer>;
    fn from_container(container: &ModelContainer) -> Result<Self>;
}

pub fn save_model<M: Persist>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    model.to_container()?.save(path)
}

pub fn load_model<M: Persist>(path: impl AsRef<Path>) -> Result<M> {
    M::from_container(&ModelContainer::load(path)?)
}

/// Reads only the metadata kind, e.g. to dispatch on model type.
pub fn container_kind(path: impl AsRef<Path>) -> Result<String> {
    Ok(ModelContainer::load(path)?.metadata.kind)
}

fn json<T: Serialize>(v: &T) -> Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn from_json<T: DeserializeOwned>(v: &Value) -> Result<T> {
    Ok(serde_json::from_value(v.clone())?)
}

fn push_layer(name: &str, layer: &DenseLayer, specs: &mut Vec<ArraySpec>, arrays: &mut Vec<Vec<f64>>) {
    specs.push(ArraySpec {
        name: format!("{name}.weights"),
        shape: vec![layer.output_dim(), layer.input_dim()],
    });
    arrays.push(layer.weights.as_slice().to_vec());
    specs.push(ArraySpec {
        name: format!("{name}.bias"),
        shape: vec![layer.output_dim()],
    });
    arrays.push(layer.bias.clone());
}

fn read_layer(c: &ModelContainer, at: usize, activation: Activation) -> Result<DenseLayer> {
    DenseLayer::new(c.matrix(at)?, c.vector(at + 1)?, activation)
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Serialize, Deserialize)]
struct SdaeExtra {
    input_dim: usize,
    noise: Vec<f64>,
    loss_trace: Vec<Vec<f64>>,
}

impl Persist for SdaeModel {
    const KIND: &'static str = "sdae";

    fn to_container(&self) -> Result<ModelContainer> {
        let mut specs = Vec::new();
        let mut arrays = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            push_layer(&format!("layer{k}.encoder"), &l.encoder, &mut specs, &mut arrays);
            push_layer(&format!("layer{k}.decoder"), &l.decoder, &mut specs, &mut arrays);
        }
        let extra = SdaeExtra {
            input_dim: self.input_dim,
            noise: self.layers.iter().map(|l| l.noise).collect(),
            loss_trace: self.loss_trace.clone(),
        };
        ModelContainer::new(
            ContainerMetadata {
                kind: Self::KIND.into(),
                seed: self.config.seed,
                vocab_hash: None,
                config: json(&self.config)?,
                extra: json(&extra)?,
                arrays: specs,
            },
            arrays,
        )
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let config: SdaeConfig = from_json(&c.metadata.config)?;
        let extra: SdaeExtra = from_json(&c.metadata.extra)?;
        if c.arrays.len() != 4 * extra.noise.len() {
            return Err(Error::Length("sdae array count does not match layer count".into()));
        }
        let layers = extra
            .noise
            .iter()
            .enumerate()
            .map(|(k, &noise)| {
                DaeLayer::new(
                    read_layer(c, 4 * k, Activation::Sigmoid)?,
                    read_layer(c, 4 * k + 2, Activation::Linear)?,
                    noise,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut expected = extra.input_dim;
        for l in &layers {
            if l.input_dim() != expected {
                return Err(Error::Data("sdae layer shapes do not chain".into()));
            }
            expected = l.hidden_dim();
        }
        Ok(Self {
            input_dim: extra.input_dim,
            layers,
            config,
            loss_trace: extra.loss_trace,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MlpExtra {
    input_dim: usize,
    task: TaskSpec,
    activations: Vec<Activation>,
    loss_trace: Vec<f64>,
    validation_trace: Vec<Option<f64>>,
    selection: SelectionCriterion,
    best_epoch: usize,
    best_validation: Option<f64>,
}

impl Persist for MlpModel {
    const KIND: &'static str = "mlp";

    fn to_container(&self) -> Result<ModelContainer> {
        let mut specs = Vec::new();
        let mut arrays = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            push_layer(&format!("layer{k}"), l, &mut specs, &mut arrays);
        }
        let extra = MlpExtra {
            input_dim: self.input_dim,
            task: self.task.clone(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
            loss_trace: self.loss_trace.clone(),
            validation_trace: self.validation_trace.iter().map(|&v| finite_or_none(v)).collect(),
            selection: self.selection,
            best_epoch: self.best_epoch,
            best_validation: finite_or_none(self.best_validation),
        };
        ModelContainer::new(
            ContainerMetadata {
                kind: Self::KIND.into(),
                seed: self.config.seed,
                vocab_hash: None,
                config: json(&self.config)?,
                extra: json(&extra)?,
                arrays: specs,
            },
            arrays,
        )
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let config: MlpConfig = from_json(&c.metadata.config)?;
        let extra: MlpExtra = from_json(&c.metadata.extra)?;
        if c.arrays.len() != 2 * extra.activations.len() {
            return Err(Error::Length("mlp array count does not match layer count".into()));
        }
        let layers = extra
            .activations
            .iter()
            .enumerate()
            .map(|(k, &a)| read_layer(c, 2 * k, a))
            .collect::<Result<Vec<_>>>()?;
        let mut expected = extra.input_dim;
        for l in &layers {
            if l.input_dim() != expected {
                return Err(Error::Data("mlp layer shapes do not chain".into()));
            }
            expected = l.output_dim();
        }
        if expected != extra.task.n_classes {
            return Err(Error::Data("mlp output does not match class count".into()));
        }
        Ok(Self {
            input_dim: extra.input_dim,
            layers,
            task: extra.task,
            config,
            loss_trace: extra.loss_trace,
            validation_trace: extra
                .validation_trace
                .iter()
                .map(|v| v.unwrap_or(f64::NAN))
                .collect(),
            selection: extra.selection,
            best_epoch: extra.best_epoch,
            best_validation: extra.best_validation.unwrap_or(f64::NEG_INFINITY),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DocExtra {
    patient_ids: Vec<String>,
    vocab: Vocabulary,
    updates_per_epoch: u64,
    last_learning_rate: f64,
    warnings: Vec<String>,
}

impl Persist for DocEmbeddingModel {
    const KIND: &'static str = "doc2vec";

    fn to_container(&self) -> Result<ModelContainer> {
        let specs = vec![
            ArraySpec {
                name: "doc_vectors".into(),
                shape: vec![self.doc_vectors.rows(), self.doc_vectors.cols()],
            },
            ArraySpec {
                name: "word_vectors".into(),
                shape: vec![self.word_vectors.rows(), self.word_vectors.cols()],
            },
        ];
        let arrays = vec![
            self.doc_vectors.as_slice().to_vec(),
            self.word_vectors.as_slice().to_vec(),
        ];
        let extra = DocExtra {
            patient_ids: self.patient_ids.clone(),
            vocab: self.vocab.clone(),
            updates_per_epoch: self.updates_per_epoch,
            last_learning_rate: self.last_learning_rate,
            warnings: self.warnings.clone(),
        };
        ModelContainer::new(
            ContainerMetadata {
                kind: Self::KIND.into(),
                seed: self.config.seed,
                vocab_hash: Some(self.vocab.hash()),
                config: json(&self.config)?,
                extra: json(&extra)?,
                arrays: specs,
            },
            arrays,
        )
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        c.expect_kind(Self::KIND)?;
        let config: Doc2vecConfig = from_json(&c.metadata.config)?;
        let extra: DocExtra = from_json(&c.metadata.extra)?;
        let doc_vectors = c.matrix(0)?;
        let word_vectors = c.matrix(1)?;
        if doc_vectors.rows() != extra.patient_ids.len()
            || word_vectors.rows() != extra.vocab.len()
            || doc_vectors.cols() != word_vectors.cols()
        {
            return Err(Error::Data("doc2vec arrays do not match metadata".into()));
        }
        let noise = build_noise_distribution(&extra.vocab)?;
        Ok(Self {
            doc_vectors,
            word_vectors,
            noise,
            vocab: extra.vocab,
            patient_ids: extra.patient_ids,
            config,
            updates_per_epoch: extra.updates_per_epoch,
            last_learning_rate: extra.last_learning_rate,
            warnings: extra.warnings,
        })
    }
}

//! Adapter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SLRA"  version:u8  header_len:u32  header:JSON  payload:f64*  checksum:u64
//! ```
//!
//! The payload holds every tensor named in the header, in header order,
//! row-major. The checksum is FNV-1a 64 over the payload bytes. A checkpoint
//! carries the fingerprint of the frozen base it was trained on and refuses to
//! load onto any other.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedLinear, Adapter, AdapterKind, LoraAdapter, SymLoraAdapter, LORA_A, LORA_B, SYM_LAMBDA, SYM_Q, SYM_SPECTRUM};
use crate::error::{Error, Result};
use crate::model::{AdaptedModel, HEAD_BIAS, HEAD_WEIGHT};
use crate::numerics::{fnv1a64, Fnv1a, Matrix, ParamId, RNG_ALGORITHM};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"SLRA";
pub const FORMAT_VERSION: u8 = 1;
const PREFIX_LEN: usize = 4 + 1 + 4;

/// Feeds a tensor's canonical serialization to `h`: the name, a zero byte,
/// rows and cols as u64, then the entries as binary64.
pub fn hash_tensor<T: Scalar>(h: &mut Fnv1a, name: &str, m: &Matrix<T>) {
    h.write(name.as_bytes());
    h.write(&[0]);
    h.write(&(m.rows() as u64).to_le_bytes());
    h.write(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.write(&v.as_f64().to_le_bytes());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Lora,
    Symlora,
    /// Dense merged weights, no adapters.
    Merged,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::Symlora => "symlora",
            Self::Merged => "merged",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub seed: u64,
    pub task_id: String,
    pub steps: usize,
    /// Free-form settings needed to rebuild the run (model config, task
    /// parameters, hyperparameters).
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterRecord {
    pub layer_name: String,
    pub layer_index: usize,
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub alpha: f64,
    pub init_std: f64,
    /// `lora_b, lora_a` or `sym_q, sym_spectrum, sym_lambda`.
    pub tensors: Vec<NamedTensor>,
}

/// Everything one task's fine-tuning produced on top of a frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterCheckpoint {
    pub kind: CheckpointKind,
    pub base_fingerprint: u64,
    pub rng_algorithm: String,
    pub metadata: CheckpointMetadata,
    pub tie_lambda: bool,
    pub adapters: Vec<AdapterRecord>,
    /// Trainable dense tensors outside the adapters (the classifier head),
    /// or the merged weights for [`CheckpointKind::Merged`].
    pub dense: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    layer_name: String,
    layer_index: usize,
    n: usize,
    m: usize,
    r: usize,
    alpha: f64,
    init_std: f64,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    rng_algorithm: String,
    base_fingerprint: String,
    metadata: CheckpointMetadata,
    tie_lambda: bool,
    adapters: Vec<AdapterHeader>,
    dense: Vec<TensorHeader>,
}

fn tensor_header(t: &NamedTensor) -> TensorHeader {
    TensorHeader {
        name: t.name.clone(),
        rows: t.value.rows(),
        cols: t.value.cols(),
    }
}

fn corrupt(section: &'static str, detail: impl Into<String>) -> Error {
    Error::CorruptFile {
        section,
        detail: detail.into(),
    }
}

/// A model that adapters can be saved from and loaded onto.
pub trait AdapterHost<T: Scalar> {
    fn base_fingerprint(&self) -> u64;
    fn adapted_layers(&self) -> Vec<&AdaptedLinear<T>>;
    fn layer_by_name_mut(&mut self, name: &str) -> Option<&mut AdaptedLinear<T>>;
    fn clear_adapters(&mut self);
    fn dense_tensors(&self) -> Vec<(String, Matrix<T>)> {
        Vec::new()
    }
    fn set_dense_tensor(&mut self, name: &str, _value: Matrix<T>) -> Result<()> {
        Err(Error::MissingParameter(name.to_string()))
    }
    fn tie_lambda(&self) -> bool {
        false
    }
    fn set_tie_lambda(&mut self, _tie: bool) {}
}

impl<T: Scalar> AdapterHost<T> for AdaptedLinear<T> {
    fn base_fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        hash_tensor(&mut h, self.name(), self.base().weight());
        h.finish()
    }

    fn adapted_layers(&self) -> Vec<&AdaptedLinear<T>> {
        vec![self]
    }

    fn layer_by_name_mut(&mut self, name: &str) -> Option<&mut AdaptedLinear<T>> {
        (self.name() == name).then_some(self)
    }

    fn clear_adapters(&mut self) {
        self.detach();
    }
}

impl<T: Scalar> AdapterHost<T> for AdaptedModel<T> {
    fn base_fingerprint(&self) -> u64 {
        AdaptedModel::base_fingerprint(self)
    }

    fn adapted_layers(&self) -> Vec<&AdaptedLinear<T>> {
        self.layers().collect()
    }

    fn layer_by_name_mut(&mut self, name: &str) -> Option<&mut AdaptedLinear<T>> {
        self.layer_mut(name)
    }

    fn clear_adapters(&mut self) {
        self.remove_adapters();
    }

    fn dense_tensors(&self) -> Vec<(String, Matrix<T>)> {
        vec![
            (HEAD_WEIGHT.to_string(), self.head_weight.clone()),
            (HEAD_BIAS.to_string(), self.head_bias.clone()),
        ]
    }

    fn set_dense_tensor(&mut self, name: &str, value: Matrix<T>) -> Result<()> {
        match name {
            HEAD_WEIGHT | HEAD_BIAS => self.set_named_tensor(&ParamId::from(name), value),
            other => Err(Error::MissingParameter(other.to_string())),
        }
    }

    fn tie_lambda(&self) -> bool {
        AdaptedModel::tie_lambda(self)
    }

    fn set_tie_lambda(&mut self, tie: bool) {
        AdaptedModel::set_tie_lambda(self, tie)
    }
}

fn to_f64<T: Scalar>(name: &str, m: &Matrix<T>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        value: m.cast(),
    }
}

impl AdapterCheckpoint {
    /// Snapshot of every adapter (and dense extras) on `host`.
    pub fn capture<T: Scalar>(host: &impl AdapterHost<T>, metadata: CheckpointMetadata) -> Result<Self> {
        let mut kind = None;
        let mut adapters = Vec::new();
        for layer in host.adapted_layers() {
            let Some(adapter) = layer.adapter() else { continue };
            let this = match adapter.kind() {
                AdapterKind::Lora => CheckpointKind::Lora,
                _ => CheckpointKind::Symlora,
            };
            if kind.is_some_and(|k| k != this) {
                return Err(Error::InvalidConfig("a checkpoint holds adapters of one kind".into()));
            }
            kind = Some(this);
            let w = layer.base().weight();
            adapters.push(AdapterRecord {
                layer_name: layer.name().to_string(),
                layer_index: layer.base().layer_index(),
                n: w.rows(),
                m: w.cols(),
                r: adapter.rank(),
                alpha: adapter.alpha().as_f64(),
                init_std: adapter.init_std().as_f64(),
                tensors: adapter.tensors().into_iter().map(|(s, m)| to_f64(s, m)).collect(),
            });
        }
        let kind = kind.ok_or(Error::NoAdapters)?;
        Ok(Self {
            kind,
            base_fingerprint: host.base_fingerprint(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            metadata,
            tie_lambda: host.tie_lambda(),
            adapters,
            dense: host.dense_tensors().iter().map(|(n, m)| to_f64(n, m)).collect(),
        })
    }

    /// Dense merged weights of every adapted layer, followed by the host's
    /// dense extras.
    pub fn merged<T: Scalar>(host: &impl AdapterHost<T>, metadata: CheckpointMetadata) -> Result<Self> {
        let mut dense = Vec::new();
        for layer in host.adapted_layers() {
            if layer.adapter().is_some() {
                dense.push(to_f64(layer.name(), &layer.merge()?));
            }
        }
        if dense.is_empty() {
            return Err(Error::NoAdapters);
        }
        dense.extend(host.dense_tensors().iter().map(|(name, m)| to_f64(name, m)));
        Ok(Self {
            kind: CheckpointKind::Merged,
            base_fingerprint: host.base_fingerprint(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            metadata,
            tie_lambda: false,
            adapters: Vec::new(),
            dense,
        })
    }

    fn all_tensors(&self) -> impl Iterator<Item = &NamedTensor> {
        self.adapters.iter().flat_map(|a| a.tensors.iter()).chain(self.dense.iter())
    }

    /// Number of binary64 entries in the payload.
    pub fn payload_len(&self) -> usize {
        self.all_tensors().map(|t| t.value.len()).sum()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            rng_algorithm: self.rng_algorithm.clone(),
            base_fingerprint: format!("{:016x}", self.base_fingerprint),
            metadata: self.metadata.clone(),
            tie_lambda: self.tie_lambda,
            adapters: self
                .adapters
                .iter()
                .map(|a| AdapterHeader {
                    layer_name: a.layer_name.clone(),
                    layer_index: a.layer_index,
                    n: a.n,
                    m: a.m,
                    r: a.r,
                    alpha: a.alpha,
                    init_std: a.init_std,
                    tensors: a.tensors.iter().map(tensor_header).collect(),
                })
                .collect(),
            dense: self.dense.iter().map(tensor_header).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::InvalidConfig("checkpoint header too large".into()))?;
        let mut payload = Vec::with_capacity(8 * self.payload_len());
        for t in self.all_tensors() {
            for v in t.value.as_slice() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len() + 8);
        out.extend_from_slice(&MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(corrupt("magic", "missing SLRA signature"));
        }
        match bytes.get(4) {
            Some(&FORMAT_VERSION) => {}
            Some(v) => return Err(corrupt("version", format!("unsupported version {v}"))),
            None => return Err(corrupt("version", "file ends before version byte")),
        }
        let len_bytes: [u8; 4] = bytes
            .get(5..PREFIX_LEN)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| corrupt("header", "file ends before header length"))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header", format!("header of {header_len} bytes is truncated")))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| corrupt("header", e.to_string()))?;
        let base_fingerprint =
            u64::from_str_radix(&header.base_fingerprint, 16).map_err(|e| corrupt("header", format!("base fingerprint: {e}")))?;

        let tensor_count = header
            .adapters
            .iter()
            .flat_map(|a| a.tensors.iter())
            .chain(header.dense.iter())
            .try_fold(0usize, |acc, t| t.rows.checked_mul(t.cols).and_then(|n| acc.checked_add(n)))
            .ok_or_else(|| corrupt("header", "tensor sizes overflow"))?;
        let payload_bytes = tensor_count
            .checked_mul(8)
            .ok_or_else(|| corrupt("header", "tensor sizes overflow"))?;
        let expected = header_end + payload_bytes + 8;
        if bytes.len() < header_end + payload_bytes {
            return Err(corrupt(
                "payload",
                format!("expected {payload_bytes} payload bytes, found {}", bytes.len() - header_end),
            ));
        }
        if bytes.len() != expected {
            return Err(corrupt(
                "checksum",
                format!("expected {expected} bytes in total, found {}", bytes.len()),
            ));
        }
        let payload = &bytes[header_end..header_end + payload_bytes];
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().expect("8 bytes"));
        let actual = fnv1a64(payload);
        if stored != actual {
            return Err(corrupt(
                "checksum",
                format!("payload checksum {actual:016x} does not match stored {stored:016x}"),
            ));
        }

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |t: &TensorHeader| -> Result<NamedTensor> {
            let data: Vec<f64> = values.by_ref().take(t.rows * t.cols).collect();
            Ok(NamedTensor {
                name: t.name.clone(),
                value: Matrix::from_vec(t.rows, t.cols, data)?,
            })
        };
        let mut adapters = Vec::with_capacity(header.adapters.len());
        for a in &header.adapters {
            adapters.push(AdapterRecord {
                layer_name: a.layer_name.clone(),
                layer_index: a.layer_index,
                n: a.n,
                m: a.m,
                r: a.r,
                alpha: a.alpha,
                init_std: a.init_std,
                tensors: a.tensors.iter().map(&mut take).collect::<Result<_>>()?,
            });
        }
        let dense = header.dense.iter().map(&mut take).collect::<Result<_>>()?;
        Ok(Self {
            kind: header.kind,
            base_fingerprint,
            rng_algorithm: header.rng_algorithm,
            metadata: header.metadata,
            tie_lambda: header.tie_lambda,
            adapters,
            dense,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Replaces `host`'s adapters (and dense extras) with this checkpoint's.
    /// Nothing is modified if the base fingerprint or any layer mismatches.
    pub fn apply<T: Scalar>(&self, host: &mut impl AdapterHost<T>) -> Result<()> {
        if self.kind == CheckpointKind::Merged {
            return Err(Error::InvalidConfig("merged weights cannot be attached as adapters".into()));
        }
        let actual = host.base_fingerprint();
        if actual != self.base_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.base_fingerprint,
                actual,
            });
        }
        let mut built = Vec::with_capacity(self.adapters.len());
        for record in &self.adapters {
            let layer = host
                .layer_by_name_mut(&record.layer_name)
                .ok_or_else(|| Error::UnknownLayer(record.layer_name.clone()))?;
            let shape = layer.base().weight().shape();
            if shape != (record.n, record.m) {
                return Err(Error::ShapeMismatch {
                    op: "load adapter",
                    left_rows: shape.0,
                    left_cols: shape.1,
                    right_rows: record.n,
                    right_cols: record.m,
                });
            }
            built.push((record.layer_name.clone(), self.build_adapter::<T>(record)?));
        }
        host.clear_adapters();
        for (name, adapter) in built {
            host.layer_by_name_mut(&name).expect("checked above").attach(adapter)?;
        }
        for t in &self.dense {
            host.set_dense_tensor(&t.name, t.value.cast())?;
        }
        host.set_tie_lambda(self.tie_lambda);
        Ok(())
    }

    fn build_adapter<T: Scalar>(&self, record: &AdapterRecord) -> Result<Adapter<T>> {
        let get = |name: &str| -> Result<Matrix<T>> {
            record
                .tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.value.cast())
                .ok_or_else(|| Error::MissingParameter(format!("{}.{name}", record.layer_name)))
        };
        let alpha = T::lit(record.alpha);
        let std = T::lit(record.init_std);
        let adapter = match self.kind {
            CheckpointKind::Lora => Adapter::Lora(LoraAdapter::from_factors(get(LORA_B)?, get(LORA_A)?, alpha, std)?),
            CheckpointKind::Symlora => {
                let spectrum = get(SYM_SPECTRUM)?;
                let lambda = get(SYM_LAMBDA)?;
                let lambda = lambda.to_scalar().ok_or_else(|| corrupt("header", "sym_lambda must be 1x1"))?;
                Adapter::SymLora(SymLoraAdapter::from_factors(get(SYM_Q)?, spectrum.as_slice(), lambda, alpha, std)?)
            }
            CheckpointKind::Merged => unreachable!("rejected in apply"),
        };
        if adapter.rank() != record.r {
            return Err(corrupt("header", format!("{}: rank {} does not match tensors", record.layer_name, record.r)));
        }
        Ok(adapter)
    }
}

/// Writes `host`'s adapters to `path`.
pub fn save_adapter<T: Scalar>(
    host: &impl AdapterHost<T>,
    metadata: CheckpointMetadata,
    path: &Path,
) -> Result<AdapterCheckpoint> {
    let ckpt = AdapterCheckpoint::capture(host, metadata)?;
    ckpt.write(path)?;
    Ok(ckpt)
}

/// Reads `path` and attaches its adapters to `host`.
pub fn load_adapter<T: Scalar>(host: &mut impl AdapterHost<T>, path: &Path) -> Result<AdapterCheckpoint> {
    let ckpt = AdapterCheckpoint::read(path)?;
    ckpt.apply(host)?;
    Ok(ckpt)
}

//! Binary parameter files: a JSON header describing the module followed by
//! named little-endian tensors.

use crate::backbone::Backbone;
use crate::csn::CsnModel;
use crate::embed::{Embedder, PrecomputedVectors, Vocab};
use crate::encoder::{CnnEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::matchnet::MatchNet;
use crate::scalar::Scalar;
use crate::slotfill::{SlotFillConfig, SlotFillModel, UNK_VAR};
use crate::tensor::{Matrix, ParamTree};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TMPLCKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum EmbeddingMeta {
    Trainable { vocab: Vocab, dim: usize },
    Precomputed { dim: usize, vectors: String },
}

impl EmbeddingMeta {
    pub fn of<T: Scalar>(embedder: &Embedder<T>) -> Result<Self> {
        match embedder {
            Embedder::Trainable { vocab, table } => Ok(Self::Trainable {
                vocab: (**vocab).clone(),
                dim: table.cols(),
            }),
            Embedder::Precomputed(store) => Ok(Self::Precomputed {
                dim: store.dim(),
                vectors: store
                    .source()
                    .ok_or_else(|| Error::Config("precomputed vectors have no source path to record".into()))?
                    .to_string(),
            }),
        }
    }
}

/// Loads each precomputed vector file at most once so that modules of one
/// engine share the same store.
#[derive(Debug, Default)]
pub struct VectorCache {
    loaded: HashMap<String, Arc<PrecomputedVectors>>,
}

impl VectorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn embedder<T: Scalar>(&mut self, meta: &EmbeddingMeta) -> Result<Embedder<T>> {
        match meta {
            EmbeddingMeta::Trainable { vocab, dim } => Ok(Embedder::Trainable {
                vocab: Arc::new(vocab.clone()),
                table: Matrix::zeros(vocab.len(), *dim),
            }),
            EmbeddingMeta::Precomputed { dim, vectors } => {
                if let Some(store) = self.loaded.get(vectors) {
                    if store.dim() != *dim {
                        return Err(Error::Dimension {
                            expected: *dim,
                            found: store.dim(),
                        });
                    }
                    return Ok(Embedder::Precomputed(store.clone()));
                }
                let store = Arc::new(PrecomputedVectors::load(Path::new(vectors), *dim)?);
                self.loaded.insert(vectors.clone(), store.clone());
                Ok(Embedder::Precomputed(store))
            }
        }
    }

    /// Registers an already loaded store under its source path.
    pub fn insert(&mut self, store: Arc<PrecomputedVectors>) {
        if let Some(src) = store.source() {
            self.loaded.insert(src.to_string(), store);
        }
    }
}

/// A model that can be written to and rebuilt from a parameter file.
pub trait Module<T: Scalar>: ParamTree<T> + Sized {
    const NAME: &'static str;
    type Meta: Serialize + DeserializeOwned;

    fn meta(&self) -> Result<Self::Meta>;
    /// Parameter-free skeleton with every tensor at its final shape.
    fn skeleton(meta: Self::Meta, cache: &mut VectorCache) -> Result<Self>;
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    module: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode<T: Scalar, M: Module<T>>(model: &M) -> Result<Vec<u8>> {
    let tensors = model.tensors();
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        module: M::NAME.to_string(),
        meta: serde_json::to_value(model.meta()?)?,
        tensors: tensors
            .iter()
            .map(|(n, m)| TensorEntry {
                name: format!("{}.{n}", M::NAME),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(head.len() + 12 + model.num_params() * T::WIDTH);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, m) in tensors {
        for &v in m.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn corrupt(origin: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        file: origin.to_string(),
        line: 0,
        message: message.into(),
    }
}

pub fn decode<T: Scalar, M: Module<T>>(bytes: &[u8], origin: &str, cache: &mut VectorCache) -> Result<M> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt(origin, "not a parameter file"));
    }
    let head_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + head_len;
    if bytes.len() < body {
        return Err(corrupt(origin, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body])?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found: header.version,
        });
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Dtype {
            expected: T::DTYPE.to_string(),
            found: header.dtype,
        });
    }
    if header.module != M::NAME {
        return Err(corrupt(
            origin,
            format!("holds module `{}`, expected `{}`", header.module, M::NAME),
        ));
    }
    let mut stored: BTreeMap<String, Matrix<T>> = BTreeMap::new();
    let mut at = body;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let end = at + n * T::WIDTH;
        if bytes.len() < end {
            return Err(corrupt(origin, format!("truncated tensor `{}`", t.name)));
        }
        let data = bytes[at..end].chunks_exact(T::WIDTH).map(T::read_le).collect();
        stored.insert(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data));
        at = end;
    }
    if at != bytes.len() {
        return Err(corrupt(origin, "trailing bytes after tensors"));
    }
    let meta: M::Meta = serde_json::from_value(header.meta)?;
    let mut model = M::skeleton(meta, cache)?;
    let names: Vec<String> = model
        .tensors()
        .into_iter()
        .map(|(n, _)| format!("{}.{n}", M::NAME))
        .collect();
    let missing: Vec<String> = names.iter().filter(|n| !stored.contains_key(*n)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Integrity { missing });
    }
    for (name, slot) in names.iter().zip(model.tensors_mut()) {
        let src = stored.remove(name).expect("checked above");
        if src.shape() != slot.shape() {
            return Err(Error::Dimension {
                expected: slot.len(),
                found: src.len(),
            });
        }
        *slot = src;
    }
    Ok(model)
}

pub fn save<T: Scalar, M: Module<T>>(model: &M, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar, M: Module<T>>(path: &Path, cache: &mut VectorCache) -> Result<M> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string(), cache)
}

/// Scalar type recorded in a parameter file's header.
pub fn peek_dtype(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt(&origin, "not a parameter file"));
    }
    let head_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let head = bytes.get(12..12 + head_len).ok_or_else(|| corrupt(&origin, "truncated header"))?;
    let header: Header = serde_json::from_slice(head)?;
    Ok(header.dtype)
}

pub fn sha256_hex(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update(c);
    }
    hex::encode(h.finalize())
}

fn skeleton_backbone<T: Scalar>(embedding: &EmbeddingMeta, encoder: EncoderConfig, cache: &mut VectorCache) -> Result<Backbone<T>> {
    let embedder = cache.embedder(embedding)?;
    if encoder.input_dim != embedder.dim() {
        return Err(Error::Dimension {
            expected: embedder.dim(),
            found: encoder.input_dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = CnnEncoder::new(encoder, &mut rng)?;
    Ok(Backbone { embedder, encoder })
}

#[derive(Serialize, Deserialize)]
pub struct CsnMeta {
    pub embedding: EmbeddingMeta,
    pub encoder: EncoderConfig,
    pub labels: Vec<String>,
}

impl<T: Scalar> Module<T> for CsnModel<T> {
    const NAME: &'static str = "csn";
    type Meta = CsnMeta;

    fn meta(&self) -> Result<CsnMeta> {
        Ok(CsnMeta {
            embedding: EmbeddingMeta::of(&self.backbone.embedder)?,
            encoder: self.backbone.encoder.config.clone(),
            labels: self.labels.clone(),
        })
    }

    fn skeleton(meta: CsnMeta, cache: &mut VectorCache) -> Result<Self> {
        let backbone = skeleton_backbone(&meta.embedding, meta.encoder, cache)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(CsnModel::new(backbone, meta.labels, &mut rng))
    }
}

#[derive(Serialize, Deserialize)]
pub struct MatchNetMeta {
    pub embedding: EmbeddingMeta,
    pub encoder: EncoderConfig,
}

impl<T: Scalar> Module<T> for MatchNet<T> {
    const NAME: &'static str = "matchnet";
    type Meta = MatchNetMeta;

    fn meta(&self) -> Result<MatchNetMeta> {
        Ok(MatchNetMeta {
            embedding: EmbeddingMeta::of(&self.backbone.embedder)?,
            encoder: self.backbone.encoder.config.clone(),
        })
    }

    fn skeleton(meta: MatchNetMeta, cache: &mut VectorCache) -> Result<Self> {
        Ok(MatchNet {
            backbone: skeleton_backbone(&meta.embedding, meta.encoder, cache)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
pub struct SlotFillMeta {
    pub embedding: EmbeddingMeta,
    pub config: SlotFillConfig,
    pub variables: Vec<String>,
}

impl<T: Scalar> Module<T> for SlotFillModel<T> {
    const NAME: &'static str = "slotfill";
    type Meta = SlotFillMeta;

    fn meta(&self) -> Result<SlotFillMeta> {
        Ok(SlotFillMeta {
            embedding: EmbeddingMeta::of(&self.embedder)?,
            config: self.config.clone(),
            variables: self.var_names.to_vec(),
        })
    }

    fn skeleton(meta: SlotFillMeta, cache: &mut VectorCache) -> Result<Self> {
        if meta.variables.first().map(String::as_str) != Some(UNK_VAR) {
            return Err(Error::Validation(format!("slotfill variable table must start with {UNK_VAR}")));
        }
        let embedder = cache.embedder(&meta.embedding)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SlotFillModel::new(embedder, meta.variables.iter().cloned(), meta.config, &mut rng)?;
        if *model.var_names != meta.variables {
            return Err(Error::Validation("slotfill variable table is not canonical".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, Example, SqlTemplate};

    fn corpus() -> Corpus {
        let t = SqlTemplate::new("a", "SELECT x FROM t WHERE y = ${y0}", vec!["y0".into()]).unwrap();
        let u = SqlTemplate::new("b", "SELECT z FROM t", vec![]).unwrap();
        Corpus::new(
            "c",
            [t, u],
            vec![
                Example::new(&["show", "x", "for", "boston"], "a", &[("y0", 3)]),
                Example::new(&["list", "z"], "b", &[]),
            ],
        )
        .unwrap()
    }

    fn csn() -> CsnModel<f32> {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let embedder = Embedder::trainable(Arc::new(Vocab::build(&c)), 5, &mut rng);
        let encoder = CnnEncoder::new(EncoderConfig::new(vec![1, 2], 3, 5), &mut rng).unwrap();
        CsnModel::new(Backbone { embedder, encoder }, vec!["a".into(), "b".into()], &mut rng)
    }

    #[test]
    fn csn_round_trip_is_bit_identical() {
        let m = csn();
        let bytes = encode(&m).unwrap();
        let back: CsnModel<f32> = decode(&bytes, "mem", &mut VectorCache::new()).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        let names: Vec<String> = back.tensors().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"encoder.window2.weight".to_string()));
    }

    #[test]
    fn slotfill_round_trip() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let embedder = Embedder::<f64>::trainable(Arc::new(Vocab::build(&c)), 4, &mut rng);
        let cfg = SlotFillConfig {
            hidden: 3,
            var_dim: 2,
            attention_dim: 3,
        };
        let m = SlotFillModel::new(embedder, ["y0".to_string()], cfg, &mut rng).unwrap();
        let bytes = encode(&m).unwrap();
        let back: SlotFillModel<f64> = decode(&bytes, "mem", &mut VectorCache::new()).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn wrong_dtype_module_and_version() {
        let bytes = encode(&csn()).unwrap();
        let r: Result<CsnModel<f64>> = decode(&bytes, "mem", &mut VectorCache::new());
        assert!(matches!(r, Err(Error::Dtype { .. })));
        let r: Result<MatchNet<f32>> = decode(&bytes, "mem", &mut VectorCache::new());
        assert!(matches!(r, Err(Error::Parse { .. })));
        let mut bumped = bytes.clone();
        let text = String::from_utf8_lossy(&bumped[12..]).into_owned();
        let pos = text.find("\"version\":1").unwrap() + 12 + 10;
        bumped[pos] = b'7';
        let r: Result<CsnModel<f32>> = decode(&bumped, "mem", &mut VectorCache::new());
        assert!(matches!(r, Err(Error::Version { expected: 1, found: 7 })));
        let r: Result<CsnModel<f32>> = decode(&bytes[..bytes.len() - 1], "mem", &mut VectorCache::new());
        assert!(r.is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(&[b"ab", b"c"]),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

//! Run configuration: one TOML file with a section per module, plus the
//! helpers that turn it into trained models.

use crate::corpus::Corpus;
use crate::csn::{train_csn, CsnModel};
use crate::embed::{EmbeddingConfig, EmbeddingMode, Embedder, PrecomputedVectors, Vocab};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::matchnet::{train_matchnet, MatchNet, MatchNetConfig};
use crate::pipeline::{Engine, EngineConfig};
use crate::scalar::Scalar;
use crate::slotfill::{train_slotfill, SlotFillConfig, SlotFillModel};
use crate::train::{EpochRecord, OptimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub embed: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub matchnet: MatchNetConfig,
    pub slotfill: SlotFillConfig,
    pub optim: OptimConfig,
    pub engine: EngineConfig,
}

impl RunConfig {
    /// Full-size configuration over 1024-dim precomputed vectors.
    pub fn paper(vectors: impl Into<String>) -> Self {
        Self {
            embed: EmbeddingConfig::precomputed(vectors),
            ..Self::desk()
        }
    }

    /// Same architecture with a trainable 128-dim embedding table.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            embed: EmbeddingConfig::trainable(128),
            encoder: EncoderConfig::new(vec![2, 3, 4, 5], 200, 0),
            matchnet: MatchNetConfig::default(),
            slotfill: SlotFillConfig::default(),
            optim: OptimConfig::default(),
            engine: EngineConfig::default(),
        }
    }

    /// Reduced widths for single-core runs on the synthetic benchmarks.
    pub fn compact() -> Self {
        Self {
            embed: EmbeddingConfig::trainable(32),
            encoder: EncoderConfig::new(vec![2, 3, 4, 5], 64, 0),
            slotfill: SlotFillConfig {
                hidden: 32,
                var_dim: 16,
                attention_dim: 32,
            },
            optim: OptimConfig {
                max_epochs: 200,
                ..OptimConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides one dotted key, e.g. `optim.lr=0.01` or
    /// `encoder.window_sizes=[2,3]`. Values are TOML literals; anything that
    /// does not parse as one is taken as a string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().ok_or_else(|| Error::Config("empty key".into()))?;
        let mut table = &mut root;
        for p in path {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{p}` is not a section")))?;
        }
        table.insert(last.to_string(), parsed);
        let next: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut enc = self.encoder.clone();
        enc.input_dim = self.embed.dim;
        enc.validate()?;
        if self.embed.dim == 0 {
            return Err(Error::Config("embed.dim must be positive".into()));
        }
        if self.embed.mode == EmbeddingMode::Precomputed && self.embed.vectors.is_none() {
            return Err(Error::Config("embed.vectors is required in precomputed mode".into()));
        }
        let sf = &self.slotfill;
        if sf.hidden == 0 || sf.var_dim == 0 || sf.attention_dim == 0 {
            return Err(Error::Config("slotfill dimensions must be positive".into()));
        }
        if self.matchnet.n == 0 || self.engine.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.optim.batch_size == 0 || self.optim.lr <= 0.0 {
            return Err(Error::Config("optim.batch_size and optim.lr must be positive".into()));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
    }

    /// A fresh embedder: a trainable table over the training vocabulary, or
    /// the shared precomputed store.
    pub fn embedder<T: Scalar>(&self, train: &Corpus, store: Option<&Arc<PrecomputedVectors>>) -> Result<Embedder<T>> {
        match self.embed.mode {
            EmbeddingMode::Trainable => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.stage_seed(100));
                Ok(Embedder::trainable(Arc::new(Vocab::build(train)), self.embed.dim, &mut rng))
            }
            EmbeddingMode::Precomputed => match store {
                Some(s) => Ok(Embedder::Precomputed(s.clone())),
                None => {
                    let path = self.embed.vectors.as_deref().expect("validated");
                    Ok(Embedder::Precomputed(Arc::new(PrecomputedVectors::load(Path::new(path), self.embed.dim)?)))
                }
            },
        }
    }

    pub fn train_csn<T: Scalar>(&self, train: &Corpus, dev: &Corpus, embedder: Embedder<T>) -> Result<(CsnModel<T>, Vec<EpochRecord>)> {
        train_csn(train, dev, embedder, &self.encoder, &self.optim, self.stage_seed(1))
    }

    pub fn train_matchnet<T: Scalar>(&self, train: &Corpus, dev: &Corpus, init: &CsnModel<T>) -> Result<(MatchNet<T>, Vec<EpochRecord>)> {
        train_matchnet(
            train,
            dev,
            init,
            &init.backbone.embedder,
            &self.encoder,
            &self.matchnet,
            &self.optim,
            self.stage_seed(2),
        )
    }

    pub fn train_slotfill<T: Scalar>(&self, train: &Corpus, dev: &Corpus, embedder: Embedder<T>) -> Result<(SlotFillModel<T>, Vec<EpochRecord>)> {
        train_slotfill(train, dev, embedder, &self.slotfill, &self.optim, self.stage_seed(3))
    }

    /// Trains all three stages and builds an engine whose memory holds one
    /// exemplar per training template.
    pub fn train_engine<T: Scalar>(&self, train: &Corpus, dev: &Corpus) -> Result<(Engine<T>, Vec<EpochRecord>)> {
        let embedder: Embedder<T> = self.embedder(train, None)?;
        let (csn, mut log) = self.train_csn(train, dev, embedder.clone())?;
        let (mn, mn_log) = self.train_matchnet(train, dev, &csn)?;
        let (sf, sf_log) = self.train_slotfill(train, dev, embedder)?;
        log.extend(mn_log);
        log.extend(sf_log);
        let engine = Engine::build(csn, mn, sf, train, self.engine.clone(), self.stage_seed(4))?;
        Ok((engine, log))
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

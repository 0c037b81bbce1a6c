//! Token sequences to vector sequences: a trainable lookup table, or frozen
//! precomputed contextual vectors read from a fixture file.

use crate::corpus::{question_text, Corpus, Token};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Matrix, ParamTree};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Width of contextual vectors when nothing else is configured.
pub const PRECOMPUTED_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    Trainable,
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnkPolicy {
    #[default]
    SharedUnk,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    pub dim: usize,
    #[serde(default)]
    pub unk_policy: UnkPolicy,
    /// Fixture file for precomputed mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<String>,
}

impl EmbeddingConfig {
    pub fn trainable(dim: usize) -> Self {
        Self {
            mode: EmbeddingMode::Trainable,
            dim,
            unk_policy: UnkPolicy::SharedUnk,
            vectors: None,
        }
    }

    pub fn precomputed(path: impl Into<String>) -> Self {
        Self {
            mode: EmbeddingMode::Precomputed,
            dim: PRECOMPUTED_DIM,
            unk_policy: UnkPolicy::SharedUnk,
            vectors: Some(path.into()),
        }
    }
}

/// Ordered vocabulary with `<pad>` at 0 and `<unk>` at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Self::from_words(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD_ID] != PAD || words[UNK_ID] != UNK {
            return Err(Error::Validation(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Self { words, index })
    }

    /// Lowercased vocabulary over every question token, in first-seen order.
    pub fn build(corpus: &Corpus) -> Self {
        let mut words = vec![PAD.to_string(), UNK.to_string()];
        let mut index: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for e in &corpus.examples {
            for t in &e.question {
                let w = t.surface.to_lowercase();
                if !index.contains_key(&w) {
                    index.insert(w.clone(), words.len());
                    words.push(w);
                }
            }
        }
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, surface: &str) -> usize {
        self.index
            .get(&surface.to_lowercase())
            .copied()
            .unwrap_or(UNK_ID)
    }

    pub fn ids(&self, question: &[Token]) -> Vec<usize> {
        question.iter().map(|t| self.id(&t.surface)).collect()
    }
}

/// Frozen per-question vector matrices keyed by the question text.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedVectors {
    dim: usize,
    table: HashMap<String, Matrix<f32>>,
    source: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct VectorLine {
    question: String,
    vectors: Vec<Vec<f32>>,
}

impl PrecomputedVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
            source: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Path the vectors were loaded from, if any.
    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    pub fn insert(&mut self, question: &str, vectors: Matrix<f32>) -> Result<()> {
        if vectors.cols() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: vectors.cols(),
            });
        }
        self.table.insert(question.to_string(), vectors);
        Ok(())
    }

    pub fn get(&self, question: &str) -> Option<&Matrix<f32>> {
        self.table.get(question)
    }

    /// Reads a JSONL fixture of `{"question": "...", "vectors": [[...], ...]}`.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Self::new(dim);
        out.source = Some(path.display().to_string());
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let raw: VectorLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let n_tokens = raw.question.split_whitespace().count();
            if raw.vectors.len() != n_tokens {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: format!("{} vectors for {n_tokens} tokens", raw.vectors.len()),
                });
            }
            if raw.vectors.iter().any(|r| r.len() != dim) {
                return Err(Error::Dimension {
                    expected: dim,
                    found: raw.vectors.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(0),
                });
            }
            out.insert(&raw.question, Matrix::from_rows(&raw.vectors))?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSentence<T> {
    pub vectors: Matrix<T>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> EmbeddedSentence<T> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    /// Right-pads with masked all-zero rows up to `len`.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut vectors = Matrix::zeros(len.max(self.len()), self.dim());
        for i in 0..self.len() {
            vectors.row_mut(i).copy_from_slice(self.vectors.row(i));
        }
        let mut mask = self.mask.clone();
        mask.resize(len.max(self.len()), false);
        Self { vectors, mask }
    }
}

#[derive(Debug, Clone)]
pub enum Embedder<T> {
    Trainable {
        vocab: Arc<Vocab>,
        table: Matrix<T>,
    },
    Precomputed(Arc<PrecomputedVectors>),
}

impl<T: Scalar> Embedder<T> {
    /// Trainable table with rows drawn uniformly from `[-0.5, 0.5]`; the
    /// `<pad>` row is zero.
    pub fn trainable<R: Rng>(vocab: Arc<Vocab>, dim: usize, rng: &mut R) -> Self {
        let mut table = Matrix::uniform(vocab.len(), dim, 0.5, rng);
        table.row_mut(PAD_ID).fill(T::zero());
        Self::Trainable { vocab, table }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Trainable { table, .. } => table.cols(),
            Self::Precomputed(v) => v.dim(),
        }
    }

    pub fn vocab(&self) -> Option<&Arc<Vocab>> {
        match self {
            Self::Trainable { vocab, .. } => Some(vocab),
            Self::Precomputed(_) => None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Self::Trainable { .. })
    }

    pub fn embed(&self, question: &[Token]) -> Result<EmbeddedSentence<T>> {
        if question.is_empty() {
            return Err(Error::Validation("cannot embed an empty question".into()));
        }
        let vectors = match self {
            Self::Trainable { vocab, table } => {
                let mut m = Matrix::zeros(question.len(), table.cols());
                for (i, id) in vocab.ids(question).into_iter().enumerate() {
                    m.row_mut(i).copy_from_slice(table.row(id));
                }
                m
            }
            Self::Precomputed(store) => {
                let text = question_text(question);
                let src = store
                    .get(&text)
                    .ok_or_else(|| Error::MissingVector(text.clone()))?;
                src.cast()
            }
        };
        Ok(EmbeddedSentence {
            vectors,
            mask: vec![true; question.len()],
        })
    }

    /// Scatters per-token gradients into the table gradient. No-op for
    /// frozen vectors.
    pub fn backward(&self, question: &[Token], d_vectors: &Matrix<T>, grad: &mut Self) {
        if let (Self::Trainable { vocab, .. }, Self::Trainable { table: g, .. }) = (self, grad) {
            for (i, id) in vocab.ids(question).into_iter().enumerate() {
                let src = d_vectors.row(i);
                for (a, &b) in g.row_mut(id).iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
    }
}

impl<T: Scalar> ParamTree<T> for Embedder<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        match self {
            Self::Trainable { table, .. } => vec![("embed.table".to_string(), table)],
            Self::Precomputed(_) => vec![],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match self {
            Self::Trainable { table, .. } => vec![table],
            Self::Precomputed(_) => vec![],
        }
    }
}

/// Batch of sentences right-padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch<T> {
    pub batch: usize,
    pub max_len: usize,
    pub dim: usize,
    /// Row-major `[batch x max_len x dim]`.
    pub data: Vec<T>,
    pub mask: Vec<Vec<bool>>,
    lengths: Vec<usize>,
}

impl<T: Scalar> PaddedBatch<T> {
    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.max_len, self.dim]
    }

    pub fn sentence(&self, b: usize) -> EmbeddedSentence<T> {
        let rows = self.max_len;
        let start = b * rows * self.dim;
        EmbeddedSentence {
            vectors: Matrix::from_vec(rows, self.dim, self.data[start..start + rows * self.dim].to_vec()),
            mask: self.mask[b].clone(),
        }
    }

    pub fn unpad(&self) -> Vec<EmbeddedSentence<T>> {
        (0..self.batch)
            .map(|b| {
                let len = self.lengths[b];
                let start = b * self.max_len * self.dim;
                EmbeddedSentence {
                    vectors: Matrix::from_vec(len, self.dim, self.data[start..start + len * self.dim].to_vec()),
                    mask: self.mask[b][..len].to_vec(),
                }
            })
            .collect()
    }
}

pub fn pad_batch<T: Scalar>(sentences: &[EmbeddedSentence<T>]) -> Result<PaddedBatch<T>> {
    let first = sentences
        .first()
        .ok_or_else(|| Error::Validation("cannot pad an empty batch".into()))?;
    let dim = first.dim();
    if let Some(bad) = sentences.iter().find(|s| s.dim() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            found: bad.dim(),
        });
    }
    let max_len = sentences.iter().map(EmbeddedSentence::len).max().unwrap_or(0);
    let mut data = Vec::with_capacity(sentences.len() * max_len * dim);
    let mut mask = Vec::with_capacity(sentences.len());
    for s in sentences {
        let p = s.padded_to(max_len);
        data.extend_from_slice(p.vectors.data());
        mask.push(p.mask);
    }
    Ok(PaddedBatch {
        batch: sentences.len(),
        max_len,
        dim,
        data,
        mask,
        lengths: sentences.iter().map(EmbeddedSentence::len).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokens, Example, SqlTemplate};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Arc<Vocab> {
        let t = SqlTemplate::new("t", "SELECT 1", vec![]).unwrap();
        let c = Corpus::new("v", [t], vec![Example::new(&["Show", "flights", "boston"], "t", &[])]).unwrap();
        Arc::new(Vocab::build(&c))
    }

    #[test]
    fn trainable_shape_and_unk() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Embedder::<f64>::trainable(vocab(), 8, &mut rng);
        let s = e.embed(&tokens(&["show", "zurich", "FLIGHTS"])).unwrap();
        assert_eq!(s.vectors.shape(), (3, 8));
        assert!(s.vectors.data().iter().all(|v| v.is_finite()));
        let Embedder::Trainable { table, .. } = &e else { unreachable!() };
        assert_eq!(s.vectors.row(1), table.row(UNK_ID));
        assert_eq!(s.vectors.row(2), table.row(3));
    }

    #[test]
    fn precomputed_rows_are_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f32>> = (0..2)
            .map(|_| (0..PRECOMPUTED_DIM).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
            .collect();
        let line = serde_json::json!({"question": "to boston", "vectors": rows});
        let path = dir.path().join("elmo.jsonl");
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let store = Arc::new(PrecomputedVectors::load(&path, PRECOMPUTED_DIM).unwrap());
        let e = Embedder::<f32>::Precomputed(store);
        let s = e.embed(&tokens(&["to", "boston"])).unwrap();
        for (a, b) in s.vectors.row(1).iter().zip(&rows[1]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let err = e.embed(&tokens(&["to", "denver"])).unwrap_err();
        assert!(matches!(err, Error::MissingVector(ref q) if q == "to denver"));
    }

    #[test]
    fn pad_batch_shapes() {
        let mk = |n: usize| EmbeddedSentence {
            vectors: Matrix::<f64>::from_vec(n, 2, (0..2 * n).map(|v| v as f64).collect()),
            mask: vec![true; n],
        };
        let b = pad_batch(&[mk(3), mk(5)]).unwrap();
        assert_eq!(b.shape(), [2, 5, 2]);
        assert_eq!(b.mask[0], vec![true, true, true, false, false]);
        assert!(b.sentence(0).vectors.row(4).iter().all(|&v| v == 0.0));
        let single = pad_batch(&[mk(4)]).unwrap();
        assert_eq!(single.sentence(0), mk(4));
        let bad = EmbeddedSentence {
            vectors: Matrix::<f64>::zeros(2, 3),
            mask: vec![true; 2],
        };
        assert!(matches!(pad_batch(&[mk(2), bad]), Err(Error::Dimension { .. })));
        assert!(pad_batch::<f64>(&[]).is_err());
    }

    proptest! {
        #[test]
        fn unpad_inverts_pad(lens in proptest::collection::vec(1usize..7, 1..5), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sents: Vec<EmbeddedSentence<f64>> = lens
                .iter()
                .map(|&n| EmbeddedSentence { vectors: Matrix::uniform(n, 3, 1.0, &mut rng), mask: vec![true; n] })
                .collect();
            let batch = pad_batch(&sents).unwrap();
            prop_assert_eq!(batch.unpad(), sents);
        }
    }
}

//! Candidate search network: a CNN template classifier whose penultimate
//! features rank the candidate memory by cosine similarity.

use crate::backbone::Backbone;
use crate::corpus::{Corpus, Example, SqlTemplate, Token};
use crate::embed::Embedder;
use crate::encoder::{cosine, CnnEncoder, EncoderConfig, SentenceVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Adam, Matrix, ParamTree};
use crate::train::{early_stopping, DevScore, EpochRecord, OptimConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};

/// Default support-set size.
pub const DEFAULT_TOP_N: usize = 15;

#[derive(Debug, Clone)]
pub struct CsnModel<T> {
    pub backbone: Backbone<T>,
    /// `[n_labels x feature_dim]`; a training scaffold only, never used
    /// for retrieval.
    pub head_weight: Matrix<T>,
    pub head_bias: Matrix<T>,
    pub labels: Vec<String>,
}

impl<T: Scalar> CsnModel<T> {
    pub fn new<R: Rng>(backbone: Backbone<T>, labels: Vec<String>, rng: &mut R) -> Self {
        let dim = backbone.output_dim();
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            head_weight: Matrix::uniform(labels.len(), dim, bound, rng),
            head_bias: Matrix::uniform(1, labels.len(), bound, rng),
            backbone,
            labels,
        }
    }

    /// Backbone output, bypassing the classification head.
    pub fn features(&self, question: &[Token]) -> Result<SentenceVector<T>> {
        self.backbone.features(question)
    }

    pub fn logits(&self, feat: &[T]) -> Vec<T> {
        let mut z = self.head_bias.row(0).to_vec();
        self.head_weight.matvec_acc(feat, &mut z);
        z
    }

    pub fn predict(&self, question: &[Token]) -> Result<usize> {
        let f = self.features(question)?;
        Ok(crate::tensor::argmax(&self.logits(&f.0)))
    }

    /// Cross-entropy for one example; accumulates gradients when asked.
    pub fn loss(&self, question: &[Token], label: usize, grad: Option<&mut Self>) -> Result<f64> {
        let (feat, trace) = self.backbone.forward(question)?;
        let p = softmax(&self.logits(&feat.0));
        let loss = -p[label].max(T::min_positive_value()).ln().as_f64();
        if let Some(g) = grad {
            let mut dz = p;
            dz[label] -= T::one();
            g.head_weight.outer_acc(&dz, &feat.0);
            for (b, &d) in g.head_bias.row_mut(0).iter_mut().zip(&dz) {
                *b += d;
            }
            let mut dfeat = vec![T::zero(); feat.dim()];
            self.head_weight.matvec_t_acc(&dz, &mut dfeat);
            self.backbone.backward(question, &trace, &dfeat, &mut g.backbone);
        }
        Ok(loss)
    }

    fn label_index(&self) -> HashMap<&str, usize> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect()
    }

    /// Mean loss and accuracy over the examples whose template is a known label.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<Option<(f64, f64)>> {
        let index = self.label_index();
        let mut total = 0.0;
        let mut correct = 0usize;
        let mut n = 0usize;
        for e in &corpus.examples {
            let Some(&y) = index.get(e.template_id.as_str()) else { continue };
            total += self.loss(&e.question, y, None)?;
            if self.predict(&e.question)? == y {
                correct += 1;
            }
            n += 1;
        }
        Ok((n > 0).then(|| (total / n as f64, correct as f64 / n as f64)))
    }
}

impl<T: Scalar> ParamTree<T> for CsnModel<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = self.backbone.tensors();
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = self.backbone.tensors_mut();
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}

/// Trains the template classifier with Adam and early stopping on dev loss.
///
/// Dev examples whose template is not a training label are ignored; when
/// none remain the training loss drives early stopping instead.
pub fn train_csn<T: Scalar>(
    train: &Corpus,
    dev: &Corpus,
    embedder: Embedder<T>,
    encoder: &EncoderConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<(CsnModel<T>, Vec<EpochRecord>)> {
    let labels: Vec<String> = train.used_template_ids().into_iter().collect();
    if labels.len() < 2 {
        return Err(Error::DegenerateClassification);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc_cfg = encoder.clone();
    enc_cfg.input_dim = embedder.dim();
    let backbone = Backbone {
        encoder: CnnEncoder::new(enc_cfg, &mut rng)?,
        embedder,
    };
    let mut model = CsnModel::new(backbone, labels, &mut rng);
    let index: HashMap<String, usize> = model
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect();
    let targets: Vec<usize> = train.examples.iter().map(|e| index[&e.template_id]).collect();
    let dev_usable = dev.examples.iter().any(|e| index.contains_key(&e.template_id));

    let mut adam = Adam::new(optim.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut failure = None;
    let last_train_loss = std::cell::Cell::new(f64::INFINITY);
    early_stopping(
        "csn",
        &mut model,
        optim,
        |m, _| {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(optim.batch_size.max(1)) {
                let mut grad = m.zeros_like();
                for &i in batch {
                    match m.loss(&train.examples[i].question, targets[i], Some(&mut grad)) {
                        Ok(l) => total += l,
                        Err(e) => failure = Some(e),
                    }
                }
                grad.scale_all(T::one() / T::of(batch.len() as f64));
                adam.step(m, &grad);
            }
            last_train_loss.set(total / train.len() as f64);
            last_train_loss.get()
        },
        |m| {
            let (loss, observed) = if dev_usable {
                match m.evaluate(dev).ok().flatten() {
                    Some((l, a)) => (l, Some(a)),
                    None => (f64::INFINITY, None),
                }
            } else {
                (last_train_loss.get(), None)
            };
            DevScore {
                accuracy: f64::NEG_INFINITY,
                loss,
                observed,
            }
        },
        &mut log,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry<T> {
    pub example: Example,
    pub vector: SentenceVector<T>,
}

/// Candidate memory: one exemplar per template, with cached CSN features.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<T> {
    entries: BTreeMap<String, CandidateEntry<T>>,
}

impl<T: Scalar> Default for CandidateSet<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

/// One retrieved candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<T> {
    pub template_id: String,
    pub similarity: T,
    pub exemplar: Example,
}

impl<T: Scalar> CandidateSet<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, template_id: &str) -> Option<&CandidateEntry<T>> {
        self.entries.get(template_id)
    }

    pub fn contains(&self, template_id: &str) -> bool {
        self.entries.contains_key(template_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &CandidateEntry<T>)> {
        self.entries.iter()
    }

    pub fn template_ids(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn exemplars(&self) -> impl Iterator<Item = &Example> {
        self.entries.values().map(|e| &e.example)
    }

    /// Rebuilds every cached vector from a list of exemplars.
    pub fn from_exemplars(model: &CsnModel<T>, exemplars: impl IntoIterator<Item = Example>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for example in exemplars {
            let vector = model.features(&example.question)?;
            let id = example.template_id.clone();
            if entries.insert(id.clone(), CandidateEntry { example, vector }).is_some() {
                return Err(Error::DuplicateTemplate(id));
            }
        }
        Ok(Self { entries })
    }

    /// Returns a new set with `example` added under its template id.
    pub fn insert(
        &self,
        example: Example,
        template: &SqlTemplate,
        model: &CsnModel<T>,
        replace: bool,
    ) -> Result<Self> {
        if example.template_id != template.id {
            return Err(Error::Validation(format!(
                "example references `{}` but template is `{}`",
                example.template_id, template.id
            )));
        }
        example.validate(template)?;
        if !replace && self.entries.contains_key(&template.id) {
            return Err(Error::DuplicateTemplate(template.id.clone()));
        }
        let vector = model.features(&example.question)?;
        let mut next = self.clone();
        next.entries
            .insert(template.id.clone(), CandidateEntry { example, vector });
        Ok(next)
    }
}

/// Samples one exemplar per template uniformly at random and caches its
/// features.
pub fn build_candidate_set<T: Scalar>(
    model: &CsnModel<T>,
    corpus: &Corpus,
    seed: u64,
) -> Result<CandidateSet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = corpus.by_template();
    let picks = groups
        .values()
        .map(|idx| corpus.examples[idx[rng.gen_range(0..idx.len())]].clone());
    CandidateSet::from_exemplars(model, picks)
}

/// The `min(n, N)` candidates most similar to `question`, by descending
/// cosine similarity with ties broken by template id.
pub fn top_n<T: Scalar>(
    model: &CsnModel<T>,
    cands: &CandidateSet<T>,
    question: &[Token],
    n: usize,
) -> Result<Vec<Retrieved<T>>> {
    if cands.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let q = model.features(question)?;
    rank(&q, cands, n)
}

pub(crate) fn rank<T: Scalar>(
    query: &SentenceVector<T>,
    cands: &CandidateSet<T>,
    n: usize,
) -> Result<Vec<Retrieved<T>>> {
    if cands.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let mut scored: Vec<(T, &String, &CandidateEntry<T>)> = cands
        .entries
        .iter()
        .map(|(id, e)| (cosine(&query.0, &e.vector.0), id, e))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(scored
        .into_iter()
        .take(n.max(1))
        .map(|(s, id, e)| Retrieved {
            template_id: id.clone(),
            similarity: s,
            exemplar: e.example.clone(),
        })
        .collect())
}

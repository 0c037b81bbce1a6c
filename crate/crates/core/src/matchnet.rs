//! Matching network: softmax attention over cosine similarities between a
//! query encoding and a one-shot support set, trained episodically.

use crate::backbone::{Backbone, BackboneTrace};
use crate::corpus::{Corpus, Example, Token};
use crate::csn::CsnModel;
use crate::embed::Embedder;
use crate::encoder::{cosine, cosine_backward, EncoderConfig, SentenceVector};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax, Adam, Matrix, ParamTree};
use crate::train::{early_stopping, DevScore, EpochRecord, OptimConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchNetConfig {
    /// Ways per episode; also the support size retrieved at inference.
    pub n: usize,
    pub batch_per_class: usize,
    /// Fixed dev episodes scored after every epoch.
    pub dev_episodes: usize,
}

impl Default for MatchNetConfig {
    fn default() -> Self {
        Self {
            n: 15,
            batch_per_class: 4,
            dev_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem<T> {
    pub question: Vec<Token>,
    pub template_id: String,
    pub vector: SentenceVector<T>,
}

/// One encoded exemplar per distinct template.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet<T> {
    items: Vec<SupportItem<T>>,
}

impl<T: Scalar> SupportSet<T> {
    pub fn new(items: Vec<SupportItem<T>>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptySupport);
        }
        let mut seen = BTreeSet::new();
        for it in &items {
            if !seen.insert(it.template_id.as_str()) {
                return Err(Error::Validation(format!(
                    "support set repeats template `{}`",
                    it.template_id
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[SupportItem<T>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplatePrediction {
    pub distribution: BTreeMap<String, f64>,
    pub predicted_id: String,
}

/// Cosine similarity of the query to each support item.
pub fn similarities<T: Scalar>(query: &SentenceVector<T>, support: &SupportSet<T>) -> Vec<T> {
    support
        .items
        .iter()
        .map(|it| cosine(&query.0, &it.vector.0))
        .collect()
}

/// Softmax over cosine similarities to each support item.
pub fn attention<T: Scalar>(query: &SentenceVector<T>, support: &SupportSet<T>) -> Vec<T> {
    softmax(&similarities(query, support))
}

/// One-hot labels over distinct support classes: each template's
/// probability is its item's attention weight, computed in f64. The
/// prediction is the most similar item, ties going to the lexicographically
/// smallest template id.
pub fn prediction_from_similarities<T: Scalar>(support: &SupportSet<T>, sims: &[T]) -> TemplatePrediction {
    let wide: Vec<f64> = sims.iter().map(|s| s.as_f64()).collect();
    let distribution: BTreeMap<String, f64> = support
        .items
        .iter()
        .zip(softmax(&wide))
        .map(|(it, w)| (it.template_id.clone(), w))
        .collect();
    let mut best: Option<(&String, f64)> = None;
    for (it, &s) in support.items.iter().zip(&wide) {
        let better = match best {
            None => true,
            Some((id, bs)) => s > bs || (s == bs && it.template_id < *id),
        };
        if better {
            best = Some((&it.template_id, s));
        }
    }
    TemplatePrediction {
        distribution,
        predicted_id: best.expect("support is non-empty").0.clone(),
    }
}

/// Matching network encoder `f`.
#[derive(Debug, Clone)]
pub struct MatchNet<T> {
    pub backbone: Backbone<T>,
}

impl<T: Scalar> MatchNet<T> {
    /// Starts from the trained CSN backbone.
    pub fn from_csn(csn: &CsnModel<T>) -> Self {
        Self {
            backbone: csn.backbone.clone(),
        }
    }

    pub fn encode(&self, question: &[Token]) -> Result<SentenceVector<T>> {
        self.backbone.features(question)
    }

    pub fn support_item(&self, question: &[Token], template_id: &str) -> Result<SupportItem<T>> {
        Ok(SupportItem {
            question: question.to_vec(),
            template_id: template_id.to_string(),
            vector: self.encode(question)?,
        })
    }

    pub fn support_set<'a>(&self, exemplars: impl IntoIterator<Item = &'a Example>) -> Result<SupportSet<T>> {
        let items = exemplars
            .into_iter()
            .map(|e| self.support_item(&e.question, &e.template_id))
            .collect::<Result<Vec<_>>>()?;
        SupportSet::new(items)
    }

    pub fn classify(&self, question: &[Token], support: &SupportSet<T>) -> Result<TemplatePrediction> {
        if support.is_empty() {
            return Err(Error::EmptySupport);
        }
        let q = self.encode(question)?;
        Ok(prediction_from_similarities(support, &similarities(&q, support)))
    }

    /// Mean negative log-likelihood of the batch labels given the support,
    /// with gradients flowing through both query and support encodings.
    pub fn episode_loss(&self, episode: &Episode, grad: Option<&mut Self>) -> Result<EpisodeOutcome> {
        let label_pos: BTreeMap<&str, usize> = episode
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut support: Vec<(SentenceVector<T>, BackboneTrace<T>)> = Vec::with_capacity(episode.support.len());
        for e in &episode.support {
            support.push(self.backbone.forward(&e.question)?);
        }
        let dim = self.backbone.output_dim();
        let mut d_support = vec![vec![T::zero(); dim]; support.len()];
        let scale = T::one() / T::of(episode.batch.len() as f64);
        let mut total = 0.0;
        let mut correct = 0usize;
        let mut grad = grad;
        for e in &episode.batch {
            let y = label_pos[e.template_id.as_str()];
            let (q, trace) = self.backbone.forward(&e.question)?;
            let sims: Vec<T> = support.iter().map(|(s, _)| cosine(&q.0, &s.0)).collect();
            let p = softmax(&sims);
            total -= p[y].max(T::min_positive_value()).ln().as_f64();
            if crate::tensor::argmax(&p) == y {
                correct += 1;
            }
            if let Some(g) = grad.as_deref_mut() {
                let mut dq = vec![T::zero(); dim];
                for (i, (s, _)) in support.iter().enumerate() {
                    let indicator = if i == y { T::one() } else { T::zero() };
                    let dsim = (p[i] - indicator) * scale;
                    cosine_backward(&q.0, &s.0, dsim, &mut dq, &mut d_support[i]);
                }
                self.backbone.backward(&e.question, &trace, &dq, &mut g.backbone);
            }
        }
        if let Some(g) = grad {
            for ((e, (_, trace)), ds) in episode.support.iter().zip(&support).zip(&d_support) {
                self.backbone.backward(&e.question, trace, ds, &mut g.backbone);
            }
        }
        let n = episode.batch.len() as f64;
        Ok(EpisodeOutcome {
            loss: total / n,
            accuracy: correct as f64 / n,
        })
    }
}

impl<T: Scalar> ParamTree<T> for MatchNet<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        self.backbone.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.backbone.tensors_mut()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub accuracy: f64,
}

/// An n-way 1-shot training unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub labels: Vec<String>,
    /// One exemplar per label, in label order.
    pub support: Vec<Example>,
    pub batch: Vec<Example>,
}

/// Templates with at least two examples (one support, one batch).
pub fn eligible_templates(corpus: &Corpus) -> Vec<String> {
    corpus
        .by_template()
        .into_iter()
        .filter(|(_, idx)| idx.len() >= 2)
        .map(|(id, _)| id.to_string())
        .collect()
}

pub fn sample_episode_with<R: Rng>(
    corpus: &Corpus,
    n: usize,
    batch_per_class: usize,
    rng: &mut R,
) -> Result<Episode> {
    let groups = corpus.by_template();
    let eligible: Vec<&str> = groups
        .iter()
        .filter(|(_, idx)| idx.len() >= 2)
        .map(|(id, _)| *id)
        .collect();
    if n == 0 || eligible.len() < n {
        return Err(Error::EpisodeInfeasible {
            requested: n,
            eligible: eligible.len(),
        });
    }
    let mut labels: Vec<String> = eligible
        .choose_multiple(rng, n)
        .map(|s| s.to_string())
        .collect();
    labels.sort();
    let mut support = Vec::with_capacity(n);
    let mut batch = Vec::new();
    for l in &labels {
        let mut idx = groups[l.as_str()].clone();
        idx.shuffle(rng);
        support.push(corpus.examples[idx[0]].clone());
        batch.extend(
            idx[1..]
                .iter()
                .take(batch_per_class.max(1))
                .map(|&i| corpus.examples[i].clone()),
        );
    }
    Ok(Episode {
        labels,
        support,
        batch,
    })
}

pub fn sample_episode(corpus: &Corpus, n: usize, batch_per_class: usize, seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_episode_with(corpus, n, batch_per_class, &mut rng)
}

fn same_architecture<T: Scalar>(a: &Embedder<T>, b: &Embedder<T>) -> bool {
    match (a, b) {
        (Embedder::Trainable { vocab: va, table: ta }, Embedder::Trainable { vocab: vb, table: tb }) => {
            va == vb && ta.shape() == tb.shape()
        }
        (Embedder::Precomputed(x), Embedder::Precomputed(y)) => x.dim() == y.dim(),
        _ => false,
    }
}

/// Episodic training of `f`, initialised from the CSN backbone. One epoch
/// is `ceil(|train| / (n * batch_per_class))` episodes; each episode is one
/// Adam step.
pub fn train_matchnet<T: Scalar>(
    train: &Corpus,
    dev: &Corpus,
    init: &CsnModel<T>,
    embedder: &Embedder<T>,
    encoder: &EncoderConfig,
    config: &MatchNetConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<(MatchNet<T>, Vec<EpochRecord>)> {
    let mut expected = encoder.clone();
    expected.input_dim = embedder.dim();
    if init.backbone.encoder.config != expected {
        return Err(Error::IncompatibleInit(format!(
            "CSN encoder {:?} does not match configured {:?}",
            init.backbone.encoder.config, expected
        )));
    }
    if !same_architecture(&init.backbone.embedder, embedder) {
        return Err(Error::IncompatibleInit(
            "CSN embedding does not match the configured embedding".into(),
        ));
    }
    let ways = config.n.min(eligible_templates(train).len());
    if ways < 2 {
        return Err(Error::EpisodeInfeasible {
            requested: config.n,
            eligible: ways,
        });
    }

    // Dev episodes are fixed up front; fall back to train templates when the
    // dev corpus cannot host an episode.
    let dev_ways = config.n.min(eligible_templates(dev).len());
    let (dev_source, dev_ways) = if dev_ways >= 2 { (dev, dev_ways) } else { (train, ways) };
    let mut dev_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d00d);
    let dev_set: Vec<Episode> = (0..config.dev_episodes.max(1))
        .map(|_| sample_episode_with(dev_source, dev_ways, config.batch_per_class, &mut dev_rng))
        .collect::<Result<_>>()?;

    let per_episode = ways * config.batch_per_class.max(1);
    let episodes_per_epoch = train.len().div_ceil(per_episode).max(1);
    let mut model = MatchNet::from_csn(init);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(optim.lr);
    let mut log = Vec::new();
    let mut failure = None;
    early_stopping(
        "matchnet",
        &mut model,
        optim,
        |m, _| {
            let mut total = 0.0;
            for _ in 0..episodes_per_epoch {
                let step = sample_episode_with(train, ways, config.batch_per_class, &mut rng)
                    .and_then(|ep| {
                        let mut grad = m.zeros_like();
                        let out = m.episode_loss(&ep, Some(&mut grad))?;
                        Ok((out, grad))
                    });
                match step {
                    Ok((out, grad)) => {
                        total += out.loss;
                        adam.step(m, &grad);
                    }
                    Err(e) => failure = Some(e),
                }
            }
            total / episodes_per_epoch as f64
        },
        |m| {
            let mut loss = 0.0;
            let mut acc = 0.0;
            for ep in &dev_set {
                if let Ok(o) = m.episode_loss(ep, None) {
                    loss += o.loss;
                    acc += o.accuracy;
                }
            }
            let k = dev_set.len() as f64;
            DevScore {
                accuracy: acc / k,
                loss: loss / k,
                observed: None,
            }
        },
        &mut log,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SqlTemplate;
    use crate::encoder::CnnEncoder;
    use crate::embed::Vocab;
    use std::sync::Arc;

    fn support_from(vectors: &[Vec<f64>]) -> SupportSet<f64> {
        SupportSet::new(
            vectors
                .iter()
                .enumerate()
                .map(|(i, v)| SupportItem {
                    question: vec![],
                    template_id: format!("t{i:02}"),
                    vector: SentenceVector(v.clone()),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn attention_trivial_cases() {
        let q = SentenceVector(vec![1.0, 0.0]);
        assert_eq!(attention(&q, &support_from(&[vec![3.0, 1.0]])), vec![1.0]);
        let w = attention(&q, &support_from(&[vec![1.0, 1.0], vec![1.0, -1.0]]));
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_similarities_give_uniform_distribution() {
        let q = SentenceVector(vec![1.0, 0.0, 0.0]);
        let items: Vec<Vec<f64>> = (0..15).map(|i| vec![0.0, (i as f64).cos(), (i as f64).sin()]).collect();
        let s = support_from(&items);
        let p = prediction_from_similarities(&s, &similarities(&q, &s));
        for v in p.distribution.values() {
            assert!((v - 1.0 / 15.0).abs() < 1e-12);
        }
        assert_eq!(p.predicted_id, "t00");
    }

    #[test]
    fn support_set_validation() {
        assert!(matches!(SupportSet::<f64>::new(vec![]), Err(Error::EmptySupport)));
        let dup = vec![
            SupportItem { question: vec![], template_id: "a".into(), vector: SentenceVector(vec![1.0]) },
            SupportItem { question: vec![], template_id: "a".into(), vector: SentenceVector(vec![2.0]) },
        ];
        assert!(SupportSet::new(dup).is_err());
    }

    fn corpus(templates: usize, per: usize) -> Corpus {
        let mut ts = Vec::new();
        let mut ex = Vec::new();
        for t in 0..templates {
            let id = format!("t{t:02}");
            ts.push(SqlTemplate::new(&id, "SELECT 1", vec![]).unwrap());
            for j in 0..per {
                ex.push(Example::new(&[format!("w{t}"), format!("v{j}"), "x".to_string()], &id, &[]));
            }
        }
        Corpus::new("m", ts, ex).unwrap()
    }

    #[test]
    fn episode_sampling() {
        let c = corpus(2, 3);
        let ep = sample_episode(&c, 2, 4, 0).unwrap();
        assert_eq!(ep.labels, vec!["t00".to_string(), "t01".to_string()]);
        assert_eq!(ep.batch.len(), 4);
        for s in &ep.support {
            assert!(!ep.batch.contains(s));
        }
        assert_eq!(sample_episode(&c, 2, 4, 5).unwrap(), sample_episode(&c, 2, 4, 5).unwrap());
        assert!(matches!(sample_episode(&c, 3, 1, 0), Err(Error::EpisodeInfeasible { eligible: 2, .. })));
        let singles = corpus(4, 1);
        assert!(matches!(sample_episode(&singles, 2, 1, 0), Err(Error::EpisodeInfeasible { eligible: 0, .. })));
    }

    #[test]
    fn label_inclusion_is_uniform() {
        let c = corpus(20, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let trials = 10_000;
        let n = 15;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..trials {
            for l in sample_episode_with(&c, n, 1, &mut rng).unwrap().labels {
                *counts.entry(l).or_default() += 1;
            }
        }
        let p = n as f64 / 20.0;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        assert_eq!(counts.len(), 20);
        for (id, k) in counts {
            assert!((k as f64 - mean).abs() <= 3.0 * sd, "{id}: {k} vs {mean}±{sd}");
        }
    }

    #[test]
    fn two_way_loss_matches_hand_value() {
        // Identity encoder: window 1, one feature map per input dim, weights
        // = identity, zero bias, so f(x) = relu(max over tokens).
        let c = corpus(2, 2);
        let vocab = Arc::new(Vocab::build(&c));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut embedder = Embedder::<f64>::trainable(vocab.clone(), 2, &mut rng);
        let Embedder::Trainable { table, .. } = &mut embedder else { unreachable!() };
        table.fill(0.0);
        table.row_mut(vocab.id("w0")).copy_from_slice(&[1.0, 0.0]);
        table.row_mut(vocab.id("w1")).copy_from_slice(&[0.0, 1.0]);
        table.row_mut(vocab.id("v1")).copy_from_slice(&[1.0, 1.0]);
        let mut encoder = CnnEncoder::new(EncoderConfig::new(vec![1], 2, 2), &mut rng).unwrap();
        encoder.windows[0].weight = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        encoder.windows[0].bias.fill(0.0);
        let net = MatchNet { backbone: Backbone { embedder, encoder } };
        let ex = |t: usize, j: usize| Example::new(&[format!("w{t}"), format!("v{j}"), "x".into()], format!("t{t:02}"), &[]);
        // support vectors (1,0) and (0,1); query t00 with v1 -> (1,1)
        let ep = Episode {
            labels: vec!["t00".into(), "t01".into()],
            support: vec![ex(0, 0), ex(1, 0)],
            batch: vec![ex(0, 1)],
        };
        let out = net.episode_loss(&ep, None).unwrap();
        // both cosines are 1/sqrt(2): p = 1/2 each, loss ln 2
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}

//! Convolutional sentence encoder: parallel convolution windows, ReLU and
//! max-over-time pooling, concatenated across windows.
//!
//! Masked rows are dropped before convolution, so appending padding never
//! changes the output. Sentences shorter than the widest window are
//! left-padded with zero rows up to that width.

use crate::embed::EmbeddedSentence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, norm, Matrix, ParamTree};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub window_sizes: Vec<usize>,
    pub feature_maps: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Filled from the embedding width when left at zero.
    #[serde(default)]
    pub input_dim: usize,
}

impl EncoderConfig {
    pub fn new(window_sizes: Vec<usize>, feature_maps: usize, input_dim: usize) -> Self {
        Self {
            window_sizes,
            feature_maps,
            activation: Activation::Relu,
            input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.feature_maps * self.window_sizes.len()
    }

    pub fn max_window(&self) -> usize {
        self.window_sizes.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_sizes.is_empty() || self.window_sizes.contains(&0) {
            return Err(Error::Config(
                "encoder window sizes must be non-empty and positive".into(),
            ));
        }
        if self.feature_maps == 0 || self.input_dim == 0 {
            return Err(Error::Config(
                "encoder feature maps and input dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pooled sentence feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceVector<T>(pub Vec<T>);

impl<T: Scalar> SentenceVector<T> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWindow<T> {
    pub size: usize,
    /// `[feature_maps x size * input_dim]`
    pub weight: Matrix<T>,
    /// `[1 x feature_maps]`
    pub bias: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnEncoder<T> {
    pub config: EncoderConfig,
    pub windows: Vec<ConvWindow<T>>,
}

/// Forward-pass record needed by `backward`.
#[derive(Debug, Clone)]
pub struct EncodeCache<T> {
    /// Canonical input: real rows, left-padded, flattened row-major.
    input: Vec<T>,
    /// Original row index of each canonical row (`None` for left padding).
    origin: Vec<Option<usize>>,
    /// Per window, per feature map: winning position, if the output is positive.
    winners: Vec<Vec<Option<usize>>>,
}

impl<T: Scalar> CnnEncoder<T> {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let windows = config
            .window_sizes
            .iter()
            .map(|&size| {
                let fan_in = size * config.input_dim;
                let bound = 1.0 / (fan_in as f64).sqrt();
                ConvWindow {
                    size,
                    weight: Matrix::uniform(config.feature_maps, fan_in, bound, rng),
                    bias: Matrix::uniform(1, config.feature_maps, bound, rng),
                }
            })
            .collect();
        Ok(Self { config, windows })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn canonical(&self, sentence: &EmbeddedSentence<T>) -> (Vec<T>, Vec<Option<usize>>) {
        let dim = self.config.input_dim;
        let real: Vec<usize> = (0..sentence.len()).filter(|&i| sentence.mask[i]).collect();
        let lead = self.config.max_window().saturating_sub(real.len());
        let mut input = vec![T::zero(); (lead + real.len()) * dim];
        let mut origin = vec![None; lead];
        for (k, &i) in real.iter().enumerate() {
            input[(lead + k) * dim..(lead + k + 1) * dim].copy_from_slice(sentence.vectors.row(i));
            origin.push(Some(i));
        }
        (input, origin)
    }

    pub fn forward(&self, sentence: &EmbeddedSentence<T>) -> Result<(SentenceVector<T>, EncodeCache<T>)> {
        if sentence.dim() != self.config.input_dim {
            return Err(Error::Dimension {
                expected: self.config.input_dim,
                found: sentence.dim(),
            });
        }
        let dim = self.config.input_dim;
        let (input, origin) = self.canonical(sentence);
        let rows = origin.len();
        let maps = self.config.feature_maps;
        let mut out = Vec::with_capacity(self.output_dim());
        let mut winners = Vec::with_capacity(self.windows.len());
        for w in &self.windows {
            let span = w.size * dim;
            let positions = rows + 1 - w.size;
            let mut best = vec![T::neg_infinity(); maps];
            let mut arg = vec![0usize; maps];
            for j in 0..positions {
                let x = &input[j * dim..j * dim + span];
                for m in 0..maps {
                    let z = dot(w.weight.row(m), x);
                    if z > best[m] {
                        best[m] = z;
                        arg[m] = j;
                    }
                }
            }
            let mut win = Vec::with_capacity(maps);
            for m in 0..maps {
                let z = best[m] + w.bias.get(0, m);
                if z > T::zero() {
                    out.push(z);
                    win.push(Some(arg[m]));
                } else {
                    out.push(T::zero());
                    win.push(None);
                }
            }
            winners.push(win);
        }
        Ok((
            SentenceVector(out),
            EncodeCache {
                input,
                origin,
                winners,
            },
        ))
    }

    pub fn encode(&self, sentence: &EmbeddedSentence<T>) -> Result<SentenceVector<T>> {
        self.forward(sentence).map(|(v, _)| v)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input rows (zero on masked rows).
    pub fn backward(
        &self,
        sentence: &EmbeddedSentence<T>,
        cache: &EncodeCache<T>,
        d_out: &[T],
        grad: &mut Self,
    ) -> Matrix<T> {
        let dim = self.config.input_dim;
        let maps = self.config.feature_maps;
        let mut d_input = vec![T::zero(); cache.input.len()];
        for (wi, w) in self.windows.iter().enumerate() {
            let span = w.size * dim;
            let gw = &mut grad.windows[wi];
            for m in 0..maps {
                let Some(j) = cache.winners[wi][m] else { continue };
                let g = d_out[wi * maps + m];
                if g == T::zero() {
                    continue;
                }
                let x = &cache.input[j * dim..j * dim + span];
                axpy(g, x, gw.weight.row_mut(m));
                let b = gw.bias.get(0, m);
                gw.bias.set(0, m, b + g);
                axpy(g, w.weight.row(m), &mut d_input[j * dim..j * dim + span]);
            }
        }
        let mut d_rows = Matrix::zeros(sentence.len(), dim);
        for (k, origin) in cache.origin.iter().enumerate() {
            if let Some(i) = origin {
                d_rows.row_mut(*i).copy_from_slice(&d_input[k * dim..(k + 1) * dim]);
            }
        }
        d_rows
    }
}

impl<T: Scalar> ParamTree<T> for CnnEncoder<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        for w in &self.windows {
            out.push((format!("encoder.window{}.weight", w.size), &w.weight));
            out.push((format!("encoder.window{}.bias", w.size), &w.bias));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::new();
        for w in &mut self.windows {
            out.push(&mut w.weight);
            out.push(&mut w.bias);
        }
        out
    }
}

const COSINE_EPS: f64 = 1e-12;

/// Cosine similarity; zero when either vector has norm below `1e-12`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    let eps = T::of(COSINE_EPS);
    if na < eps || nb < eps {
        return T::zero();
    }
    let c = dot(a, b) / (na * nb);
    c.max(-T::one()).min(T::one())
}

/// Adds `g * d cos(a, b) / da` into `da` and likewise for `db`.
pub fn cosine_backward<T: Scalar>(a: &[T], b: &[T], g: T, da: &mut [T], db: &mut [T]) {
    let (na, nb) = (norm(a), norm(b));
    let eps = T::of(COSINE_EPS);
    if na < eps || nb < eps || g == T::zero() {
        return;
    }
    let c = dot(a, b) / (na * nb);
    let inv = T::one() / (na * nb);
    for i in 0..a.len() {
        da[i] += g * (b[i] * inv - c * a[i] / (na * na));
        db[i] += g * (a[i] * inv - c * b[i] / (nb * nb));
    }
}

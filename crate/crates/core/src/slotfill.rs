//! Pointer-network slot filler: a bidirectional LSTM over question tokens,
//! an LSTM decoder stepping over template variables, and additive attention
//! that picks one input position per variable.

use crate::corpus::{Corpus, Example, Token};
use crate::embed::{EmbeddedSentence, Embedder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Adam, Matrix, ParamTree};
use crate::train::{early_stopping, DevScore, EpochRecord, OptimConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::sync::Arc;

pub const UNK_VAR: &str = "<unkvar>";

/// Init gain on `W1` and `W2`. Small operands leave tanh near-linear, where
/// the decoder state shifts all scores equally and drops out of the softmax.
const ATTENTION_INIT_GAIN: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotFillConfig {
    /// Units per encoder direction and in the decoder.
    pub hidden: usize,
    pub var_dim: usize,
    pub attention_dim: usize,
}

impl Default for SlotFillConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            var_dim: 64,
            attention_dim: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// LSTM cell with gates stacked as `[i; f; g; o]` and weights applied to
/// the concatenation `[x; h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct LstmStep<T> {
    xh: Vec<T>,
    gates: Vec<T>,
    c_prev: Vec<T>,
    tanh_c: Vec<T>,
    pub c: Vec<T>,
    pub h: Vec<T>,
}

impl<T: Scalar> Lstm<T> {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Matrix::uniform(1, 4 * hidden, bound, rng);
        bias.data_mut()[hidden..2 * hidden].fill(T::one());
        Self {
            weight: Matrix::uniform(4 * hidden, input + hidden, bound, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.bias.cols() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols() - self.hidden()
    }

    pub fn step(&self, x: &[T], h: &[T], c: &[T]) -> LstmStep<T> {
        let hd = self.hidden();
        let mut xh = Vec::with_capacity(x.len() + h.len());
        xh.extend_from_slice(x);
        xh.extend_from_slice(h);
        let mut gates = self.bias.data().to_vec();
        self.weight.matvec_acc(&xh, &mut gates);
        for (k, a) in gates.iter_mut().enumerate() {
            *a = if (2 * hd..3 * hd).contains(&k) { a.tanh() } else { sigmoid(*a) };
        }
        let mut c_new = vec![T::zero(); hd];
        let mut tanh_c = vec![T::zero(); hd];
        let mut h_new = vec![T::zero(); hd];
        for j in 0..hd {
            let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
            c_new[j] = f * c[j] + i * g;
            tanh_c[j] = c_new[j].tanh();
            h_new[j] = o * tanh_c[j];
        }
        LstmStep {
            xh,
            gates,
            c_prev: c.to_vec(),
            tanh_c,
            c: c_new,
            h: h_new,
        }
    }

    /// Returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(&self, s: &LstmStep<T>, dh: &[T], dc: &[T], grad: &mut Self) -> (Vec<T>, Vec<T>, Vec<T>) {
        let hd = self.hidden();
        let one = T::one();
        let mut da = vec![T::zero(); 4 * hd];
        let mut dc_prev = vec![T::zero(); hd];
        for j in 0..hd {
            let (i, f, g, o) = (s.gates[j], s.gates[hd + j], s.gates[2 * hd + j], s.gates[3 * hd + j]);
            let tc = s.tanh_c[j];
            let dct = dc[j] + dh[j] * o * (one - tc * tc);
            da[j] = dct * g * i * (one - i);
            da[hd + j] = dct * s.c_prev[j] * f * (one - f);
            da[2 * hd + j] = dct * i * (one - g * g);
            da[3 * hd + j] = dh[j] * tc * o * (one - o);
            dc_prev[j] = dct * f;
        }
        grad.weight.outer_acc(&da, &s.xh);
        for (b, d) in grad.bias.data_mut().iter_mut().zip(&da) {
            *b += *d;
        }
        let mut dxh = vec![T::zero(); s.xh.len()];
        self.weight.matvec_t_acc(&da, &mut dxh);
        let dh_prev = dxh.split_off(self.input_dim());
        (dxh, dh_prev, dc_prev)
    }
}

/// Encoder output: one state per position (zero at masked positions) and
/// the concatenated final forward and backward states.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuestion<T> {
    pub states: Vec<Vec<T>>,
    pub mask: Vec<bool>,
    pub final_state: Vec<T>,
}

struct EncodeTrace<T> {
    embedded: EmbeddedSentence<T>,
    active: Vec<usize>,
    fwd: Vec<LstmStep<T>>,
    bwd: Vec<LstmStep<T>>,
}

struct DecodeTrace<T> {
    steps: Vec<LstmStep<T>>,
    z: Vec<Vec<Vec<T>>>,
    probs: Vec<Vec<T>>,
    var_ids: Vec<usize>,
}

/// One pointer per variable with the per-step distributions it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotAssignment {
    pub pointers: Vec<usize>,
    pub distributions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SlotFillModel<T> {
    pub config: SlotFillConfig,
    pub embedder: Embedder<T>,
    pub fwd: Lstm<T>,
    pub bwd: Lstm<T>,
    pub bridge_weight: Matrix<T>,
    pub bridge_bias: Matrix<T>,
    pub decoder: Lstm<T>,
    /// Variable names; index 0 is the shared unknown entry.
    pub var_names: Arc<Vec<String>>,
    pub var_table: Matrix<T>,
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SlotFillModel<T> {
    pub fn new<R: Rng>(embedder: Embedder<T>, variables: impl IntoIterator<Item = String>, config: SlotFillConfig, rng: &mut R) -> Result<Self> {
        if config.hidden == 0 || config.var_dim == 0 || config.attention_dim == 0 {
            return Err(Error::Config("slotfill dimensions must be positive".into()));
        }
        let mut names = vec![UNK_VAR.to_string()];
        let distinct: BTreeSet<String> = variables.into_iter().filter(|v| v != UNK_VAR).collect();
        names.extend(distinct);
        let (h, a, d) = (config.hidden, config.attention_dim, embedder.dim());
        let enc_bound = 1.0 / (2.0 * h as f64).sqrt();
        Ok(Self {
            fwd: Lstm::new(d, h, rng),
            bwd: Lstm::new(d, h, rng),
            bridge_weight: Matrix::uniform(h, 2 * h, enc_bound, rng),
            bridge_bias: Matrix::zeros(1, h),
            decoder: Lstm::new(config.var_dim, h, rng),
            var_table: Matrix::uniform(names.len(), config.var_dim, 0.5, rng),
            var_names: Arc::new(names),
            w1: Matrix::uniform(a, 2 * h, ATTENTION_INIT_GAIN * enc_bound, rng),
            w2: Matrix::uniform(a, h, ATTENTION_INIT_GAIN / (h as f64).sqrt(), rng),
            v: Matrix::uniform(1, a, 1.0 / (a as f64).sqrt(), rng),
            config,
            embedder,
        })
    }

    pub fn var_id(&self, name: &str) -> usize {
        self.var_names.iter().position(|n| n == name).unwrap_or(0)
    }

    pub fn encode_question(&self, question: &[Token]) -> Result<EncodedQuestion<T>> {
        let embedded = self.embedder.embed(question)?;
        Ok(self.encode_trace(embedded)?.0)
    }

    pub fn encode_embedded(&self, sentence: &EmbeddedSentence<T>) -> Result<EncodedQuestion<T>> {
        Ok(self.encode_trace(sentence.clone())?.0)
    }

    /// Masked positions are skipped by both recurrences.
    fn encode_trace(&self, embedded: EmbeddedSentence<T>) -> Result<(EncodedQuestion<T>, EncodeTrace<T>)> {
        let dim = self.fwd.input_dim();
        if embedded.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                found: embedded.dim(),
            });
        }
        let active: Vec<usize> = (0..embedded.len()).filter(|&i| embedded.mask[i]).collect();
        if active.is_empty() {
            return Err(Error::Validation("cannot encode an empty question".into()));
        }
        let h = self.config.hidden;
        let zero = vec![T::zero(); h];
        let mut fwd = Vec::with_capacity(active.len());
        for &p in &active {
            let (hp, cp) = fwd.last().map_or((&zero, &zero), |s: &LstmStep<T>| (&s.h, &s.c));
            let s = self.fwd.step(embedded.vectors.row(p), hp, cp);
            fwd.push(s);
        }
        let mut bwd = Vec::with_capacity(active.len());
        for &p in active.iter().rev() {
            let (hp, cp) = bwd.last().map_or((&zero, &zero), |s: &LstmStep<T>| (&s.h, &s.c));
            let s = self.bwd.step(embedded.vectors.row(p), hp, cp);
            bwd.push(s);
        }
        let mut states = vec![vec![T::zero(); 2 * h]; embedded.len()];
        let k = active.len();
        for (j, &p) in active.iter().enumerate() {
            states[p][..h].copy_from_slice(&fwd[j].h);
            states[p][h..].copy_from_slice(&bwd[k - 1 - j].h);
        }
        let mut final_state = fwd[k - 1].h.clone();
        final_state.extend_from_slice(&bwd[k - 1].h);
        let enc = EncodedQuestion {
            states,
            mask: embedded.mask.clone(),
            final_state,
        };
        Ok((
            enc,
            EncodeTrace {
                embedded,
                active,
                fwd,
                bwd,
            },
        ))
    }

    /// `u_i = V tanh(W1 e_i + W2 d)`, with `-inf` at masked positions.
    pub fn attention_scores(&self, states: &[Vec<T>], d: &[T], mask: &[bool]) -> Vec<T> {
        let q = self.w2.matvec(d);
        states
            .iter()
            .zip(mask)
            .map(|(e, &m)| {
                if !m {
                    return T::neg_infinity();
                }
                let mut z = q.clone();
                self.w1.matvec_acc(e, &mut z);
                z.iter().zip(self.v.data()).fold(T::zero(), |acc, (a, b)| acc + a.tanh() * *b)
            })
            .collect()
    }

    fn initial_state(&self, final_state: &[T]) -> Vec<T> {
        let mut h0 = self.bridge_bias.data().to_vec();
        self.bridge_weight.matvec_acc(final_state, &mut h0);
        h0
    }

    fn decode_trace(&self, enc: &EncodedQuestion<T>, variables: &[String]) -> DecodeTrace<T> {
        let h = self.config.hidden;
        let var_ids: Vec<usize> = variables.iter().map(|v| self.var_id(v)).collect();
        let proj: Vec<Option<Vec<T>>> = enc
            .states
            .iter()
            .zip(&enc.mask)
            .map(|(e, &m)| m.then(|| self.w1.matvec(e)))
            .collect();
        let mut hprev = self.initial_state(&enc.final_state);
        let mut cprev = vec![T::zero(); h];
        let mut steps = Vec::with_capacity(var_ids.len());
        let mut z = Vec::with_capacity(var_ids.len());
        let mut probs = Vec::with_capacity(var_ids.len());
        for &vid in &var_ids {
            let s = self.decoder.step(self.var_table.row(vid), &hprev, &cprev);
            let q = self.w2.matvec(&s.h);
            let mut zt = Vec::with_capacity(proj.len());
            let mut u = Vec::with_capacity(proj.len());
            for p in &proj {
                match p {
                    Some(p) => {
                        let zi: Vec<T> = p.iter().zip(&q).map(|(a, b)| (*a + *b).tanh()).collect();
                        u.push(zi.iter().zip(self.v.data()).fold(T::zero(), |acc, (a, b)| acc + *a * *b));
                        zt.push(zi);
                    }
                    None => {
                        u.push(T::neg_infinity());
                        zt.push(Vec::new());
                    }
                }
            }
            probs.push(crate::tensor::softmax(&u));
            z.push(zt);
            hprev = s.h.clone();
            cprev = s.c.clone();
            steps.push(s);
        }
        DecodeTrace {
            steps,
            z,
            probs,
            var_ids,
        }
    }

    /// Greedy decoding from precomputed encoder states.
    pub fn decode_from_states(&self, enc: &EncodedQuestion<T>, variables: &[String]) -> SlotAssignment {
        if variables.is_empty() {
            return SlotAssignment {
                pointers: vec![],
                distributions: vec![],
            };
        }
        let trace = self.decode_trace(enc, variables);
        let mut pointers = Vec::new();
        let mut distributions = Vec::new();
        for s in &trace.steps {
            let scores: Vec<f64> = self
                .attention_scores(&enc.states, &s.h, &enc.mask)
                .into_iter()
                .map(|u| u.as_f64())
                .collect();
            let p = crate::tensor::softmax(&scores);
            pointers.push(argmax(&p));
            distributions.push(p);
        }
        SlotAssignment {
            pointers,
            distributions,
        }
    }

    pub fn decode_slots(&self, question: &[Token], variables: &[String], mode: DecodeMode) -> Result<SlotAssignment> {
        let DecodeMode::Greedy = mode;
        if variables.is_empty() {
            return Ok(SlotAssignment {
                pointers: vec![],
                distributions: vec![],
            });
        }
        let enc = self.encode_question(question)?;
        Ok(self.decode_from_states(&enc, variables))
    }

    /// Teacher-forced loss given encoder states: `-sum_t log p_t[y_t]`.
    pub fn loss_from_states(&self, enc: &EncodedQuestion<T>, variables: &[String], targets: &[usize]) -> Result<f64> {
        check_targets(enc.states.len(), variables, targets)?;
        let trace = self.decode_trace(enc, variables);
        Ok(nll(&trace, targets))
    }

    /// Teacher-forced loss for one question; accumulates gradients into
    /// `grad` when given.
    pub fn loss(&self, question: &[Token], variables: &[String], targets: &[usize], grad: Option<&mut Self>) -> Result<f64> {
        if variables.is_empty() {
            return Ok(0.0);
        }
        check_targets(question.len(), variables, targets)?;
        let embedded = self.embedder.embed(question)?;
        let (enc, etrace) = self.encode_trace(embedded)?;
        let dtrace = self.decode_trace(&enc, variables);
        let loss = nll(&dtrace, targets);
        if let Some(g) = grad {
            let (d_states, d_final) = self.decode_backward(&enc, &dtrace, targets, g);
            let d_rows = self.encode_backward(&etrace, &d_states, &d_final, g);
            self.embedder.backward(question, &d_rows, &mut g.embedder);
        }
        Ok(loss)
    }

    pub fn example_loss(&self, example: &Example, variables: &[String], grad: Option<&mut Self>) -> Result<f64> {
        let targets = gold_targets(example, variables)?;
        self.loss(&example.question, variables, &targets, grad)
    }

    fn decode_backward(
        &self,
        enc: &EncodedQuestion<T>,
        trace: &DecodeTrace<T>,
        targets: &[usize],
        grad: &mut Self,
    ) -> (Vec<Vec<T>>, Vec<T>) {
        let h = self.config.hidden;
        let a = self.config.attention_dim;
        let n = enc.states.len();
        let one = T::one();
        let mut d_proj = vec![vec![T::zero(); a]; n];
        let mut d_dec = vec![vec![T::zero(); h]; trace.steps.len()];
        for (t, (p, zt)) in trace.probs.iter().zip(&trace.z).enumerate() {
            let mut dq = vec![T::zero(); a];
            for i in 0..n {
                if !enc.mask[i] {
                    continue;
                }
                let du = p[i] - if i == targets[t] { one } else { T::zero() };
                let zi = &zt[i];
                for k in 0..a {
                    grad.v.data_mut()[k] += du * zi[k];
                    let dpre = du * self.v.data()[k] * (one - zi[k] * zi[k]);
                    d_proj[i][k] += dpre;
                    dq[k] += dpre;
                }
            }
            grad.w2.outer_acc(&dq, &trace.steps[t].h);
            self.w2.matvec_t_acc(&dq, &mut d_dec[t]);
        }
        let mut d_states = vec![vec![T::zero(); 2 * h]; n];
        for i in 0..n {
            if enc.mask[i] {
                grad.w1.outer_acc(&d_proj[i], &enc.states[i]);
                self.w1.matvec_t_acc(&d_proj[i], &mut d_states[i]);
            }
        }
        let mut dh_next = vec![T::zero(); h];
        let mut dc_next = vec![T::zero(); h];
        for t in (0..trace.steps.len()).rev() {
            let dh: Vec<T> = d_dec[t].iter().zip(&dh_next).map(|(a, b)| *a + *b).collect();
            let (dx, dh_prev, dc_prev) = self.decoder.step_backward(&trace.steps[t], &dh, &dc_next, &mut grad.decoder);
            for (g, d) in grad.var_table.row_mut(trace.var_ids[t]).iter_mut().zip(&dx) {
                *g += *d;
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        grad.bridge_weight.outer_acc(&dh_next, &enc.final_state);
        for (b, d) in grad.bridge_bias.data_mut().iter_mut().zip(&dh_next) {
            *b += *d;
        }
        let mut d_final = vec![T::zero(); 2 * h];
        self.bridge_weight.matvec_t_acc(&dh_next, &mut d_final);
        (d_states, d_final)
    }

    fn encode_backward(&self, trace: &EncodeTrace<T>, d_states: &[Vec<T>], d_final: &[T], grad: &mut Self) -> Matrix<T> {
        let h = self.config.hidden;
        let k = trace.active.len();
        let mut d_rows = Matrix::zeros(trace.embedded.len(), trace.embedded.dim());
        let mut dh = d_final[..h].to_vec();
        let mut dc = vec![T::zero(); h];
        for j in (0..k).rev() {
            let p = trace.active[j];
            let dhj: Vec<T> = dh.iter().zip(&d_states[p][..h]).map(|(a, b)| *a + *b).collect();
            let (dx, dh_prev, dc_prev) = self.fwd.step_backward(&trace.fwd[j], &dhj, &dc, &mut grad.fwd);
            for (r, d) in d_rows.row_mut(p).iter_mut().zip(&dx) {
                *r += *d;
            }
            dh = dh_prev;
            dc = dc_prev;
        }
        let mut dh = d_final[h..].to_vec();
        let mut dc = vec![T::zero(); h];
        for j in (0..k).rev() {
            let p = trace.active[k - 1 - j];
            let dhj: Vec<T> = dh.iter().zip(&d_states[p][h..]).map(|(a, b)| *a + *b).collect();
            let (dx, dh_prev, dc_prev) = self.bwd.step_backward(&trace.bwd[j], &dhj, &dc, &mut grad.bwd);
            for (r, d) in d_rows.row_mut(p).iter_mut().zip(&dx) {
                *r += *d;
            }
            dh = dh_prev;
            dc = dc_prev;
        }
        d_rows
    }
}

fn nll<T: Scalar>(trace: &DecodeTrace<T>, targets: &[usize]) -> f64 {
    trace
        .probs
        .iter()
        .zip(targets)
        .map(|(p, &y)| -p[y].as_f64().max(f64::MIN_POSITIVE).ln())
        .sum()
}

fn check_targets(n_tokens: usize, variables: &[String], targets: &[usize]) -> Result<()> {
    if variables.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} variables but {} targets",
            variables.len(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= n_tokens) {
        return Err(Error::Validation(format!(
            "pointer target {bad} outside a {n_tokens}-token question"
        )));
    }
    Ok(())
}

/// Gold pointer for each variable, in the given order.
pub fn gold_targets(example: &Example, variables: &[String]) -> Result<Vec<usize>> {
    variables
        .iter()
        .map(|v| {
            example.slot_bindings.get(v).copied().ok_or_else(|| {
                Error::Validation(format!("example `{}` has no binding for `{v}`", example.text()))
            })
        })
        .collect()
}

/// True when every pointer selects a token with the gold surface.
pub fn pointers_match(example: &Example, variables: &[String], pointers: &[usize]) -> bool {
    variables.len() == pointers.len()
        && variables.iter().zip(pointers).all(|(v, &p)| {
            match (example.slot_bindings.get(v), example.question.get(p)) {
                (Some(&g), Some(tok)) => example.question[g].surface == tok.surface,
                _ => false,
            }
        })
}

impl<T: Scalar> ParamTree<T> for SlotFillModel<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = self.embedder.tensors();
        out.extend([
            ("encoder.fwd.weight".to_string(), &self.fwd.weight),
            ("encoder.fwd.bias".to_string(), &self.fwd.bias),
            ("encoder.bwd.weight".to_string(), &self.bwd.weight),
            ("encoder.bwd.bias".to_string(), &self.bwd.bias),
            ("bridge.weight".to_string(), &self.bridge_weight),
            ("bridge.bias".to_string(), &self.bridge_bias),
            ("decoder.weight".to_string(), &self.decoder.weight),
            ("decoder.bias".to_string(), &self.decoder.bias),
            ("var_embed.table".to_string(), &self.var_table),
            ("attention.w1".to_string(), &self.w1),
            ("attention.w2".to_string(), &self.w2),
            ("attention.v".to_string(), &self.v),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = self.embedder.tensors_mut();
        out.extend([
            &mut self.fwd.weight,
            &mut self.fwd.bias,
            &mut self.bwd.weight,
            &mut self.bwd.bias,
            &mut self.bridge_weight,
            &mut self.bridge_bias,
            &mut self.decoder.weight,
            &mut self.decoder.bias,
            &mut self.var_table,
            &mut self.w1,
            &mut self.w2,
            &mut self.v,
        ]);
        out
    }
}

/// Examples paired with their template's variable list, dropping those
/// without variables.
fn with_variables(corpus: &Corpus) -> Vec<(&Example, Vec<String>)> {
    corpus
        .examples
        .iter()
        .filter_map(|e| {
            let vars = corpus.template(&e.template_id)?.variables.clone();
            (!vars.is_empty()).then_some((e, vars))
        })
        .collect()
}

/// Fraction of examples whose pointers all match gold surfaces, and mean
/// loss, over examples with at least one variable.
pub fn evaluate_slotfill<T: Scalar>(model: &SlotFillModel<T>, corpus: &Corpus) -> Result<Option<(f64, f64)>> {
    let items = with_variables(corpus);
    if items.is_empty() {
        return Ok(None);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (e, vars) in &items {
        let enc = model.encode_question(&e.question)?;
        let assignment = model.decode_from_states(&enc, vars);
        if pointers_match(e, vars, &assignment.pointers) {
            correct += 1;
        }
        loss += model.loss_from_states(&enc, vars, &gold_targets(e, vars)?)?;
    }
    let n = items.len() as f64;
    Ok(Some((loss / n, correct as f64 / n)))
}

/// Minibatch Adam on the teacher-forced loss with early stopping on dev
/// pointer accuracy (training loss when dev has no variables).
pub fn train_slotfill<T: Scalar>(
    train: &Corpus,
    dev: &Corpus,
    embedder: Embedder<T>,
    config: &SlotFillConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<(SlotFillModel<T>, Vec<EpochRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = train
        .templates
        .values()
        .flat_map(|t| t.variables.iter().cloned());
    let mut model = SlotFillModel::new(embedder, vars, config.clone(), &mut rng)?;
    let items = with_variables(train);
    let dev_usable = !with_variables(dev).is_empty();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut adam = Adam::new(optim.lr);
    let mut log = Vec::new();
    let mut failure = None;
    let last_train_loss = std::cell::Cell::new(0.0);
    early_stopping(
        "slotfill",
        &mut model,
        optim,
        |m, _| {
            if items.is_empty() {
                return 0.0;
            }
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(optim.batch_size.max(1)) {
                let mut grad = m.zeros_like();
                for &i in batch {
                    let (e, vars) = &items[i];
                    match m.example_loss(e, vars, Some(&mut grad)) {
                        Ok(l) => total += l,
                        Err(err) => failure = Some(err),
                    }
                }
                grad.scale_all(T::one() / T::of(batch.len() as f64));
                adam.step(m, &grad);
            }
            last_train_loss.set(total / items.len() as f64);
            last_train_loss.get()
        },
        |m| {
            if dev_usable {
                match evaluate_slotfill(m, dev) {
                    Ok(Some((loss, accuracy))) => DevScore {
                        accuracy,
                        loss,
                        observed: None,
                    },
                    _ => DevScore {
                        accuracy: 0.0,
                        loss: f64::INFINITY,
                        observed: None,
                    },
                }
            } else {
                DevScore {
                    accuracy: f64::NEG_INFINITY,
                    loss: last_train_loss.get(),
                    observed: None,
                }
            }
        },
        &mut log,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((model, log))
}

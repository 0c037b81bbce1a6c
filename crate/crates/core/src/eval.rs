//! Evaluation protocols, ablations and the per-stage accuracy breakdown.

use crate::corpus::{Corpus, Example};
use crate::error::{Error, Result};
use crate::pipeline::{Ablation, Engine};
use crate::scalar::Scalar;
use crate::slotfill::{pointers_match, DecodeMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    QuestionBased,
    QueryZeroShot,
    QueryOneShot,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub total: usize,
    /// Gold template among the retrieved support.
    pub csn_hits: usize,
    /// Correct template among `csn_hits`.
    pub mn_correct_given_csn: usize,
    pub template_correct: usize,
    /// Every variable of the gold template bound to a gold surface.
    pub slot_correct: usize,
    pub full_correct: usize,
    /// Examples consumed as one-shot exemplars rather than evaluated.
    pub adaptation_examples: usize,
    /// Test templates that contributed an exemplar but no evaluation item.
    pub adaptation_only_templates: usize,
}

impl StageCounts {
    fn add(&mut self, o: &StageCounts) {
        self.total += o.total;
        self.csn_hits += o.csn_hits;
        self.mn_correct_given_csn += o.mn_correct_given_csn;
        self.template_correct += o.template_correct;
        self.slot_correct += o.slot_correct;
        self.full_correct += o.full_correct;
        self.adaptation_examples += o.adaptation_examples;
        self.adaptation_only_templates += o.adaptation_only_templates;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub ablation: Ablation,
    pub full_accuracy: f64,
    pub template_accuracy: f64,
    pub csn_recall_at_n: f64,
    pub mn_accuracy_given_csn: f64,
    pub slot_accuracy: f64,
    pub counts: StageCounts,
}

fn frac(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn from_counts(protocol: Protocol, ablation: Ablation, counts: StageCounts) -> Self {
        Self {
            protocol,
            ablation,
            full_accuracy: frac(counts.full_correct, counts.total),
            template_accuracy: frac(counts.template_correct, counts.total),
            csn_recall_at_n: frac(counts.csn_hits, counts.total),
            mn_accuracy_given_csn: frac(counts.mn_correct_given_csn, counts.csn_hits),
            slot_accuracy: frac(counts.slot_correct, counts.total),
            counts,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Sums shard counts; shards must share protocol and ablation.
pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Protocol("no reports to merge".into()))?;
    let mut counts = StageCounts::default();
    for r in reports {
        if r.protocol != first.protocol || r.ablation != first.ablation {
            return Err(Error::Protocol("cannot merge reports of different protocols or ablations".into()));
        }
        counts.add(&r.counts);
    }
    Ok(EvalReport::from_counts(first.protocol, first.ablation, counts))
}

/// Per-example outcome, enough to recompute every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    pub gold_template: String,
    pub predicted_template: String,
    pub support: Vec<String>,
    pub sql: String,
    pub csn_hit: bool,
    pub template_correct: bool,
    pub slots_correct: bool,
    pub full_correct: bool,
}

/// Recomputes counts from records.
pub fn tally(records: &[EvalRecord]) -> StageCounts {
    let mut c = StageCounts {
        total: records.len(),
        ..StageCounts::default()
    };
    for r in records {
        c.csn_hits += r.csn_hit as usize;
        c.mn_correct_given_csn += (r.csn_hit && r.template_correct) as usize;
        c.template_correct += r.template_correct as usize;
        c.slot_correct += r.slots_correct as usize;
        c.full_correct += (r.template_correct && r.slots_correct) as usize;
    }
    c
}

fn check_protocol<T: Scalar>(engine: &Engine<T>, test: &Corpus, protocol: Protocol) -> Result<()> {
    let known: BTreeSet<&String> = engine.candidates().template_ids().collect();
    let used = test.used_template_ids();
    match protocol {
        Protocol::QuestionBased | Protocol::QueryOneShot => {
            if let Some(t) = used.iter().find(|t| !known.contains(t)) {
                return Err(Error::Protocol(format!(
                    "test template `{t}` has no exemplar in the candidate memory"
                )));
            }
        }
        Protocol::QueryZeroShot => {
            if let Some(t) = used.iter().find(|t| known.contains(t)) {
                return Err(Error::Protocol(format!(
                    "zero-shot test template `{t}` is already in the candidate memory"
                )));
            }
        }
    }
    Ok(())
}

fn record<T: Scalar>(engine: &Engine<T>, test: &Corpus, e: &Example, ablation: Ablation) -> Result<EvalRecord> {
    let g = engine.infer_with(&e.question, ablation)?;
    let gold = &test.templates[&e.template_id];
    let slots_correct = if g.template_id == e.template_id {
        pointers_match(e, &gold.variables, &g.trace.pointers)
    } else {
        let a = engine
            .slotfill()
            .decode_slots(&e.question, &gold.variables, DecodeMode::Greedy)?;
        pointers_match(e, &gold.variables, &a.pointers)
    };
    let template_correct = g.template_id == e.template_id;
    Ok(EvalRecord {
        question: e.text(),
        gold_template: e.template_id.clone(),
        predicted_template: g.template_id.clone(),
        csn_hit: g.trace.support.iter().any(|s| s.template_id == e.template_id),
        support: g.trace.support.into_iter().map(|s| s.template_id).collect(),
        sql: g.sql,
        template_correct,
        slots_correct,
        full_correct: template_correct && slots_correct,
    })
}

/// Runs every test example through the engine and keeps the per-example
/// records.
pub fn evaluate_traced<T: Scalar>(
    engine: &Engine<T>,
    test: &Corpus,
    protocol: Protocol,
    ablation: Ablation,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    check_protocol(engine, test, protocol)?;
    let records = test
        .examples
        .iter()
        .map(|e| record(engine, test, e, ablation))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_counts(protocol, ablation, tally(&records));
    Ok((report, records))
}

/// Slot correctness compares token surfaces of the gold template's
/// variables; an example is fully correct when its template and slots are.
pub fn evaluate<T: Scalar>(engine: &Engine<T>, test: &Corpus, protocol: Protocol, ablation: Ablation) -> Result<EvalReport> {
    Ok(evaluate_traced(engine, test, protocol, ablation)?.0)
}

pub fn run_ablation<T: Scalar>(engine: &Engine<T>, test: &Corpus, protocol: Protocol, mode: Ablation) -> Result<EvalReport> {
    evaluate(engine, test, protocol, mode)
}

/// The engine after one-shot adaptation on a query-based test corpus.
pub struct OneShotSetup<T> {
    pub engine: Engine<T>,
    /// Examples left for evaluation.
    pub remainder: Corpus,
    pub counts: StageCounts,
}

/// Samples one exemplar per test template (seeded), adapts the engine with
/// each, and keeps the rest for evaluation. Fails if any parameter file
/// hash changes.
pub fn one_shot_adapt<T: Scalar>(engine: &Engine<T>, test: &Corpus, seed: u64) -> Result<OneShotSetup<T>> {
    check_protocol(engine, test, Protocol::QueryZeroShot)?;
    let before = engine.param_hash()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapted = engine.clone();
    let mut keep = Vec::new();
    let mut counts = StageCounts::default();
    for (id, idx) in test.by_template() {
        let pick = idx[rng.gen_range(0..idx.len())];
        adapted = adapted.adapt(test.examples[pick].clone(), test.templates[id].clone(), false)?;
        counts.adaptation_examples += 1;
        if idx.len() == 1 {
            counts.adaptation_only_templates += 1;
        }
        keep.extend(idx.into_iter().filter(|&i| i != pick));
    }
    keep.sort_unstable();
    if adapted.param_hash()? != before {
        return Err(Error::Protocol("parameters changed during one-shot adaptation".into()));
    }
    Ok(OneShotSetup {
        engine: adapted,
        remainder: test.subset(format!("{}-eval", test.name), &keep),
        counts,
    })
}

pub fn run_one_shot_protocol<T: Scalar>(engine: &Engine<T>, test: &Corpus, seed: u64) -> Result<EvalReport> {
    run_one_shot_ablation(engine, test, seed, Ablation::Full)
}

pub fn run_one_shot_ablation<T: Scalar>(engine: &Engine<T>, test: &Corpus, seed: u64, mode: Ablation) -> Result<EvalReport> {
    let setup = one_shot_adapt(engine, test, seed)?;
    let report = evaluate(&setup.engine, &setup.remainder, Protocol::QueryOneShot, mode)?;
    let mut counts = report.counts;
    counts.adaptation_examples = setup.counts.adaptation_examples;
    counts.adaptation_only_templates = setup.counts.adaptation_only_templates;
    if engine.param_hash()? != setup.engine.param_hash()? {
        return Err(Error::Protocol("parameters changed during one-shot evaluation".into()));
    }
    Ok(EvalReport::from_counts(Protocol::QueryOneShot, mode, counts))
}

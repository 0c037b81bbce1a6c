//! End-to-end inference engine: retrieve a support set with the CSN, pick a
//! template with the matching network, bind its variables with the slot
//! filler and render the SQL.

use crate::checkpoint::{self, VectorCache};
use crate::corpus::{examples_to_jsonl, load_corpus, templates_to_jsonl, Corpus, Example, SqlTemplate, Token};
use crate::csn::{build_candidate_set, rank, CandidateSet, CsnModel, DEFAULT_TOP_N};
use crate::encoder::SentenceVector;
use crate::error::{Error, Result};
use crate::matchnet::{prediction_from_similarities, similarities, MatchNet, SupportItem, SupportSet};
use crate::scalar::Scalar;
use crate::slotfill::{DecodeMode, SlotFillModel};
use crate::sqlcheck;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    CsnOnly,
    MnOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Support-set size; truncated to the candidate count.
    pub n: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { n: DEFAULT_TOP_N }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub template_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub support: Vec<SupportEntry>,
    pub template_distribution: BTreeMap<String, f64>,
    pub pointers: Vec<usize>,
    pub slot_distributions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub template_id: String,
    pub slot_values: BTreeMap<String, String>,
    pub sql: String,
    pub trace: InferenceTrace,
}

/// Substitutes every `${v}` in the template with its value, wrapped in
/// single quotes (doubling embedded quotes) when the variable is quoted or
/// the value is not a bare number or identifier.
pub fn render(template: &SqlTemplate, slot_values: &BTreeMap<String, String>) -> Result<String> {
    if let Some(v) = template.variables.iter().find(|v| !slot_values.contains_key(*v)) {
        return Err(Error::IncompleteAssignment(v.clone()));
    }
    let mut out = String::with_capacity(template.sql.len());
    let mut rest = template.sql.as_str();
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Validation(format!("unterminated placeholder in `{}`", template.id)))?;
        let name = &after[..end];
        let value = slot_values
            .get(name)
            .ok_or_else(|| Error::IncompleteAssignment(name.to_string()))?;
        if template.quotes(name) || !sqlcheck::is_bare_operand(value) {
            out.push('\'');
            out.push_str(&value.replace('\'', "''"));
            out.push('\'');
        } else {
            out.push_str(value);
        }
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Frozen models plus the candidate memory. Cloning is cheap; nothing
/// mutates an engine in place.
#[derive(Debug, Clone)]
pub struct Engine<T> {
    csn: Arc<CsnModel<T>>,
    matchnet: Arc<MatchNet<T>>,
    slotfill: Arc<SlotFillModel<T>>,
    candidates: Arc<CandidateSet<T>>,
    /// Matching-network encodings of each candidate exemplar.
    support_vectors: Arc<BTreeMap<String, SentenceVector<T>>>,
    templates: Arc<BTreeMap<String, SqlTemplate>>,
    config: EngineConfig,
}

const MANIFEST: &str = "manifest.json";
const TEMPLATES_FILE: &str = "templates.jsonl";
const CANDIDATES_FILE: &str = "candidates.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    config: EngineConfig,
    templates: String,
    candidates: String,
    modules: BTreeMap<String, String>,
    hashes: BTreeMap<String, String>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(
        csn: CsnModel<T>,
        matchnet: MatchNet<T>,
        slotfill: SlotFillModel<T>,
        candidates: CandidateSet<T>,
        templates: BTreeMap<String, SqlTemplate>,
        config: EngineConfig,
    ) -> Result<Self> {
        if config.n == 0 {
            return Err(Error::Config("engine n must be positive".into()));
        }
        if let Some(id) = candidates.template_ids().find(|id| !templates.contains_key(*id)) {
            return Err(Error::Validation(format!("candidate `{id}` has no template")));
        }
        let mut support_vectors = BTreeMap::new();
        for e in candidates.exemplars() {
            support_vectors.insert(e.template_id.clone(), matchnet.encode(&e.question)?);
        }
        Ok(Self {
            csn: Arc::new(csn),
            matchnet: Arc::new(matchnet),
            slotfill: Arc::new(slotfill),
            candidates: Arc::new(candidates),
            support_vectors: Arc::new(support_vectors),
            templates: Arc::new(templates),
            config,
        })
    }

    /// Candidate memory of one uniformly sampled exemplar per training
    /// template; the template table is the training table.
    pub fn build(
        csn: CsnModel<T>,
        matchnet: MatchNet<T>,
        slotfill: SlotFillModel<T>,
        train: &Corpus,
        config: EngineConfig,
        seed: u64,
    ) -> Result<Self> {
        let candidates = build_candidate_set(&csn, train, seed)?;
        Self::new(csn, matchnet, slotfill, candidates, train.templates.clone(), config)
    }

    pub fn csn(&self) -> &CsnModel<T> {
        &self.csn
    }

    pub fn matchnet(&self) -> &MatchNet<T> {
        &self.matchnet
    }

    pub fn slotfill(&self) -> &SlotFillModel<T> {
        &self.slotfill
    }

    pub fn candidates(&self) -> &CandidateSet<T> {
        &self.candidates
    }

    pub fn templates(&self) -> &BTreeMap<String, SqlTemplate> {
        &self.templates
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn infer(&self, question: &[Token]) -> Result<GeneratedQuery> {
        self.infer_with(question, Ablation::Full)
    }

    pub fn infer_text(&self, question: &str) -> Result<GeneratedQuery> {
        self.infer(&crate::corpus::whitespace_tokens(question))
    }

    /// Inference under an ablation: `CsnOnly` takes the top retrieval,
    /// `MnOnly` classifies against the whole candidate memory.
    pub fn infer_with(&self, question: &[Token], ablation: Ablation) -> Result<GeneratedQuery> {
        if self.candidates.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let q = self.csn.features(question)?;
        let n = match ablation {
            Ablation::Full => self.config.n,
            Ablation::CsnOnly => 1,
            Ablation::MnOnly => self.candidates.len(),
        };
        let retrieved = rank(&q, &self.candidates, n)?;
        let support: Vec<SupportEntry> = retrieved
            .iter()
            .map(|r| SupportEntry {
                template_id: r.template_id.clone(),
                similarity: r.similarity.as_f64(),
            })
            .collect();
        let (template_id, template_distribution) = if ablation == Ablation::CsnOnly {
            let id = retrieved[0].template_id.clone();
            (id.clone(), BTreeMap::from([(id, 1.0)]))
        } else {
            let items = retrieved
                .iter()
                .map(|r| SupportItem {
                    question: r.exemplar.question.clone(),
                    template_id: r.template_id.clone(),
                    vector: self.support_vectors[&r.template_id].clone(),
                })
                .collect();
            let set = SupportSet::new(items)?;
            let mq = self.matchnet.encode(question)?;
            let p = prediction_from_similarities(&set, &similarities(&mq, &set));
            (p.predicted_id, p.distribution)
        };
        let template = &self.templates[&template_id];
        let assignment = self
            .slotfill
            .decode_slots(question, &template.variables, DecodeMode::Greedy)?;
        let slot_values: BTreeMap<String, String> = template
            .variables
            .iter()
            .zip(&assignment.pointers)
            .map(|(v, &p)| (v.clone(), question[p].surface.clone()))
            .collect();
        let sql = render(template, &slot_values)?;
        Ok(GeneratedQuery {
            template_id,
            slot_values,
            sql,
            trace: InferenceTrace {
                support,
                template_distribution,
                pointers: assignment.pointers,
                slot_distributions: assignment.distributions,
            },
        })
    }

    /// A new engine whose memory also holds `example` for `template`. The
    /// models are shared with `self` and never updated.
    pub fn adapt(&self, example: Example, template: SqlTemplate, replace: bool) -> Result<Self> {
        if let Some(existing) = self.templates.get(&template.id) {
            if !replace && *existing != template {
                return Err(Error::DuplicateTemplate(template.id.clone()));
            }
        }
        let candidates = self
            .candidates
            .insert(example.clone(), &template, &self.csn, replace)?;
        let mut support_vectors = (*self.support_vectors).clone();
        support_vectors.insert(template.id.clone(), self.matchnet.encode(&example.question)?);
        let mut templates = (*self.templates).clone();
        templates.insert(template.id.clone(), template);
        Ok(Self {
            csn: self.csn.clone(),
            matchnet: self.matchnet.clone(),
            slotfill: self.slotfill.clone(),
            candidates: Arc::new(candidates),
            support_vectors: Arc::new(support_vectors),
            templates: Arc::new(templates),
            config: self.config.clone(),
        })
    }

    fn module_bytes(&self) -> Result<[(&'static str, Vec<u8>); 3]> {
        Ok([
            ("csn", checkpoint::encode(&*self.csn)?),
            ("matchnet", checkpoint::encode(&*self.matchnet)?),
            ("slotfill", checkpoint::encode(&*self.slotfill)?),
        ])
    }

    /// SHA-256 of each serialized parameter file.
    pub fn param_hashes(&self) -> Result<BTreeMap<String, String>> {
        Ok(self
            .module_bytes()?
            .iter()
            .map(|(k, b)| (k.to_string(), checkpoint::sha256_hex(&[b])))
            .collect())
    }

    /// SHA-256 over all three serialized parameter files.
    pub fn param_hash(&self) -> Result<String> {
        let bytes = self.module_bytes()?;
        let chunks: Vec<&[u8]> = bytes.iter().map(|(_, b)| b.as_slice()).collect();
        Ok(checkpoint::sha256_hex(&chunks))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut modules = BTreeMap::new();
        let mut hashes = BTreeMap::new();
        for (name, bytes) in self.module_bytes()? {
            let file = format!("{name}.ckpt");
            let path = dir.join(&file);
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            hashes.insert(name.to_string(), checkpoint::sha256_hex(&[&bytes]));
            modules.insert(name.to_string(), file);
        }
        let write = |file: &str, text: String| -> Result<()> {
            let path = dir.join(file);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(TEMPLATES_FILE, templates_to_jsonl(self.templates.values()))?;
        let exemplars: Vec<Example> = self.candidates.exemplars().cloned().collect();
        write(CANDIDATES_FILE, examples_to_jsonl(&exemplars))?;
        let manifest = Manifest {
            version: checkpoint::FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            templates: TEMPLATES_FILE.into(),
            candidates: CANDIDATES_FILE.into(),
            modules,
            hashes,
        };
        write(MANIFEST, serde_json::to_string_pretty(&manifest)? + "\n")
    }

    /// Loads a saved engine, recomputing every cached candidate vector.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with(dir, &mut VectorCache::new())
    }

    pub fn load_with(dir: &Path, cache: &mut VectorCache) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        if !manifest_path.is_file() {
            return Err(Error::Integrity {
                missing: vec![MANIFEST.to_string()],
            });
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != checkpoint::FORMAT_VERSION {
            return Err(Error::Version {
                expected: checkpoint::FORMAT_VERSION,
                found: version,
            });
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        if manifest.dtype != T::DTYPE {
            return Err(Error::Dtype {
                expected: T::DTYPE.to_string(),
                found: manifest.dtype,
            });
        }
        let mut missing = Vec::new();
        for name in ["csn", "matchnet", "slotfill"] {
            match manifest.modules.get(name) {
                Some(f) if dir.join(f).is_file() => {}
                _ => missing.push(format!("{name}.*")),
            }
        }
        for (key, file) in [("templates", &manifest.templates), ("candidates", &manifest.candidates)] {
            if !dir.join(file).is_file() {
                missing.push(key.to_string());
            }
        }
        if !missing.is_empty() {
            return Err(Error::Integrity { missing });
        }
        let csn: CsnModel<T> = checkpoint::load(&dir.join(&manifest.modules["csn"]), cache)?;
        let matchnet: MatchNet<T> = checkpoint::load(&dir.join(&manifest.modules["matchnet"]), cache)?;
        let slotfill: SlotFillModel<T> = checkpoint::load(&dir.join(&manifest.modules["slotfill"]), cache)?;
        let memory = load_corpus(&dir.join(&manifest.candidates), &dir.join(&manifest.templates))?;
        let candidates = CandidateSet::from_exemplars(&csn, memory.examples)?;
        Self::new(csn, matchnet, slotfill, candidates, memory.templates, manifest.config)
    }
}

/// Scalar type of a saved engine, read from its manifest.
pub fn saved_dtype(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    raw.get("dtype")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Integrity {
            missing: vec!["dtype".into()],
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::embed::{Embedder, Vocab};
    use crate::encoder::{CnnEncoder, EncoderConfig};
    use crate::slotfill::SlotFillConfig;
    use crate::sqlcheck::check_sql;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn template(id: &str, sql: &str, vars: &[&str]) -> SqlTemplate {
        SqlTemplate::new(id, sql, vars.iter().map(|v| v.to_string()).collect()).unwrap()
    }

    #[test]
    fn render_rules() {
        let t = template("t", "SELECT * FROM city WHERE name = ${city0}", &["city0"]);
        let vals = BTreeMap::from([("city0".to_string(), "boston".to_string())]);
        assert_eq!(render(&t, &vals).unwrap(), "SELECT * FROM city WHERE name = 'boston'");
        let raw = t.clone().with_quote("city0", false);
        assert_eq!(render(&raw, &vals).unwrap(), "SELECT * FROM city WHERE name = boston");
        let odd = BTreeMap::from([("city0".to_string(), "o'hare".to_string())]);
        assert_eq!(render(&t, &odd).unwrap(), "SELECT * FROM city WHERE name = 'o''hare'");
        assert!(check_sql(&render(&t, &odd).unwrap()).is_ok());
        let none = template("z", "SELECT a FROM b", &[]);
        assert_eq!(render(&none, &BTreeMap::new()).unwrap(), "SELECT a FROM b");
        assert!(matches!(render(&t, &BTreeMap::new()), Err(Error::IncompleteAssignment(v)) if v == "city0"));
        let injected = BTreeMap::from([("city0".to_string(), "${city0}".to_string())]);
        assert_eq!(render(&raw, &injected).unwrap(), "SELECT * FROM city WHERE name = '${city0}'");
        for (v, want) in [("1998", "1998"), ("?", "'?'"), ("and", "'and'"), ("a b", "'a b'")] {
            let vals = BTreeMap::from([("city0".to_string(), v.to_string())]);
            let sql = render(&raw, &vals).unwrap();
            assert_eq!(sql, format!("SELECT * FROM city WHERE name = {want}"));
            assert!(check_sql(&sql).is_ok());
        }
    }

    fn tiny_engine(templates: Vec<SqlTemplate>, examples: Vec<Example>) -> (Engine<f64>, Corpus) {
        let c = Corpus::new("c", templates, examples).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = Arc::new(Vocab::build(&c));
        let embedder = Embedder::trainable(vocab, 6, &mut rng);
        let encoder = CnnEncoder::new(EncoderConfig::new(vec![1, 2], 4, 6), &mut rng).unwrap();
        let labels: Vec<String> = c.templates.keys().cloned().collect();
        let csn = CsnModel::new(Backbone { embedder: embedder.clone(), encoder }, labels, &mut rng);
        let mn = MatchNet::from_csn(&csn);
        let cfg = SlotFillConfig {
            hidden: 3,
            var_dim: 2,
            attention_dim: 3,
        };
        let vars = c.templates.values().flat_map(|t| t.variables.clone());
        let sf = SlotFillModel::new(embedder, vars, cfg, &mut rng).unwrap();
        (Engine::build(csn, mn, sf, &c, EngineConfig::default(), 0).unwrap(), c)
    }

    #[test]
    fn single_zero_variable_template_is_forced() {
        let t = template("only", "SELECT a FROM b", &[]);
        let (e, _) = tiny_engine(vec![t], vec![Example::new(&["list", "a"], "only", &[])]);
        let g = e.infer(&crate::corpus::tokens(&["anything", "at", "all", "list"])).unwrap();
        assert_eq!(g.sql, "SELECT a FROM b");
        assert_eq!(g.template_id, "only");
        assert!(g.slot_values.is_empty());
    }

    #[test]
    fn exemplar_question_predicts_its_template() {
        let ts = vec![
            template("a", "SELECT x FROM t WHERE y = ${y0}", &["y0"]),
            template("b", "SELECT z FROM u", &[]),
            template("c", "SELECT w FROM v", &[]),
        ];
        let ex = vec![
            Example::new(&["show", "x", "for", "boston"], "a", &[("y0", 3)]),
            Example::new(&["list", "every", "z"], "b", &[]),
            Example::new(&["count", "w", "rows", "now"], "c", &[]),
        ];
        let (e, c) = tiny_engine(ts, ex);
        for ex in &c.examples {
            let g = e.infer(&ex.question).unwrap();
            assert_eq!(g.template_id, ex.template_id);
            assert_eq!(g.trace.support[0].template_id, ex.template_id);
            assert!((g.trace.template_distribution.values().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(!g.sql.contains("${"));
        }
        let csn_only = e.infer_with(&c.examples[1].question, Ablation::CsnOnly).unwrap();
        assert_eq!(csn_only.template_id, "b");
        assert_eq!(csn_only.trace.support.len(), 1);
        let mn_only = e.infer_with(&c.examples[2].question, Ablation::MnOnly).unwrap();
        assert_eq!(mn_only.trace.support.len(), 3);
    }

    #[test]
    fn adapt_is_copy_on_write_and_hash_stable() {
        let ts = vec![template("a", "SELECT x FROM t", &[]), template("b", "SELECT z FROM u", &[])];
        let ex = vec![Example::new(&["show", "x"], "a", &[]), Example::new(&["list", "z"], "b", &[])];
        let (e, _) = tiny_engine(ts, ex);
        let before = e.param_hash().unwrap();
        let new_t = template("n", "SELECT q FROM r WHERE s = ${s0}", &["s0"]);
        let new_ex = Example::new(&["find", "q", "for", "dallas"], "n", &[("s0", 3)]);
        let adapted = e.adapt(new_ex.clone(), new_t.clone(), false).unwrap();
        assert_eq!(adapted.param_hash().unwrap(), before);
        assert_eq!(e.candidates().len(), 2);
        assert_eq!(adapted.candidates().len(), 3);
        let g = adapted.infer(&new_ex.question).unwrap();
        assert_eq!(g.template_id, "n");
        assert!(matches!(adapted.adapt(new_ex, new_t, false), Err(Error::DuplicateTemplate(_))));
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let ts = vec![
            template("a", "SELECT x FROM t WHERE y = ${y0}", &["y0"]),
            template("b", "SELECT z FROM u", &[]),
        ];
        let ex = vec![
            Example::new(&["show", "x", "for", "boston"], "a", &[("y0", 3)]),
            Example::new(&["list", "z"], "b", &[]),
        ];
        let (e, c) = tiny_engine(ts, ex);
        let dir = tempfile::tempdir().unwrap();
        e.save(dir.path()).unwrap();
        let back = Engine::<f64>::load(dir.path()).unwrap();
        assert_eq!(back.param_hash().unwrap(), e.param_hash().unwrap());
        for ex in &c.examples {
            assert_eq!(back.infer(&ex.question).unwrap(), e.infer(&ex.question).unwrap());
        }
        assert!(matches!(Engine::<f32>::load(dir.path()), Err(Error::Dtype { .. })));
        assert_eq!(saved_dtype(dir.path()).unwrap(), "f64");
        assert_eq!(checkpoint::peek_dtype(&dir.path().join("csn.ckpt")).unwrap(), "f64");

        std::fs::remove_file(dir.path().join("slotfill.ckpt")).unwrap();
        match Engine::<f64>::load(dir.path()) {
            Err(Error::Integrity { missing }) => assert_eq!(missing, vec!["slotfill.*".to_string()]),
            other => panic!("expected integrity error, got {other:?}"),
        }
        let m = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&m).unwrap().replace("\"version\": 1", "\"version\": 2");
        std::fs::write(&m, text).unwrap();
        assert!(matches!(Engine::<f64>::load(dir.path()), Err(Error::Version { expected: 1, found: 2 })));
    }
}

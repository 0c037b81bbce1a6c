//! Data model for questions, SQL templates and corpora, plus the JSONL
//! on-disk format.
//!
//! Examples live in one JSONL file, one object per line:
//!
//! ```text
//! {"question": ["list","all","flights","from","boston"], "template_id": "t042", "bindings": {"city0": 4}}
//! ```
//!
//! Templates live in a sidecar JSONL table:
//!
//! ```text
//! {"id": "t042", "sql": "SELECT ... WHERE city.name = ${city0}", "variables": ["city0"]}
//! ```
//!
//! An optional `"quote": {"city0": false}` map turns off single-quote
//! wrapping for numeric placeholders at render time.

mod split;
mod synth;

pub use split::{split_query_based, split_question_based, SplitBundle, SplitMode};
pub use synth::{generate_synthetic, BenchmarkSpec, SynthSpec};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub surface: String,
    pub position: usize,
}

/// Builds positioned tokens from already-tokenized surfaces.
pub fn tokens<S: AsRef<str>>(surfaces: &[S]) -> Vec<Token> {
    surfaces
        .iter()
        .enumerate()
        .map(|(position, s)| Token {
            surface: s.as_ref().to_string(),
            position,
        })
        .collect()
}

/// Splits pre-tokenized text on whitespace.
pub fn whitespace_tokens(text: &str) -> Vec<Token> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    tokens(&parts)
}

pub fn question_text(question: &[Token]) -> String {
    question
        .iter()
        .map(|t| t.surface.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlTemplate {
    pub id: String,
    pub sql: String,
    pub variables: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub quote: BTreeMap<String, bool>,
}

impl SqlTemplate {
    pub fn new(id: impl Into<String>, sql: impl Into<String>, variables: Vec<String>) -> Result<Self> {
        let t = Self {
            id: id.into(),
            sql: sql.into(),
            variables,
            quote: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_quote(mut self, variable: &str, quote: bool) -> Self {
        self.quote.insert(variable.to_string(), quote);
        self
    }

    /// Whether values for `variable` are wrapped in single quotes.
    pub fn quotes(&self, variable: &str) -> bool {
        self.quote.get(variable).copied().unwrap_or(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("template id is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for v in &self.variables {
            if !seen.insert(v.as_str()) {
                return Err(Error::Validation(format!(
                    "template `{}` declares variable `{v}` twice",
                    self.id
                )));
            }
        }
        let found = placeholders(&self.sql)
            .map_err(|m| Error::Validation(format!("template `{}`: {m}", self.id)))?;
        let found: BTreeSet<&str> = found.iter().map(String::as_str).collect();
        for v in &seen {
            if !found.contains(v) {
                return Err(Error::Validation(format!(
                    "template `{}` variable `{v}` has no placeholder",
                    self.id
                )));
            }
        }
        for p in &found {
            if !seen.contains(p) {
                return Err(Error::Validation(format!(
                    "template `{}` placeholder `${{{p}}}` is not a declared variable",
                    self.id
                )));
            }
        }
        for k in self.quote.keys() {
            if !seen.contains(k.as_str()) {
                return Err(Error::Validation(format!(
                    "template `{}` sets quoting for unknown variable `{k}`",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Names of every `${name}` placeholder in order of appearance.
pub fn placeholders(sql: &str) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut rest = sql;
    while let Some(start) = rest.find("${") {
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| "unterminated placeholder".to_string())?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("invalid placeholder name `{name}`"));
        }
        out.push(name.to_string());
        rest = &after[end + 1..];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub question: Vec<Token>,
    pub template_id: String,
    pub slot_bindings: BTreeMap<String, usize>,
}

impl Example {
    pub fn new<S: AsRef<str>>(
        question: &[S],
        template_id: impl Into<String>,
        bindings: &[(&str, usize)],
    ) -> Self {
        Self {
            question: tokens(question),
            template_id: template_id.into(),
            slot_bindings: bindings.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn text(&self) -> String {
        question_text(&self.question)
    }

    /// Surface bound to each variable, in the template's declared order.
    pub fn bound_surfaces(&self, template: &SqlTemplate) -> Vec<String> {
        template
            .variables
            .iter()
            .map(|v| self.question[self.slot_bindings[v]].surface.clone())
            .collect()
    }

    pub fn validate(&self, template: &SqlTemplate) -> Result<()> {
        if self.question.is_empty() {
            return Err(Error::Validation("question has no tokens".into()));
        }
        for (i, t) in self.question.iter().enumerate() {
            if t.surface.is_empty() {
                return Err(Error::Validation(format!("token {i} is empty")));
            }
            if t.position != i {
                return Err(Error::Validation(format!(
                    "token position {} at index {i}",
                    t.position
                )));
            }
        }
        let declared: BTreeSet<&str> = template.variables.iter().map(String::as_str).collect();
        let bound: BTreeSet<&str> = self.slot_bindings.keys().map(String::as_str).collect();
        if declared != bound {
            return Err(Error::Validation(format!(
                "bindings {:?} do not match variables {:?} of template `{}`",
                bound, declared, template.id
            )));
        }
        for (var, &pos) in &self.slot_bindings {
            if pos >= self.question.len() {
                return Err(Error::Validation(format!(
                    "binding `{var}` points to position {pos} of a {}-token question",
                    self.question.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub templates: BTreeMap<String, SqlTemplate>,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        templates: impl IntoIterator<Item = SqlTemplate>,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let templates: BTreeMap<String, SqlTemplate> =
            templates.into_iter().map(|t| (t.id.clone(), t)).collect();
        let corpus = Self {
            name: name.into(),
            templates,
            examples,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.templates.values() {
            t.validate()?;
        }
        for (i, e) in self.examples.iter().enumerate() {
            let t = self.templates.get(&e.template_id).ok_or_else(|| {
                Error::DanglingTemplate {
                    line: i + 1,
                    template_id: e.template_id.clone(),
                }
            })?;
            e.validate(t)?;
        }
        Ok(())
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn template(&self, id: &str) -> Option<&SqlTemplate> {
        self.templates.get(id)
    }

    /// Template ids that have at least one example.
    pub fn used_template_ids(&self) -> BTreeSet<String> {
        self.examples.iter().map(|e| e.template_id.clone()).collect()
    }

    /// Example indices grouped by template id.
    pub fn by_template(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            map.entry(e.template_id.as_str()).or_default().push(i);
        }
        map
    }

    /// Corpus holding the given examples and only the templates they use.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Corpus {
        let examples: Vec<Example> = indices.iter().map(|&i| self.examples[i].clone()).collect();
        let used: BTreeSet<&str> = examples.iter().map(|e| e.template_id.as_str()).collect();
        let templates = self
            .templates
            .iter()
            .filter(|(id, _)| used.contains(id.as_str()))
            .map(|(id, t)| (id.clone(), t.clone()))
            .collect();
        Corpus {
            name: name.into(),
            templates,
            examples,
        }
    }

    pub fn mean_variables_per_template(&self) -> f64 {
        if self.templates.is_empty() {
            return 0.0;
        }
        let total: usize = self.templates.values().map(|t| t.variables.len()).sum();
        total as f64 / self.templates.len() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    question: Vec<String>,
    template_id: String,
    #[serde(default)]
    bindings: BTreeMap<String, BindingValue>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BindingValue {
    Single(usize),
    Span(Vec<usize>),
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

pub fn load_templates(path: &Path) -> Result<Vec<SqlTemplate>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (line, text) in read_lines(path)? {
        let t: SqlTemplate = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: file_label(path),
            line,
            message: e.to_string(),
        })?;
        t.validate()?;
        if !seen.insert(t.id.clone()) {
            return Err(Error::Parse {
                file: file_label(path),
                line,
                message: format!("duplicate template id `{}`", t.id),
            });
        }
        out.push(t);
    }
    Ok(out)
}

pub fn parse_example_line(text: &str) -> std::result::Result<Example, String> {
    let raw: ExampleLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut slot_bindings = BTreeMap::new();
    for (var, value) in raw.bindings {
        let pos = match value {
            BindingValue::Single(p) => p,
            BindingValue::Span(ps) if ps.len() == 1 => ps[0],
            BindingValue::Span(ps) => {
                return Err(format!(
                    "variable `{var}` is bound to {} tokens; only single-token values are supported",
                    ps.len()
                ))
            }
        };
        slot_bindings.insert(var, pos);
    }
    Ok(Example {
        question: tokens(&raw.question),
        template_id: raw.template_id,
        slot_bindings,
    })
}

/// Loads a corpus from an examples file and its template table.
pub fn load_corpus(examples_path: &Path, templates_path: &Path) -> Result<Corpus> {
    let templates: BTreeMap<String, SqlTemplate> = load_templates(templates_path)?
        .into_iter()
        .map(|t| (t.id.clone(), t))
        .collect();
    let mut examples = Vec::new();
    for (line, text) in read_lines(examples_path)? {
        let ex = parse_example_line(&text).map_err(|message| Error::Parse {
            file: file_label(examples_path),
            line,
            message,
        })?;
        let template = templates
            .get(&ex.template_id)
            .ok_or_else(|| Error::DanglingTemplate {
                line,
                template_id: ex.template_id.clone(),
            })?;
        ex.validate(template).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
            other => other,
        })?;
        examples.push(ex);
    }
    let name = examples_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Corpus {
        name,
        templates,
        examples,
    })
}

pub fn example_to_json(e: &Example) -> String {
    let line = ExampleLine {
        question: e.question.iter().map(|t| t.surface.clone()).collect(),
        template_id: e.template_id.clone(),
        bindings: e
            .slot_bindings
            .iter()
            .map(|(k, &v)| (k.clone(), BindingValue::Single(v)))
            .collect(),
    };
    serde_json::to_string(&line).expect("example serializes")
}

pub fn examples_to_jsonl(examples: &[Example]) -> String {
    let mut out = String::new();
    for e in examples {
        let _ = writeln!(out, "{}", example_to_json(e));
    }
    out
}

pub fn templates_to_jsonl<'a>(templates: impl IntoIterator<Item = &'a SqlTemplate>) -> String {
    let mut out = String::new();
    for t in templates {
        let _ = writeln!(out, "{}", serde_json::to_string(t).expect("template serializes"));
    }
    out
}

pub fn write_corpus(corpus: &Corpus, examples_path: &Path, templates_path: &Path) -> Result<()> {
    std::fs::write(examples_path, examples_to_jsonl(&corpus.examples))
        .map_err(|e| Error::io(examples_path, e))?;
    std::fs::write(templates_path, templates_to_jsonl(corpus.templates.values()))
        .map_err(|e| Error::io(templates_path, e))?;
    Ok(())
}

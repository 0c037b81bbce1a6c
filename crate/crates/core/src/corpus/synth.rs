//! Desk-scale synthetic corpus: SQL skeletons drawn from a small fixed
//! grammar over an invented schema, with paraphrased questions built from
//! synonym choice and clause reordering.

use super::split::{SplitBundle, SplitMode};
use super::{tokens, Corpus, Example, SqlTemplate};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

// Words that may not be used as invented lexemes.
const RESERVED: &[&str] = &[
    "like", "none", "more", "some", "same", "make", "take", "have", "give", "made", "gave",
    "note", "rate", "sale", "time", "data", "date", "desc", "limit", "case", "else",
];

/// Probability that a template gains each potential variable; with three
/// potential variables this gives 1.8 variables per template on average.
const VARIABLE_RATE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_templates: usize,
    pub paraphrases_per_template: usize,
    pub n_vars_max: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

pub fn generate_synthetic(
    n_templates: usize,
    paraphrases_per_template: usize,
    n_vars_max: usize,
    vocab_size: usize,
    seed: u64,
) -> Result<Corpus> {
    SynthSpec {
        n_templates,
        paraphrases_per_template,
        n_vars_max,
        vocab_size,
        seed,
    }
    .generate()
}

/// Query-based benchmark layout: disjoint train, dev and test template
/// pools drawn from one generated schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub train_templates: usize,
    pub train_paraphrases: usize,
    pub dev_templates: usize,
    pub dev_paraphrases: usize,
    pub test_templates: usize,
    pub test_paraphrases: usize,
    pub n_vars_max: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl BenchmarkSpec {
    /// 40 training templates with 20 paraphrases each and 10 unseen test
    /// templates with 10 each.
    pub fn one_shot(seed: u64) -> Self {
        Self {
            train_templates: 40,
            train_paraphrases: 20,
            dev_templates: 5,
            dev_paraphrases: 10,
            test_templates: 10,
            test_paraphrases: 10,
            n_vars_max: 3,
            vocab_size: 200,
            seed,
        }
    }

    pub fn generate(&self) -> Result<SplitBundle> {
        let total = self.train_templates + self.dev_templates + self.test_templates;
        let per = self
            .train_paraphrases
            .max(self.dev_paraphrases)
            .max(self.test_paraphrases);
        let corpus = generate_synthetic(total, per, self.n_vars_max, self.vocab_size, self.seed)?;
        let groups = corpus.by_template();
        let mut members: [Vec<usize>; 3] = Default::default();
        let quota = [
            (self.train_templates, self.train_paraphrases),
            (self.dev_templates, self.dev_paraphrases),
            (self.test_templates, self.test_paraphrases),
        ];
        let mut ids = groups.values();
        for (member, &(count, keep)) in members.iter_mut().zip(quota.iter()) {
            for idx in ids.by_ref().take(count) {
                member.extend(idx.iter().take(keep));
            }
        }
        let [train, dev, test] = members;
        let bundle = SplitBundle {
            train: corpus.subset(format!("{}.train", corpus.name), &train),
            dev: corpus.subset(format!("{}.dev", corpus.name), &dev),
            test: corpus.subset(format!("{}.test", corpus.name), &test),
            mode: SplitMode::QueryBased,
        };
        bundle.check()?;
        Ok(bundle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Agg {
    List,
    Count,
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct TemplateKey {
    agg: Agg,
    table: usize,
    target: Option<usize>,
    filters: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Column {
    words: [String; 2],
    numeric: bool,
    /// `None` for filter attributes, which every table carries.
    table: Option<usize>,
}

#[derive(Debug)]
struct Schema {
    tables: Vec<[String; 2]>,
    columns: Vec<Column>,
    text_values: Vec<String>,
    number_values: Vec<String>,
}

impl Schema {
    fn columns_of(&self, table: usize) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&c| self.columns[c].table == Some(table))
            .collect()
    }

    fn attributes(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&c| self.columns[c].table.is_none())
            .collect()
    }
}

fn lexemes(rng: &mut ChaCha8Rng, count: usize) -> Vec<String> {
    let mut all = Vec::new();
    for &c1 in CONSONANTS {
        for &v1 in VOWELS {
            for &c2 in CONSONANTS {
                for &v2 in VOWELS {
                    let w: String = [c1, v1, c2, v2].iter().map(|&b| b as char).collect();
                    if !RESERVED.contains(&w.as_str()) {
                        all.push(w);
                    }
                }
            }
        }
    }
    all.shuffle(rng);
    all.truncate(count);
    all
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

fn subsets_up_to(n: usize, max: usize) -> u128 {
    (0..=max.min(n)).map(|k| binomial(n, k)).sum()
}

impl SynthSpec {
    fn build_schema(&self, rng: &mut ChaCha8Rng) -> Result<Schema> {
        let n_values = if self.n_vars_max > 0 {
            (self.vocab_size / 4).max(4)
        } else {
            0
        };
        let concepts = self.vocab_size.saturating_sub(n_values) / 2;
        if concepts < 2 {
            return Err(Error::GenerationCapacity {
                requested: self.n_templates,
                capacity: 0,
            });
        }
        let n_attrs = if self.n_vars_max > 0 { (concepts / 6).max(1) } else { 0 };
        let n_tables = ((concepts - n_attrs) / 8).max(1);
        let n_cols = concepts - n_attrs - n_tables;
        let n_text_values = n_values - n_values / 2;
        let words = lexemes(rng, concepts * 2 + n_text_values);
        let mut it = words.into_iter();
        let mut pair = || [it.next().unwrap(), it.next().unwrap()];
        let tables = (0..n_tables).map(|_| pair()).collect();
        let mut columns: Vec<Column> = (0..n_cols)
            .map(|c| Column {
                words: pair(),
                numeric: c % 3 == 2,
                table: Some(c % n_tables),
            })
            .collect();
        columns.extend((0..n_attrs).map(|a| Column {
            words: pair(),
            numeric: a % 2 == 1,
            table: None,
        }));
        let text_values = it.collect();
        let number_values = (0..n_values / 2).map(|i| (1900 + 7 * i).to_string()).collect();
        Ok(Schema {
            tables,
            columns,
            text_values,
            number_values,
        })
    }

    fn capacity(&self, schema: &Schema) -> u128 {
        let mut total = 0u128;
        for t in 0..schema.tables.len() {
            let cols = schema.columns_of(t);
            let c = cols.len();
            let c_num = cols.iter().filter(|&&i| schema.columns[i].numeric).count() as u128;
            total += 1 + c as u128 + 2 * c_num;
        }
        total * subsets_up_to(schema.attributes().len(), self.n_vars_max)
    }

    fn sample_key(&self, schema: &Schema, rng: &mut ChaCha8Rng) -> TemplateKey {
        let table = rng.gen_range(0..schema.tables.len());
        let cols = schema.columns_of(table);
        let numeric: Vec<usize> = cols
            .iter()
            .copied()
            .filter(|&c| schema.columns[c].numeric)
            .collect();
        let mut aggs = vec![Agg::Count];
        if !cols.is_empty() {
            aggs.push(Agg::List);
        }
        if !numeric.is_empty() {
            aggs.extend([Agg::Max, Agg::Min]);
        }
        let agg = *aggs.choose(rng).unwrap();
        let target = match agg {
            Agg::Count => None,
            Agg::List => Some(*cols.choose(rng).unwrap()),
            Agg::Max | Agg::Min => Some(*numeric.choose(rng).unwrap()),
        };
        let pool = schema.attributes();
        let k = (0..self.n_vars_max)
            .filter(|_| rng.gen_bool(VARIABLE_RATE))
            .count()
            .min(pool.len());
        let mut filters: Vec<usize> = pool.choose_multiple(rng, k).copied().collect();
        filters.sort_unstable();
        TemplateKey {
            agg,
            table,
            target,
            filters,
        }
    }

    fn enumerate_keys(&self, schema: &Schema) -> Vec<TemplateKey> {
        fn subsets(pool: &[usize], max: usize) -> Vec<Vec<usize>> {
            let mut out = vec![vec![]];
            for &c in pool {
                let extra: Vec<Vec<usize>> = out
                    .iter()
                    .filter(|s| s.len() < max)
                    .map(|s| {
                        let mut s = s.clone();
                        s.push(c);
                        s
                    })
                    .collect();
                out.extend(extra);
            }
            out
        }
        let pool = schema.attributes();
        let mut keys = Vec::new();
        for table in 0..schema.tables.len() {
            let cols = schema.columns_of(table);
            let mut shapes: Vec<(Agg, Option<usize>)> = vec![(Agg::Count, None)];
            for &c in &cols {
                shapes.push((Agg::List, Some(c)));
                if schema.columns[c].numeric {
                    shapes.push((Agg::Max, Some(c)));
                    shapes.push((Agg::Min, Some(c)));
                }
            }
            for (agg, target) in shapes {
                for filters in subsets(&pool, self.n_vars_max) {
                    keys.push(TemplateKey {
                        agg,
                        table,
                        target,
                        filters,
                    });
                }
            }
        }
        keys
    }

    fn template(&self, schema: &Schema, key: &TemplateKey, id: String) -> SqlTemplate {
        let table = &schema.tables[key.table][0];
        let col = |c: usize| format!("{table}.{}", schema.columns[c].words[0]);
        let mut sql = match key.agg {
            Agg::List => format!("SELECT {} FROM {table}", col(key.target.unwrap())),
            Agg::Count => format!("SELECT COUNT(*) FROM {table}"),
            Agg::Max => format!("SELECT MAX({}) FROM {table}", col(key.target.unwrap())),
            Agg::Min => format!("SELECT MIN({}) FROM {table}", col(key.target.unwrap())),
        };
        let mut variables = Vec::new();
        let mut quote = BTreeMap::new();
        for (i, &f) in key.filters.iter().enumerate() {
            let var = format!("{}0", schema.columns[f].words[0]);
            sql.push_str(if i == 0 { " WHERE " } else { " AND " });
            sql.push_str(&format!("{} = ${{{var}}}", col(f)));
            if schema.columns[f].numeric {
                quote.insert(var.clone(), false);
            }
            variables.push(var);
        }
        SqlTemplate {
            id,
            sql,
            variables,
            quote,
        }
    }

    fn question(
        &self,
        schema: &Schema,
        key: &TemplateKey,
        template: &SqlTemplate,
        rng: &mut ChaCha8Rng,
    ) -> Example {
        let syn = |w: &[String; 2], rng: &mut ChaCha8Rng| w[rng.gen_range(0..2)].clone();
        let pick = |opts: &[&[&str]], rng: &mut ChaCha8Rng| -> Vec<String> {
            opts[rng.gen_range(0..opts.len())]
                .iter()
                .map(|s| s.to_string())
                .collect()
        };
        let table = syn(&schema.tables[key.table], rng);
        let mut main: Vec<String> = match key.agg {
            Agg::List => {
                let mut m = pick(
                    &[&["list", "the"], &["show", "me", "the"], &["what", "are", "the"], &["give", "me", "the"]],
                    rng,
                );
                m.push(syn(&schema.columns[key.target.unwrap()].words, rng));
                m.extend(pick(&[&["of"], &["for"]], rng));
                m.push(table);
                m
            }
            Agg::Count => {
                let mut m = pick(&[&["how", "many"], &["count", "the"], &["number", "of"]], rng);
                m.push(table);
                m
            }
            Agg::Max | Agg::Min => {
                let mut m = pick(&[&["what", "is", "the"], &["find", "the"], &["show", "the"]], rng);
                let adj: &[&[&str]] = if key.agg == Agg::Max {
                    &[&["highest"], &["maximum"], &["largest"]]
                } else {
                    &[&["lowest"], &["minimum"], &["smallest"]]
                };
                m.extend(pick(adj, rng));
                m.push(syn(&schema.columns[key.target.unwrap()].words, rng));
                m.extend(pick(&[&["of"], &["among"]], rng));
                m.push(table);
                m
            }
        };

        // (variable, value) pairs in question order
        let mut order: Vec<usize> = (0..key.filters.len()).collect();
        order.shuffle(rng);
        let mut filter_words: Vec<(String, bool)> = Vec::new();
        for (j, &fi) in order.iter().enumerate() {
            let column = &schema.columns[key.filters[fi]];
            let value = if column.numeric {
                schema.number_values.choose(rng).unwrap().clone()
            } else {
                schema.text_values.choose(rng).unwrap().clone()
            };
            let conn: &[&[&str]] = if j == 0 {
                &[&["where"], &["with"], &["whose"]]
            } else {
                &[&["and"]]
            };
            filter_words.extend(pick(conn, rng).into_iter().map(|w| (w, false)));
            let colw = syn(&column.words, rng);
            match rng.gen_range(0..3) {
                0 => filter_words.extend([(colw, false), ("is".into(), false)]),
                1 => filter_words.extend([(colw, false), ("equal".into(), false), ("to".into(), false)]),
                _ => filter_words.push((colw, false)),
            }
            filter_words.push((format!("{fi}\u{0}{value}"), true));
        }

        let mut words: Vec<(String, bool)> = Vec::new();
        if rng.gen_bool(0.2) {
            words.push(("please".into(), false));
        }
        let main: Vec<(String, bool)> = main.drain(..).map(|w| (w, false)).collect();
        if !filter_words.is_empty() && rng.gen_bool(0.3) {
            words.push(("for".into(), false));
            words.extend(filter_words.into_iter().skip(1));
            words.push((",".into(), false));
            words.extend(main);
        } else {
            words.extend(main);
            words.extend(filter_words);
        }
        if rng.gen_bool(0.3) {
            words.push(("?".into(), false));
        }

        let mut surfaces = Vec::with_capacity(words.len());
        let mut bindings = BTreeMap::new();
        for (pos, (w, is_value)) in words.into_iter().enumerate() {
            if is_value {
                let (fi, value) = w.split_once('\u{0}').unwrap();
                let fi: usize = fi.parse().unwrap();
                bindings.insert(template.variables[fi].clone(), pos);
                surfaces.push(value.to_string());
            } else {
                surfaces.push(w);
            }
        }
        Example {
            question: tokens(&surfaces),
            template_id: template.id.clone(),
            slot_bindings: bindings,
        }
    }

    pub fn generate(&self) -> Result<Corpus> {
        if self.n_templates < 1 || self.paraphrases_per_template < 1 || self.vocab_size < 1 {
            return Err(Error::Validation(
                "template, paraphrase and vocabulary counts must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let schema = self.build_schema(&mut rng)?;
        let capacity = self.capacity(&schema);
        if capacity < self.n_templates as u128 {
            return Err(Error::GenerationCapacity {
                requested: self.n_templates,
                capacity: capacity.min(usize::MAX as u128) as usize,
            });
        }

        let keys: Vec<TemplateKey> = if capacity <= 4 * self.n_templates as u128 {
            let mut all = self.enumerate_keys(&schema);
            all.shuffle(&mut rng);
            all.truncate(self.n_templates);
            all
        } else {
            let mut seen = BTreeSet::new();
            let mut keys = Vec::new();
            while keys.len() < self.n_templates {
                let k = self.sample_key(&schema, &mut rng);
                if seen.insert(k.clone()) {
                    keys.push(k);
                }
            }
            keys
        };

        let width = (self.n_templates.max(2) - 1).to_string().len().max(3);
        let mut templates = Vec::new();
        let mut examples = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            let t = self.template(&schema, key, format!("t{i:0width$}"));
            for _ in 0..self.paraphrases_per_template {
                examples.push(self.question(&schema, key, &t, &mut rng));
            }
            templates.push(t);
        }
        Corpus::new(format!("synth-{}", self.seed), templates, examples)
    }
}

use super::Corpus;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    QuestionBased,
    QueryBased,
}

#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
    pub mode: SplitMode,
}

impl SplitBundle {
    /// Wraps externally supplied split files, checking the mode invariant.
    pub fn from_parts(train: Corpus, dev: Corpus, test: Corpus, mode: SplitMode) -> Result<Self> {
        let bundle = Self {
            train,
            dev,
            test,
            mode,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn check(&self) -> Result<()> {
        let train = self.train.used_template_ids();
        let dev = self.dev.used_template_ids();
        let test = self.test.used_template_ids();
        match self.mode {
            SplitMode::QuestionBased => {
                for id in test.iter().chain(dev.iter()) {
                    if !train.contains(id) {
                        return Err(Error::Validation(format!(
                            "template `{id}` is evaluated but absent from train"
                        )));
                    }
                }
            }
            SplitMode::QueryBased => {
                let shared = train
                    .intersection(&test)
                    .chain(train.intersection(&dev))
                    .chain(dev.intersection(&test))
                    .next();
                if let Some(id) = shared {
                    return Err(Error::Validation(format!(
                        "template `{id}` appears in more than one split member"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn build(corpus: &Corpus, mut members: [Vec<usize>; 3], mode: SplitMode) -> SplitBundle {
    for m in members.iter_mut() {
        m.sort_unstable();
    }
    let [train, dev, test] = members;
    SplitBundle {
        train: corpus.subset(format!("{}.train", corpus.name), &train),
        dev: corpus.subset(format!("{}.dev", corpus.name), &dev),
        test: corpus.subset(format!("{}.test", corpus.name), &test),
        mode,
    }
}

/// Random 2:1:1 split over examples in which every dev/test template also
/// occurs in train.
pub fn split_question_based(corpus: &Corpus, seed: u64) -> SplitBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n + 1) / 2;
    let n_dev = (n - n_train + 1) / 2;

    // member[i] = 0 train, 1 dev, 2 test
    let mut member = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        member[i] = if rank < n_train {
            0
        } else if rank < n_train + n_dev {
            1
        } else {
            2
        };
    }

    let tid = |i: usize| corpus.examples[i].template_id.as_str();
    let templates: BTreeSet<&str> = (0..n).map(tid).collect();
    for t in templates {
        let train_count = |member: &[u8]| -> BTreeMap<&str, usize> {
            let mut c = BTreeMap::new();
            for i in 0..n {
                if member[i] == 0 {
                    *c.entry(tid(i)).or_insert(0) += 1;
                }
            }
            c
        };
        let counts = train_count(&member);
        if counts.contains_key(t) {
            continue;
        }
        let mover = order
            .iter()
            .copied()
            .find(|&i| tid(i) == t && member[i] != 0)
            .expect("template has an example outside train");
        let donors: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| member[i] == 0 && counts.get(tid(i)).copied().unwrap_or(0) >= 2)
            .collect();
        if donors.is_empty() {
            member[mover] = 0;
        } else {
            let donor = donors[rng.gen_range(0..donors.len())];
            member[donor] = member[mover];
            member[mover] = 0;
        }
    }

    let mut members: [Vec<usize>; 3] = Default::default();
    for (i, &m) in member.iter().enumerate() {
        members[m as usize].push(i);
    }
    build(corpus, members, SplitMode::QuestionBased)
}

/// 2:1:1 split over templates: every example of a template lands in the
/// same member, and member template sets are pairwise disjoint.
pub fn split_query_based(corpus: &Corpus, seed: u64) -> Result<SplitBundle> {
    let groups = corpus.by_template();
    let n_templates = groups.len();
    if n_templates < 3 {
        return Err(Error::InsufficientClasses {
            needed: 3,
            found: n_templates,
        });
    }
    let mut ids: Vec<&str> = groups.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let quarter = ((n_templates as f64) / 4.0).round().max(1.0) as usize;
    let n_test = quarter;
    let n_dev = quarter;
    let n_train = n_templates - n_test - n_dev;

    let mut members: [Vec<usize>; 3] = Default::default();
    for (rank, id) in ids.iter().enumerate() {
        let m = if rank < n_train {
            0
        } else if rank < n_train + n_dev {
            1
        } else {
            2
        };
        members[m].extend(&groups[id]);
    }
    Ok(build(corpus, members, SplitMode::QueryBased))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Example, SqlTemplate};

    fn corpus(per_template: &[usize]) -> Corpus {
        let mut templates = Vec::new();
        let mut examples = Vec::new();
        for (t, &k) in per_template.iter().enumerate() {
            let id = format!("t{t}");
            templates.push(SqlTemplate::new(&id, "SELECT 1", vec![]).unwrap());
            for j in 0..k {
                examples.push(Example::new(&[format!("q{t}"), format!("w{j}")], &id, &[]));
            }
        }
        Corpus::new("toy", templates, examples).unwrap()
    }

    #[test]
    fn question_split_ratio() {
        let s = split_question_based(&corpus(&[4, 4]), 0);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (4, 2, 2));
        assert_eq!(s.train.used_template_ids().len(), 2);
        s.check().unwrap();
    }

    #[test]
    fn singleton_template_forced_into_train() {
        for seed in 0..20 {
            let s = split_question_based(&corpus(&[1, 5, 6]), seed);
            assert!(s.train.used_template_ids().contains("t0"));
            s.check().unwrap();
        }
    }

    #[test]
    fn query_split_minimal() {
        let s = split_query_based(&corpus(&[2, 3, 4]), 0).unwrap();
        for m in [&s.train, &s.dev, &s.test] {
            assert_eq!(m.used_template_ids().len(), 1);
            let id = m.used_template_ids().into_iter().next().unwrap();
            let expected = id[1..].parse::<usize>().unwrap() + 2;
            assert_eq!(m.len(), expected);
        }
    }

    #[test]
    fn query_split_needs_three_templates() {
        assert!(matches!(
            split_query_based(&corpus(&[2, 2]), 0),
            Err(Error::InsufficientClasses { found: 2, .. })
        ));
    }

    #[test]
    fn splits_are_deterministic() {
        let c = corpus(&[3, 5, 2, 7, 1, 4]);
        let a = split_question_based(&c, 11);
        let b = split_question_based(&c, 11);
        assert_eq!(a.test.examples, b.test.examples);
        let a = split_query_based(&c, 11).unwrap();
        let b = split_query_based(&c, 11).unwrap();
        assert_eq!(a.train.examples, b.train.examples);
    }
}

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::Arc;
use templar_core::backbone::Backbone;
use templar_core::corpus::{tokens, Example, SqlTemplate, Token};
use templar_core::csn::{top_n, CandidateSet, CsnModel};
use templar_core::embed::{Embedder, Vocab, PAD, UNK};
use templar_core::encoder::{cosine, CnnEncoder, EncoderConfig};
use templar_core::matchnet::{MatchNet, SupportSet};
use templar_core::tensor::ParamTree;

fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

fn random_csn(rng: &mut ChaCha8Rng, vocab: &[String], dim: usize, windows: Vec<usize>, maps: usize) -> CsnModel<f64> {
    let mut all = vec![PAD.to_string(), UNK.to_string()];
    all.extend(vocab.iter().cloned());
    let embedder = Embedder::trainable(Arc::new(Vocab::from_words(all).unwrap()), dim, rng);
    let encoder = CnnEncoder::new(EncoderConfig::new(windows, maps, dim), rng).unwrap();
    CsnModel::new(Backbone { embedder, encoder }, vec!["a".into(), "b".into(), "c".into()], rng)
}

fn random_question(rng: &mut ChaCha8Rng, vocab: &[String], max_len: usize) -> Vec<Token> {
    let len = rng.gen_range(1..=max_len);
    let surfaces: Vec<&String> = (0..len).map(|_| vocab.choose(rng).unwrap()).collect();
    tokens(&surfaces)
}

fn exemplar(q: Vec<Token>, id: String) -> Example {
    Example {
        question: q,
        template_id: id,
        slot_bindings: BTreeMap::new(),
    }
}

fn bare(id: &str) -> SqlTemplate {
    SqlTemplate::new(id, "SELECT a FROM b", vec![]).unwrap()
}

/// A small random CSN with a candidate memory of `n` templates.
fn memory(seed: u64, n: usize) -> (CsnModel<f64>, CandidateSet<f64>, Vec<String>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = words(12);
    let m = random_csn(&mut rng, &vocab, 4, vec![1, 2], 3);
    let ex: Vec<Example> = (0..n)
        .map(|t| exemplar(random_question(&mut rng, &vocab, 5), format!("t{t:02}")))
        .collect();
    let set = CandidateSet::from_exemplars(&m, ex).unwrap();
    (m, set, vocab, rng)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn feature_map_permutation_preserves_cosines_and_logits(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = words(10);
        let maps = rng.gen_range(2..6);
        let m = random_csn(&mut rng, &vocab, 3, vec![1, 2], maps);
        let mut perm: Vec<usize> = (0..maps).collect();
        perm.shuffle(&mut rng);

        let mut p = m.clone();
        let n_win = m.backbone.encoder.windows.len();
        for (w, win) in p.backbone.encoder.windows.iter_mut().enumerate() {
            let src = &m.backbone.encoder.windows[w];
            for (k, &from) in perm.iter().enumerate() {
                win.weight.row_mut(k).copy_from_slice(src.weight.row(from));
                win.bias.set(0, k, src.bias.get(0, from));
            }
        }
        for label in 0..m.labels.len() {
            for w in 0..n_win {
                for (k, &from) in perm.iter().enumerate() {
                    p.head_weight.set(label, w * maps + k, m.head_weight.get(label, w * maps + from));
                }
            }
        }
        let qs: Vec<Vec<Token>> = (0..4).map(|_| random_question(&mut rng, &vocab, 6)).collect();
        for a in &qs {
            let (fa, ga) = (m.features(a).unwrap(), p.features(a).unwrap());
            let (la, lp) = (m.logits(&fa.0), p.logits(&ga.0));
            for (x, y) in la.iter().zip(&lp) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for b in &qs {
                let (fb, gb) = (m.features(b).unwrap(), p.features(b).unwrap());
                prop_assert!((cosine(&fa.0, &fb.0) - cosine(&ga.0, &gb.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_n_is_pure_and_recall_matches_brute_force(seed in any::<u64>(), n_templates in 1usize..30) {
        let (m, set, vocab, mut rng) = memory(seed, n_templates);
        for _ in 0..5 {
            let q = random_question(&mut rng, &vocab, 6);
            let n = rng.gen_range(1..=n_templates + 2);
            let first = top_n(&m, &set, &q, n).unwrap();
            prop_assert_eq!(&first, &top_n(&m, &set, &q, n).unwrap());
            prop_assert_eq!(first.len(), n.min(n_templates));

            let qv = m.features(&q).unwrap();
            let mut all: Vec<(f64, String)> = set
                .iter()
                .map(|(id, e)| (cosine(&qv.0, &e.vector.0), id.clone()))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            for gold in set.template_ids() {
                let brute = all.iter().take(n).any(|(_, id)| id == gold);
                let got = first.iter().any(|r| &r.template_id == gold);
                prop_assert_eq!(brute, got);
            }
        }
    }

    #[test]
    fn cached_vectors_equal_fresh_features(seed in any::<u64>(), n_templates in 1usize..20) {
        let (m, set, _, _) = memory(seed, n_templates);
        for (_, e) in set.iter() {
            prop_assert_eq!(&e.vector, &m.features(&e.example.question).unwrap());
        }
    }

    #[test]
    fn insert_never_moves_existing_similarities(seed in any::<u64>(), n_templates in 1usize..15) {
        let (m, set, vocab, mut rng) = memory(seed, n_templates);
        let before_params: Vec<Vec<f64>> = m.tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        let new = exemplar(random_question(&mut rng, &vocab, 5), "new".into());
        let grown = set.insert(new.clone(), &bare("new"), &m, false).unwrap();
        prop_assert_eq!(grown.len(), set.len() + 1);
        let after_params: Vec<Vec<f64>> = m.tensors().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        prop_assert_eq!(before_params, after_params);
        for _ in 0..4 {
            let q = m.features(&random_question(&mut rng, &vocab, 6)).unwrap();
            for (id, e) in set.iter() {
                let g = grown.get(id).unwrap();
                prop_assert_eq!(cosine(&q.0, &e.vector.0), cosine(&q.0, &g.vector.0));
            }
        }
        if m.features(&new.question).unwrap().0.iter().any(|&v| v != 0.0) {
            let own = top_n(&m, &grown, &new.question, 1).unwrap();
            prop_assert!((own[0].similarity - 1.0).abs() < 1e-12);
        }
        prop_assert!(set.insert(new, &bare("new"), &m, false).is_ok());
        let dup = exemplar(tokens(&["w0"]), "new".into());
        prop_assert!(grown.insert(dup, &bare("new"), &m, false).is_err());
    }

    #[test]
    fn adding_support_keeps_relative_order_and_mass(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = words(10);
        let mn = MatchNet::from_csn(&random_csn(&mut rng, &vocab, 4, vec![1, 2], 3));
        let items: Vec<_> = (0..k)
            .map(|t| mn.support_item(&random_question(&mut rng, &vocab, 5), &format!("t{t}")).unwrap())
            .collect();
        let small = SupportSet::new(items.clone()).unwrap();
        let mut more = items;
        more.push(mn.support_item(&random_question(&mut rng, &vocab, 5), "extra").unwrap());
        let big = SupportSet::new(more).unwrap();
        let q = random_question(&mut rng, &vocab, 6);
        let (a, b) = (mn.classify(&q, &small).unwrap(), mn.classify(&q, &big).unwrap());
        for d in [&a.distribution, &b.distribution] {
            prop_assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(a.distribution.len(), k);
        prop_assert!(b.distribution.contains_key("extra"));
        for (x, px) in &a.distribution {
            prop_assert!(px.is_finite() && *px > 0.0);
            for (y, py) in &a.distribution {
                let (qx, qy) = (b.distribution[x], b.distribution[y]);
                if *px > py * (1.0 + 1e-9) {
                    prop_assert!(qx > qy);
                }
                prop_assert!((px / py - qx / qy).abs() <= 1e-9 * (px / py).abs().max(1.0));
            }
        }
    }

    #[test]
    fn untrained_matchnet_classify_equals_csn_top1(seed in any::<u64>(), n_templates in 1usize..25) {
        let (m, set, vocab, mut rng) = memory(seed, n_templates);
        let mn = MatchNet::from_csn(&m);
        let support = mn.support_set(set.exemplars()).unwrap();
        for _ in 0..5 {
            let q = random_question(&mut rng, &vocab, 6);
            let top = top_n(&m, &set, &q, 1).unwrap();
            prop_assert_eq!(&mn.classify(&q, &support).unwrap().predicted_id, &top[0].template_id);
        }
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "seed = 3
embed.dim = 8
encoder.feature_maps = 8
slotfill.hidden = 8
slotfill.var_dim = 4
slotfill.attention_dim = 8
optim.max_epochs = 3
matchnet.n = 4
engine.n = 4
";

fn templar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_templar"))
        .args(args)
        .env_remove("TEMPLAR_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = templar(args);
    assert!(
        out.status.success(),
        "templar {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// synth, split and the three training stages, then build-engine.
fn pipeline(mode: &str) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let run = Run { _dir: dir, root };
    let p = |r: &str| run.path(r);
    ok(&["synth", "--templates", "12", "--paraphrases", "8", "--seed", "1", "--out", s(&p("corpus"))]);
    ok(&[
        "split",
        "--mode",
        mode,
        "--seed",
        "1",
        "--examples",
        s(&p("corpus/examples.jsonl")),
        "--templates",
        s(&p("corpus/templates.jsonl")),
        "--out",
        s(&p("split")),
    ]);
    std::fs::write(p("tiny.toml"), TINY).unwrap();
    let (train, dev, tables, cfg) = (p("split/train.jsonl"), p("split/dev.jsonl"), p("split/templates.jsonl"), p("tiny.toml"));
    let data = ["--train", s(&train), "--dev", s(&dev), "--templates", s(&tables), "--config", s(&cfg)];
    let with = |head: &[&str], tail: &[&str]| -> Vec<String> {
        head.iter().chain(data.iter()).chain(tail.iter()).map(|x| x.to_string()).collect()
    };
    for args in [
        with(&["train-csn"], &["--out", s(&p("csn.ckpt"))]),
        with(&["train-matchnet", "--init-from", s(&p("csn.ckpt"))], &["--out", s(&p("mn.ckpt"))]),
        with(&["train-slotfill"], &["--out", s(&p("sf.ckpt"))]),
    ] {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = templar(&refs);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let log = String::from_utf8(out.stderr).unwrap();
        let epochs: Vec<serde_json::Value> = log
            .lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .filter(|v| v.get("epoch").is_some())
            .collect();
        assert_eq!(epochs.len(), 3, "one JSONL record per epoch: {log}");
        assert!(epochs.iter().all(|v| v["dev_loss"].is_number()));
    }
    ok(&[
        "build-engine",
        "--csn",
        s(&p("csn.ckpt")),
        "--matchnet",
        s(&p("mn.ckpt")),
        "--slotfill",
        s(&p("sf.ckpt")),
        "--train",
        s(&train),
        "--templates",
        s(&tables),
        "--config",
        s(&cfg),
        "--out",
        s(&p("engine")),
    ]);
    run
}

fn first_test_line(run: &Run) -> serde_json::Value {
    let text = std::fs::read_to_string(run.path("split/test.jsonl")).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn synth_writes_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["synth", "--templates", "2", "--paraphrases", "2", "--seed", "0", "--out", s(dir.path())]);
    assert!(out.contains("4 examples"));
    let examples = std::fs::read_to_string(dir.path().join("examples.jsonl")).unwrap();
    assert_eq!(examples.lines().count(), 4);
    let templates = std::fs::read_to_string(dir.path().join("templates.jsonl")).unwrap();
    assert_eq!(templates.lines().count(), 2);
    let again = tempfile::tempdir().unwrap();
    ok(&["synth", "--templates", "2", "--paraphrases", "2", "--seed", "0", "--out", s(again.path())]);
    assert_eq!(std::fs::read_to_string(again.path().join("examples.jsonl")).unwrap(), examples);
}

#[test]
fn usage_and_runtime_errors() {
    let unknown = templar(&["synth", "--templates", "2", "--paraphrases", "2", "--bogus"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert_eq!(templar(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(templar(&["eval", "--engine", "x", "--test", "y", "--protocol", "half"]).status.code(), Some(2));

    let missing = templar(&["ingest", "/nonexistent/e.jsonl", "/nonexistent/t.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8(missing.stderr).unwrap();
    assert!(err.starts_with("error: ingest:"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let bad = templar(&["infer", "--engine", s(dir.path()), "--question", "hi"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8(bad.stderr).unwrap().starts_with("error: infer:"));
}

#[test]
fn ingest_summarizes_and_copies() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--templates", "3", "--paraphrases", "2", "--seed", "4", "--out", s(dir.path())]);
    let before = snapshot(dir.path());
    let copy = tempfile::tempdir().unwrap();
    let out = ok(&[
        "ingest",
        s(&dir.path().join("examples.jsonl")),
        s(&dir.path().join("templates.jsonl")),
        "--out",
        s(copy.path()),
    ]);
    let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["examples"], 6);
    assert_eq!(summary["templates"], 3);
    assert_eq!(snapshot(dir.path()), before);
    for f in ["examples.jsonl", "templates.jsonl"] {
        assert_eq!(
            std::fs::read(copy.path().join(f)).unwrap(),
            std::fs::read(dir.path().join(f)).unwrap()
        );
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let run = |env: Option<&str>, args: &[&str]| {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_templar"));
        cmd.args(["synth", "--templates", "3", "--paraphrases", "2", "--out", s(dir.path())]).args(args);
        match env {
            Some(v) => cmd.env("TEMPLAR_SEED", v),
            None => cmd.env_remove("TEMPLAR_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read_to_string(dir.path().join("examples.jsonl")).unwrap()
    };
    assert_eq!(run(Some("5"), &[]), run(None, &["--seed", "5"]));
    assert_ne!(run(Some("5"), &[]), run(None, &[]));
    assert_eq!(run(Some("5"), &["--seed", "0"]), run(None, &[]));
}

#[test]
fn question_pipeline_end_to_end() {
    let run = pipeline("question");
    let p = |r: &str| run.path(r);
    let inputs: Vec<PathBuf> = ["split", "corpus", "csn.ckpt", "mn.ckpt", "sf.ckpt", "tiny.toml"]
        .iter()
        .map(|r| p(r))
        .collect();
    let snap = |paths: &[PathBuf]| -> Vec<BTreeMap<PathBuf, Vec<u8>>> {
        paths
            .iter()
            .map(|q| {
                if q.is_dir() {
                    snapshot(q)
                } else {
                    BTreeMap::from([(q.clone(), std::fs::read(q).unwrap())])
                }
            })
            .collect()
    };
    let before = snap(&inputs);
    let engine_before = snapshot(&p("engine"));

    let line = first_test_line(&run);
    let words: Vec<&str> = line["question"].as_array().unwrap().iter().map(|w| w.as_str().unwrap()).collect();
    let question = words.join(" ");
    let out = ok(&["infer", "--engine", s(&p("engine")), "--question", &question]);
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("SELECT "));
    let traced = ok(&["infer", "--engine", s(&p("engine")), "--question", &question, "--trace"]);
    let mut lines = traced.lines();
    assert_eq!(lines.next(), out.lines().next());
    let trace: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(trace["sql"].as_str(), out.lines().next());
    let mass: f64 = trace["trace"]["template_distribution"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((mass - 1.0).abs() < 1e-9);

    let mut reports = Vec::new();
    for name in ["r1.json", "r2.json"] {
        ok(&[
            "eval",
            "--engine",
            s(&p("engine")),
            "--test",
            s(&p("split/test.jsonl")),
            "--templates",
            s(&p("split/templates.jsonl")),
            "--protocol",
            "question",
            "--config",
            s(&p("tiny.toml")),
            "--report",
            s(&p(name)),
        ]);
        reports.push(std::fs::read(p(name)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    let report: serde_json::Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(report["protocol"], "question_based");
    let test_lines = std::fs::read_to_string(p("split/test.jsonl")).unwrap().lines().count();
    assert_eq!(report["counts"]["total"], test_lines);

    assert_eq!(snap(&inputs), before);
    assert_eq!(snapshot(&p("engine")), engine_before);
}

#[test]
fn query_pipeline_adapt_and_protocols() {
    let run = pipeline("query");
    let p = |r: &str| run.path(r);
    let eval = |engine: &str, protocol: &str| -> serde_json::Value {
        let out = ok(&[
            "eval",
            "--engine",
            s(&p(engine)),
            "--test",
            s(&p("split/test.jsonl")),
            "--templates",
            s(&p("split/templates.jsonl")),
            "--protocol",
            protocol,
            "--config",
            s(&p("tiny.toml")),
        ]);
        serde_json::from_str(&out).unwrap()
    };
    let zero = eval("engine", "zero");
    assert_eq!(zero["full_accuracy"], 0.0);
    let one = eval("engine", "one");
    assert_eq!(one["protocol"], "query_one_shot");
    assert!(one["counts"]["adaptation_examples"].as_u64().unwrap() > 0);
    assert_eq!(eval("engine", "one"), one);
    let wrong = templar(&[
        "eval",
        "--engine",
        s(&p("engine")),
        "--test",
        s(&p("split/test.jsonl")),
        "--templates",
        s(&p("split/templates.jsonl")),
        "--protocol",
        "question",
    ]);
    assert_eq!(wrong.status.code(), Some(1));

    let line = first_test_line(&run);
    let tid = line["template_id"].as_str().unwrap().to_string();
    let tables = std::fs::read_to_string(p("split/templates.jsonl")).unwrap();
    let template: serde_json::Value = tables
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|t| t["id"] == tid.as_str())
        .unwrap();
    let pair = serde_json::json!({"example": line, "template": template});
    std::fs::write(p("pair.json"), pair.to_string()).unwrap();
    let before = snapshot(&p("engine"));
    ok(&["adapt", "--engine", s(&p("engine")), "--pair", s(&p("pair.json")), "--out", s(&p("adapted"))]);
    assert_eq!(snapshot(&p("engine")), before);
    let manifest = |d: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p(d).join("manifest.json")).unwrap()).unwrap()
    };
    assert_eq!(manifest("adapted")["hashes"], manifest("engine")["hashes"]);
    for m in ["csn.ckpt", "matchnet.ckpt", "slotfill.ckpt"] {
        assert_eq!(std::fs::read(p("adapted").join(m)).unwrap(), std::fs::read(p("engine").join(m)).unwrap());
    }
    let candidates = std::fs::read_to_string(p("adapted/candidates.jsonl")).unwrap();
    assert!(candidates.contains(&format!("\"template_id\":\"{tid}\"")));

    let words: Vec<&str> = line["question"].as_array().unwrap().iter().map(|w| w.as_str().unwrap()).collect();
    let out = ok(&["infer", "--engine", s(&p("adapted")), "--question", &words.join(" ")]);
    assert_eq!(out.lines().count(), 1);

    let (adapted, pair_file, twice) = (p("adapted"), p("pair.json"), p("twice"));
    let again = ["adapt", "--engine", s(&adapted), "--pair", s(&pair_file), "--out", s(&twice)];
    let dup = templar(&again);
    assert_eq!(dup.status.code(), Some(1));
    assert!(String::from_utf8(dup.stderr).unwrap().contains("already present"));
    let mut replace = again.to_vec();
    replace.push("--replace");
    ok(&replace);
}

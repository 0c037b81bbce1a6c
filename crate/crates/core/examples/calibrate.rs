//! Trains engines on the two synthetic benchmarks and prints every metric.
//!
//!     cargo run --release -p templar-core --example calibrate -- [key=value ...]
//!
//! Starts from the compact profile; arguments override single keys.

use std::time::Instant;
use templar_core::corpus::{generate_synthetic, split_question_based, BenchmarkSpec};
use templar_core::eval::{evaluate, run_one_shot_ablation, Protocol};
use templar_core::pipeline::Ablation;
use templar_core::RunConfig;

fn main() -> templar_core::Result<()> {
    let mut cfg = RunConfig::compact();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    eprintln!("{}", cfg.to_toml());

    let corpus = generate_synthetic(40, 20, 3, 200, 7)?;
    let split = split_question_based(&corpus, 7);
    let t = Instant::now();
    let (engine, log) = cfg.train_engine::<f32>(&split.train, &split.dev)?;
    eprintln!("question-based: {} epochs, {:.1}s", log.len(), t.elapsed().as_secs_f64());
    for r in &log {
        if r.best {
            eprintln!("  {} {} dev_acc={:?} dev_loss={:.4}", r.stage, r.epoch, r.dev_accuracy, r.dev_loss);
        }
    }
    let rep = evaluate(&engine, &split.test, Protocol::QuestionBased, Ablation::Full)?;
    println!("{}", rep.to_json());

    let bench = BenchmarkSpec::one_shot(7).generate()?;
    let t = Instant::now();
    let (engine, log) = cfg.train_engine::<f32>(&bench.train, &bench.dev)?;
    eprintln!("query-based: {} epochs, {:.1}s", log.len(), t.elapsed().as_secs_f64());
    println!("{}", evaluate(&engine, &bench.test, Protocol::QueryZeroShot, Ablation::Full)?.to_json());
    for mode in [Ablation::Full, Ablation::MnOnly, Ablation::CsnOnly] {
        println!("{}", run_one_shot_ablation(&engine, &bench.test, 7, mode)?.to_json());
    }
    Ok(())
}

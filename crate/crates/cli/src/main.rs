use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use templar_core::checkpoint::{self, VectorCache};
use templar_core::corpus::{
    load_corpus, parse_example_line, split_query_based, split_question_based, write_corpus, Corpus, SqlTemplate, SynthSpec,
};
use templar_core::csn::CsnModel;
use templar_core::eval::{evaluate, run_one_shot_ablation, Protocol};
use templar_core::matchnet::MatchNet;
use templar_core::pipeline::{saved_dtype, Ablation, Engine};
use templar_core::slotfill::SlotFillModel;
use templar_core::train::EpochRecord;
use templar_core::{RunConfig, Scalar};

#[derive(Parser)]
#[command(name = "templar", version, about = "One-shot template-based text-to-SQL")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file overriding the profile; dotted keys mirror module names.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key after the config file, e.g. `optim.lr=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = Profile::Desk, global = true)]
    profile: Profile,
    /// Precomputed vector file for the paper profile.
    #[arg(long, global = true)]
    vectors: Option<String>,
    /// Scalar type of newly trained models.
    #[arg(long, value_enum, default_value_t = Dtype::F32, global = true)]
    dtype: Dtype,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Paper,
    Desk,
    Compact,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => bail!("unsupported dtype `{other}`"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Question,
    Query,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Question,
    Zero,
    One,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    Csn,
    Mn,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::Csn => Ablation::CsnOnly,
            AblationArg::Mn => Ablation::MnOnly,
        }
    }
}

#[derive(Args)]
struct TrainData {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Template table shared by the train and dev files.
    #[arg(long)]
    templates: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a corpus and print its summary.
    Ingest {
        examples: PathBuf,
        templates: PathBuf,
        /// Write a canonical copy into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        templates: usize,
        #[arg(long)]
        paraphrases: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        vars: usize,
        #[arg(long, default_value_t = 200)]
        vocab: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Split a corpus into train, dev and test files.
    Split {
        #[arg(long, value_enum)]
        mode: SplitArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the candidate search network
    TrainCsn {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the matching network from a CSN checkpoint
    TrainMatchnet {
        #[command(flatten)]
        data: TrainData,
        /// Trained CSN parameter file.
        #[arg(long)]
        init_from: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pointer-network slot filler
    TrainSlotfill {
        #[command(flatten)]
        data: TrainData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble trained modules and a candidate memory into an engine directory.
    BuildEngine {
        #[arg(long)]
        csn: PathBuf,
        #[arg(long)]
        matchnet: PathBuf,
        #[arg(long)]
        slotfill: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add one (question, template) pair to a copy of an engine.
    Adapt {
        #[arg(long)]
        engine: PathBuf,
        /// JSON object with `example` and `template` fields.
        #[arg(long, visible_alias = "add")]
        pair: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing exemplar for the same template.
        #[arg(long)]
        replace: bool,
    },
    /// Translate one question to SQL
    Infer {
        #[arg(long)]
        engine: PathBuf,
        /// Whitespace-tokenized question.
        #[arg(long)]
        question: String,
        /// Also print the inference trace as JSON.
        #[arg(long)]
        trace: bool,
        #[arg(long, value_enum, default_value_t = AblationArg::Full)]
        ablation: AblationArg,
    },
    /// Score an engine on a test corpus under one protocol
    Eval {
        #[arg(long)]
        engine: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Template table of the test file; defaults to the engine's.
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[arg(long, value_enum, default_value_t = AblationArg::Full)]
        ablation: AblationArg,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth { .. } => "synth",
            Command::Split { .. } => "split",
            Command::TrainCsn { .. } => "train-csn",
            Command::TrainMatchnet { .. } => "train-matchnet",
            Command::TrainSlotfill { .. } => "train-slotfill",
            Command::BuildEngine { .. } => "build-engine",
            Command::Adapt { .. } => "adapt",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("TEMPLAR_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("TEMPLAR_SEED=`{s}`"))?)),
        Err(_) => Ok(None),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.to_string())),
        }
    }
}

/// Profile, then `TEMPLAR_SEED`, then the config file, then `--set`.
fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match g.profile {
        Profile::Paper => {
            let v = g.vectors.clone().ok_or_else(|| anyhow!("the paper profile needs --vectors"))?;
            RunConfig::paper(v)
        }
        Profile::Desk => RunConfig::desk(),
        Profile::Compact => RunConfig::compact(),
    };
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        for (k, v) in pairs {
            cfg.set(&k, &v).with_context(|| format!("{}: {k}", path.display()))?;
        }
    }
    for kv in &g.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

/// Loads a corpus, keeping only the templates its examples use.
fn load_used(examples: &Path, templates: &Path) -> Result<Corpus> {
    let full = load_corpus(examples, templates)?;
    let all: Vec<usize> = (0..full.len()).collect();
    Ok(full.subset(full.name.clone(), &all))
}

fn load_data(d: &TrainData) -> Result<(Corpus, Corpus)> {
    Ok((load_used(&d.train, &d.templates)?, load_used(&d.dev, &d.templates)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn summarize(log: &[EpochRecord]) {
    if let Some(best) = log.iter().rev().find(|r| r.best) {
        log::info!(
            "{}",
            serde_json::json!({"stage": best.stage, "selected_epoch": best.epoch, "epochs_run": log.len()})
        );
    }
}

fn ingest(examples: &Path, templates: &Path, out: Option<&Path>) -> Result<()> {
    let corpus = load_corpus(examples, templates)?;
    let summary = serde_json::json!({
        "examples": corpus.len(),
        "templates": corpus.num_templates(),
        "used_templates": corpus.used_template_ids().len(),
        "mean_variables_per_template": corpus.mean_variables_per_template(),
    });
    println!("{summary}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_corpus(&corpus, &dir.join("examples.jsonl"), &dir.join("templates.jsonl"))?;
    }
    Ok(())
}

fn split(mode: SplitArg, seed: u64, examples: &Path, templates: &Path, out: &Path) -> Result<()> {
    let corpus = load_corpus(examples, templates)?;
    let bundle = match mode {
        SplitArg::Question => split_question_based(&corpus, seed),
        SplitArg::Query => split_query_based(&corpus, seed)?,
    };
    std::fs::create_dir_all(out)?;
    for (name, part) in [("train", &bundle.train), ("dev", &bundle.dev), ("test", &bundle.test)] {
        write_text(&out.join(format!("{name}.jsonl")), &templar_core::corpus::examples_to_jsonl(&part.examples))?;
        println!("{name}: {} examples, {} templates", part.len(), part.used_template_ids().len());
    }
    write_text(
        &out.join("templates.jsonl"),
        &templar_core::corpus::templates_to_jsonl(corpus.templates.values()),
    )
}

fn train_csn<T: Scalar>(cfg: &RunConfig, data: &TrainData, out: &Path) -> Result<()> {
    let (train, dev) = load_data(data)?;
    let embedder = cfg.embedder::<T>(&train, None)?;
    let (model, log) = cfg.train_csn(&train, &dev, embedder)?;
    summarize(&log);
    checkpoint::save(&model, out)?;
    Ok(())
}

fn train_matchnet<T: Scalar>(cfg: &RunConfig, data: &TrainData, init: &Path, out: &Path) -> Result<()> {
    let (train, dev) = load_data(data)?;
    let csn: CsnModel<T> = checkpoint::load(init, &mut VectorCache::new())?;
    let (model, log) = cfg.train_matchnet(&train, &dev, &csn)?;
    summarize(&log);
    checkpoint::save(&model, out)?;
    Ok(())
}

fn train_slotfill<T: Scalar>(cfg: &RunConfig, data: &TrainData, out: &Path) -> Result<()> {
    let (train, dev) = load_data(data)?;
    let embedder = cfg.embedder::<T>(&train, None)?;
    let (model, log) = cfg.train_slotfill(&train, &dev, embedder)?;
    summarize(&log);
    checkpoint::save(&model, out)?;
    Ok(())
}

fn build_engine<T: Scalar>(cfg: &RunConfig, paths: [&Path; 3], train: &Path, templates: &Path, out: &Path) -> Result<()> {
    let train = load_used(train, templates)?;
    let mut cache = VectorCache::new();
    let csn: CsnModel<T> = checkpoint::load(paths[0], &mut cache)?;
    let mn: MatchNet<T> = checkpoint::load(paths[1], &mut cache)?;
    let sf: SlotFillModel<T> = checkpoint::load(paths[2], &mut cache)?;
    let engine = Engine::build(csn, mn, sf, &train, cfg.engine.clone(), cfg.stage_seed(4))?;
    engine.save(out)?;
    println!("{}", engine.param_hash()?);
    Ok(())
}

fn adapt<T: Scalar>(dir: &Path, pair: &Path, out: &Path, replace: bool) -> Result<()> {
    let engine = Engine::<T>::load(dir)?;
    let text = std::fs::read_to_string(pair).with_context(|| format!("reading {}", pair.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", pair.display()))?;
    let field = |k: &str| value.get(k).cloned().ok_or_else(|| anyhow!("{}: missing `{k}`", pair.display()));
    let template: SqlTemplate = serde_json::from_value(field("template")?)?;
    template.validate()?;
    let example = parse_example_line(&field("example")?.to_string()).map_err(|m| anyhow!("{}: {m}", pair.display()))?;
    if example.template_id != template.id {
        bail!(
            "example references template `{}` but the pair holds `{}`",
            example.template_id,
            template.id
        );
    }
    example.validate(&template)?;
    let next = engine.adapt(example, template, replace)?;
    next.save(out)?;
    Ok(())
}

fn infer<T: Scalar>(dir: &Path, question: &str, trace: bool, ablation: Ablation) -> Result<()> {
    let engine = Engine::<T>::load(dir)?;
    let tokens = templar_core::corpus::whitespace_tokens(question);
    let g = engine.infer_with(&tokens, ablation)?;
    println!("{}", g.sql);
    if trace {
        println!("{}", serde_json::to_string(&g)?);
    }
    Ok(())
}

fn eval<T: Scalar>(
    seed: u64,
    dir: &Path,
    test: &Path,
    templates: Option<&Path>,
    protocol: ProtocolArg,
    ablation: Ablation,
    report: Option<&Path>,
) -> Result<()> {
    let engine = Engine::<T>::load(dir)?;
    let default_table = dir.join("templates.jsonl");
    let test = load_used(test, templates.unwrap_or(&default_table))?;
    let rep = match protocol {
        ProtocolArg::Question => evaluate(&engine, &test, Protocol::QuestionBased, ablation)?,
        ProtocolArg::Zero => evaluate(&engine, &test, Protocol::QueryZeroShot, ablation)?,
        ProtocolArg::One => run_one_shot_ablation(&engine, &test, seed, ablation)?,
    };
    let json = rep.to_json() + "\n";
    match report {
        Some(path) => write_text(path, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            Dtype::F32 => $f::<f32>($($arg),*),
            Dtype::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest { examples, templates, out } => ingest(examples, templates, out.as_deref()),
        Command::Synth {
            templates,
            paraphrases,
            seed,
            vars,
            vocab,
            out,
        } => {
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let corpus = SynthSpec {
                n_templates: *templates,
                paraphrases_per_template: *paraphrases,
                n_vars_max: *vars,
                vocab_size: *vocab,
                seed,
            }
            .generate()?;
            std::fs::create_dir_all(out)?;
            write_corpus(&corpus, &out.join("examples.jsonl"), &out.join("templates.jsonl"))?;
            println!("{} examples, {} templates", corpus.len(), corpus.num_templates());
            Ok(())
        }
        Command::Split {
            mode,
            seed,
            examples,
            templates,
            out,
        } => split(*mode, seed.or(env_seed()?).unwrap_or(0), examples, templates, out),
        Command::TrainCsn { data, out } => {
            let cfg = resolve_config(g)?;
            dispatch!(g.dtype, train_csn(&cfg, data, out))
        }
        Command::TrainMatchnet { data, init_from, out } => {
            let cfg = resolve_config(g)?;
            let dtype = Dtype::parse(&checkpoint::peek_dtype(init_from)?)?;
            dispatch!(dtype, train_matchnet(&cfg, data, init_from, out))
        }
        Command::TrainSlotfill { data, out } => {
            let cfg = resolve_config(g)?;
            dispatch!(g.dtype, train_slotfill(&cfg, data, out))
        }
        Command::BuildEngine {
            csn,
            matchnet,
            slotfill,
            train,
            templates,
            out,
        } => {
            let cfg = resolve_config(g)?;
            let dtype = Dtype::parse(&checkpoint::peek_dtype(csn)?)?;
            let paths = [csn.as_path(), matchnet.as_path(), slotfill.as_path()];
            dispatch!(dtype, build_engine(&cfg, paths, train, templates, out))
        }
        Command::Adapt {
            engine,
            pair,
            out,
            replace,
        } => {
            let dtype = Dtype::parse(&saved_dtype(engine)?)?;
            dispatch!(dtype, adapt(engine, pair, out, *replace))
        }
        Command::Infer {
            engine,
            question,
            trace,
            ablation,
        } => {
            let dtype = Dtype::parse(&saved_dtype(engine)?)?;
            dispatch!(dtype, infer(engine, question, *trace, (*ablation).into()))
        }
        Command::Eval {
            engine,
            test,
            templates,
            protocol,
            ablation,
            report,
        } => {
            let cfg = resolve_config(g)?;
            let dtype = Dtype::parse(&saved_dtype(engine)?)?;
            dispatch!(
                dtype,
                eval(cfg.seed, engine, test, templates.as_deref(), *protocol, (*ablation).into(), report.as_deref())
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            use std::io::Write;
            writeln!(buf, "{}", record.args())
        })
        .init();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::FAILURE
        }
    }
}

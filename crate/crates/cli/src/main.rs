//! `ntkg`: train, evaluate and explain multi-hop reasoning agents on n-tuple
//! temporal knowledge graphs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use ntkg_core::config::{parse_config_text, CandidateScore, RunConfig, KEYS};
use ntkg_core::data::{Dataset, Query, Split};
use ntkg_core::io::{convert_tsv, load_dataset, resolve_fact_line, FactLine};
use ntkg_core::synth::{self, SynthConfig};
use ntkg_core::train::{self, Agent, Checkpoint, EpochMetrics, TrainHooks};
use ntkg_core::Error;

#[derive(Parser)]
#[command(name = "ntkg", version, about = "Explainable multi-hop reasoning over n-tuple temporal knowledge graphs")]
struct Cli {
    /// Worker threads for rollouts and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes config.json, metrics.jsonl and checkpoint.json.
    Train {
        /// Config file: JSON object or `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override one key (repeatable); wins over the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Validate only on queries generated by the planted rules
        /// (synthetic corpora with rules.json).
        #[arg(long)]
        rule_queries: bool,
    },
    /// Time-aware filtered MRR and Hits@k of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (default: the one recorded in the checkpoint).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Beam width (default: the checkpoint's `beam`).
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, value_parser = parse_score)]
        candidate_score: Option<CandidateScore>,
        #[arg(long)]
        rule_queries: bool,
    },
    /// Best reasoning path per query as JSON lines.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// JSON lines `{"p", "pairs", "t", "hide"}`; `hide` is 0 or 1 (which
        /// core entity to predict) and both are asked when absent.
        #[arg(long, conflicts_with = "split")]
        queries: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with planted rules.
    SynthGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus statistics as JSON.
    Stats { dataset: PathBuf },
    /// Convert a TSV corpus (train.txt, valid.txt, test.txt) into a dataset
    /// directory.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_score(s: &str) -> Result<CandidateScore, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("expected max or logsumexp, got {s:?}"))
}

/// Error reported as `{"error": {"kind", "message"}}` on stderr.
#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::MissingFile(_) => "missing_file",
            Error::Checkpoint(_) => "checkpoint",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Shape(_) | Error::Tape(_) | Error::InvalidAction(_) => "internal",
        };
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (file or --set):\n");
    for (k, doc) in KEYS {
        s.push_str(&format!("  {k:width$}  {doc}\n"));
    }
    s
}

fn main() -> ExitCode {
    let cmd = Cli::command().mut_subcommand("train", |c| c.after_help(keys_help()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            return report(CliError {
                kind: "usage",
                message: e.to_string().trim().to_string(),
            })
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": e.kind, "message": e.message}}));
    ExitCode::from(if matches!(e.kind, "usage" | "config") { 2 } else { 1 })
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError {
                kind: "internal",
                message: e.to_string(),
            })?;
    }
    match cli.command {
        Command::Train {
            config,
            set,
            out,
            rule_queries,
        } => cmd_train(config.as_deref(), &set, &out, rule_queries),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            beam,
            candidate_score,
            rule_queries,
        } => cmd_eval(&checkpoint, dataset.as_deref(), split, beam, candidate_score, rule_queries),
        Command::Explain {
            checkpoint,
            dataset,
            queries,
            split,
            beam,
            limit,
            out,
        } => cmd_explain(&checkpoint, dataset.as_deref(), queries.as_deref(), split, beam, limit, out.as_deref()),
        Command::SynthGen { config, set, out } => cmd_synth_gen(config.as_deref(), &set, &out),
        Command::Stats { dataset } => print_json(&load_dataset(&dataset)?.stats()),
        Command::Convert { input, out } => print_json(&convert_tsv(&input, &out)?.stats()),
    }
}

fn print_json<T: Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn load_for_training(dir: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(dir)?.add_inverse_facts())
}

fn rule_filter(dir: &Path, ds: &Dataset, queries: Vec<Query>) -> CliResult<Vec<Query>> {
    let rules = synth::load_rules(dir)?;
    Ok(queries.into_iter().filter(|q| synth::is_rule_query(q, ds, &rules)).collect())
}

/// Metrics line of the log: the epoch record plus the run seed.
#[derive(Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    metrics: &'a EpochMetrics,
    seed: u64,
}

fn cmd_train(config: Option<&Path>, set: &[String], out: &Path, rule_queries: bool) -> CliResult<()> {
    let cfg = RunConfig::load(config, set)?;
    if cfg.dataset.is_empty() {
        return Err(Error::Config("dataset is not set".into()).into());
    }
    let dir = PathBuf::from(&cfg.dataset);
    let ds = load_for_training(&dir)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let valid_queries = if rule_queries {
        Some(rule_filter(&dir, &ds, ds.queries(Split::Valid))?)
    } else {
        None
    };
    let mut log = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    let mut write_err: Option<std::io::Error> = None;
    let mut on_epoch = |m: &EpochMetrics| {
        let line = serde_json::to_string(&MetricsLine {
            metrics: m,
            seed: cfg.seed,
        })
        .expect("metrics serialize");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    };
    let outcome = train::train(
        &ds,
        &cfg,
        TrainHooks {
            on_epoch: Some(&mut on_epoch),
            valid_queries,
        },
    )?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let ck_path = out.join("checkpoint.json");
    outcome.best.save(&ck_path)?;
    print_json(&json!({
        "checkpoint": ck_path,
        "best_epoch": outcome.best.epoch,
        "valid_mrr": outcome.best.valid_mrr,
        "epochs": outcome.metrics.len(),
        "config": cfg,
    }))
}

struct Loaded {
    ck: Checkpoint,
    dir: PathBuf,
    ds: Dataset,
}

fn load_checkpoint(path: &Path, dataset: Option<&Path>) -> CliResult<Loaded> {
    let ck = Checkpoint::load(path)?;
    let dir = dataset.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&ck.config.dataset));
    let ds = load_for_training(&dir)?;
    Ok(Loaded { ck, dir, ds })
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: Option<&Path>,
    split: Split,
    beam: Option<usize>,
    score: Option<CandidateScore>,
    rule_queries: bool,
) -> CliResult<()> {
    let Loaded { ck, dir, ds } = load_checkpoint(checkpoint, dataset)?;
    let mut cfg = ck.config.clone();
    cfg.dataset = dir.display().to_string();
    cfg.beam = beam.unwrap_or(cfg.beam);
    cfg.candidate_score = score.unwrap_or(cfg.candidate_score);
    cfg.validate()?;
    let spec = cfg.model_spec(&ds);
    let agent = Agent::new(&ds, &spec, &ck.prior, cfg.action_cap, cfg.max_steps);
    let mut queries = ds.queries(split);
    if rule_queries {
        queries = rule_filter(&dir, &ds, queries)?;
    }
    let (result, _) = train::evaluate(&agent, &ck.params, &queries, cfg.beam, cfg.candidate_score)?;
    print_json(&json!({
        "split": split,
        "checkpoint_epoch": ck.epoch,
        "result": result,
        "config": cfg,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    p: String,
    pairs: Vec<(String, String)>,
    t: u64,
    #[serde(default)]
    hide: Option<usize>,
}

fn read_queries(path: &Path, ds: &Dataset) -> CliResult<Vec<Query>> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let ql: QueryLine = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if ql.hide.is_some_and(|h| h > 1) {
            return Err(at("hide must be 0 or 1".into()).into());
        }
        let fl = FactLine {
            p: ql.p,
            pairs: ql.pairs,
            t: ql.t,
        };
        let fact = resolve_fact_line(ds, &fl).map_err(|e| at(e.to_string()))?;
        out.extend(
            ds.extract_queries(&[fact])
                .into_iter()
                .filter(|q| ql.hide.is_none_or(|h| q.masked == h)),
        );
    }
    Ok(out)
}

fn cmd_explain(
    checkpoint: &Path,
    dataset: Option<&Path>,
    queries: Option<&Path>,
    split: Option<Split>,
    beam: Option<usize>,
    limit: Option<usize>,
    out: Option<&Path>,
) -> CliResult<()> {
    let Loaded { ck, ds, .. } = load_checkpoint(checkpoint, dataset)?;
    let cfg = &ck.config;
    let width = beam.unwrap_or(cfg.beam);
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()).into());
    }
    let spec = cfg.model_spec(&ds);
    let agent = Agent::new(&ds, &spec, &ck.prior, cfg.action_cap, cfg.max_steps);
    let mut qs = match queries {
        Some(p) => read_queries(p, &ds)?,
        None => ds.queries(split.unwrap_or(Split::Test)),
    };
    if let Some(n) = limit {
        qs.truncate(n);
    }
    let refs: Vec<&Query> = qs.iter().collect();
    let results = train::beam_search_all(&agent, &ck.params, &refs, width, cfg.candidate_score)?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for (q, r) in qs.iter().zip(&results) {
        if let Some(ex) = train::explain(&agent, q, r)? {
            let mut v = serde_json::to_value(&ex)?;
            v["seed"] = json!(cfg.seed);
            writeln!(sink, "{}", serde_json::to_string(&v)?)?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn cmd_synth_gen(config: Option<&Path>, set: &[String], out: &Path) -> CliResult<()> {
    let mut map = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|_| Error::MissingFile(p.to_path_buf()))?;
            parse_config_text(&text)?
        }
        None => Map::new(),
    };
    for s in set {
        if !s.contains('=') {
            return Err(Error::Config(format!("expected key=value, got {s:?}")).into());
        }
        map.extend(parse_config_text(s)?);
    }
    let cfg: SynthConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(e.to_string()))?;
    let generated = synth::generate(&cfg)?;
    synth::write(&generated, &cfg, out)?;
    print_json(&json!({
        "out": out,
        "stats": generated.dataset.stats(),
        "rule_firings": generated.firings,
        "config": cfg,
    }))
}

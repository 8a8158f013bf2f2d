//! Command-line front end. Exit codes: 0 success, 1 pipeline error,
//! 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::click::{train_click_model, write_history_csv, BnLoss, SessionPair};
use crate::config::RunConfig;
use crate::datasets::{read_jsonl, read_session_pairs, write_jsonl, SessionRecord};
use crate::evaluate::{case_study, evaluate_ratings, evaluate_session_pairs, CaseStudyInput};
use crate::finetune::{finetune, ModelBundle, RatingExample, ScoringMode};
use crate::model_io::{load_model, save_model};
use crate::pipeline::{generate, prepare};
use crate::text::Vocab;
use crate::{Error, Result};

pub const THREADS_ENV: &str = "RELNN_THREADS";

pub const CONFIG_FILE: &str = "config.json";
pub const WORLD_FILE: &str = "world.json";
pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const PAIRS_TRAIN_FILE: &str = "pairs_train.jsonl";
pub const PAIRS_EVAL_FILE: &str = "pairs_eval.jsonl";
pub const RATINGS_SPLIT_FILES: [&str; 3] = ["ratings_train.jsonl", "ratings_valid.jsonl", "ratings_test.jsonl"];
pub const MODEL_FILE: &str = "model.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const CASE_STUDY_FILE: &str = "case_study.json";

#[derive(Debug, Parser)]
#[command(name = "relnn", version, about = "Pairwise neural relevance models trained from clicks")]
struct Cli {
    #[command(flatten)]
    opts: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum BnLossArg {
    Logloss,
    Hinge,
}

#[derive(Debug, Args)]
struct Overrides {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training steps of the `train` or `finetune` stage.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    embed_dim: Option<usize>,
    /// Comma-separated layer widths, ending in 1.
    #[arg(long, global = true, value_name = "CSV", value_parser = parse_layers)]
    layers: Option<LayerList>,
    #[arg(long, global = true, value_enum)]
    bn: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    bn_loss: Option<BnLossArg>,
    #[arg(long, global = true)]
    margin: Option<f64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ScoringMode>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world, session logs and ratings.
    Gen,
    /// Build a vocabulary from JSON Lines files.
    BuildVocab {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Turn session logs into split session pairs, split ratings and a vocabulary.
    Prepare {
        #[arg(long)]
        sessions: PathBuf,
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Train the click model on prepared session pairs.
    Train {
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a click model on rated examples.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        /// Directory written by `prepare`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute metrics on a ratings or session-pair file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score (query, title) pairs from a JSON Lines file.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score items under their own query and an unrelated one.
    CaseStudy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Clone)]
struct LayerList(Vec<usize>);

fn parse_layers(s: &str) -> std::result::Result<LayerList, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad layer width {p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(LayerList)
}

fn parse_mode(s: &str) -> std::result::Result<ScoringMode, String> {
    s.parse::<ScoringMode>().map_err(|e| e.to_string())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Value of `RELNN_THREADS`, if set. Training runs on one thread, so any
/// positive cap is honored.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn resolve_config(o: &Overrides, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let finetuning = matches!(command, Command::Finetune { .. });
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = o.steps {
        if finetuning {
            cfg.finetune.steps = steps;
        } else {
            cfg.train.steps = steps;
        }
    }
    if let Some(bs) = o.batch_size {
        if finetuning {
            cfg.finetune.batch_size = bs;
        } else {
            cfg.train.batch_size = bs;
        }
    }
    if let Some(d) = o.embed_dim {
        cfg.tower.embed_dim = d;
    }
    if let Some(LayerList(layers)) = &o.layers {
        if finetuning {
            cfg.finetune.layers = Some(layers.clone());
        } else {
            cfg.tower.layers = layers.clone();
        }
    }
    if let Some(bn) = o.bn {
        cfg.train.bn_enabled = bn == Switch::On;
    }
    if let Some(loss) = o.bn_loss {
        cfg.train.bn_loss = match loss {
            BnLossArg::Logloss => BnLoss::Logloss,
            BnLossArg::Hinge => BnLoss::Hinge,
        };
    }
    if let Some(m) = o.margin {
        cfg.train.margin = m;
    }
    if let Some(mode) = o.mode {
        cfg.finetune.mode = mode;
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| Error::Json { line: 0, source })?;
    s.push('\n');
    write_text(path, &s)
}

fn run(cli: Cli) -> Result<()> {
    thread_cap()?;
    let cfg = resolve_config(&cli.opts, &cli.command)?;
    let out = cli.opts.out.as_path();
    prepare_out(out, &cfg)?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg, out),
        Command::BuildVocab { inputs } => cmd_build_vocab(&cfg, &inputs, out),
        Command::Prepare { sessions, ratings } => cmd_prepare(&cfg, &sessions, ratings.as_deref(), out),
        Command::Train { data } => cmd_train(&cfg, &data, out),
        Command::Finetune { model, data } => cmd_finetune(&cfg, &model, &data, out),
        Command::Eval { model, input } => cmd_eval(&model, &input, out),
        Command::Score { model, input } => cmd_score(&model, &input, out),
        Command::CaseStudy { model, baseline, input } => cmd_case_study(&model, baseline.as_deref(), &input, out),
    }
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let generated = generate(cfg)?;
    write_json(&out.join(WORLD_FILE), &generated.world)?;
    write_jsonl(out.join(SESSIONS_FILE), &generated.sessions)?;
    write_jsonl(out.join(RATINGS_FILE), &generated.ratings)
}

const TEXT_KEYS: [&str; 4] = ["query", "title", "title_a", "title_b"];

fn collect_texts(value: &serde_json::Value, out: &mut Vec<String>) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                match v {
                    serde_json::Value::String(s) if TEXT_KEYS.contains(&k.as_str()) => out.push(s.clone()),
                    _ => collect_texts(v, out),
                }
            }
        }
        serde_json::Value::Array(items) => items.iter().for_each(|v| collect_texts(v, out)),
        _ => {}
    }
}

fn cmd_build_vocab(cfg: &RunConfig, inputs: &[PathBuf], out: &Path) -> Result<()> {
    let mut texts = Vec::new();
    for path in inputs {
        for value in read_jsonl::<serde_json::Value>(path)? {
            collect_texts(&value, &mut texts);
        }
    }
    Vocab::build(&texts, cfg.vocab.max_size, cfg.vocab.min_count)?.save(out.join(VOCAB_FILE))
}

fn cmd_prepare(cfg: &RunConfig, sessions: &Path, ratings: Option<&Path>, out: &Path) -> Result<()> {
    let records: Vec<SessionRecord> = read_jsonl(sessions)?;
    let examples: Vec<RatingExample> = match ratings {
        Some(path) => read_jsonl(path)?,
        None => Vec::new(),
    };
    let prepared = prepare(cfg, &records, examples)?;
    write_jsonl(out.join(PAIRS_TRAIN_FILE), &prepared.pairs_train)?;
    write_jsonl(out.join(PAIRS_EVAL_FILE), &prepared.pairs_eval)?;
    for (split, name) in prepared.ratings.iter().zip(RATINGS_SPLIT_FILES) {
        write_jsonl(out.join(name), split)?;
    }
    prepared.vocab.save(out.join(VOCAB_FILE))
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let vocab = Vocab::load(data.join(VOCAB_FILE))?;
    let train = read_session_pairs(data.join(PAIRS_TRAIN_FILE))?;
    let eval_path = data.join(PAIRS_EVAL_FILE);
    let eval: Vec<SessionPair> = if eval_path.exists() { read_session_pairs(eval_path)? } else { Vec::new() };
    let (params, history) = train_click_model(&train, &eval, &vocab, &cfg.tower, &cfg.train)?;
    save_model(&ModelBundle::from_click(vocab, params)?, out.join(MODEL_FILE))?;
    let mut csv = Vec::new();
    write_history_csv(&history, &mut csv)?;
    let path = out.join(HISTORY_FILE);
    fs::write(&path, csv).map_err(|e| Error::file(&path, e))
}

fn cmd_finetune(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<()> {
    let base = load_model(model)?;
    let train: Vec<RatingExample> = read_jsonl(data.join(RATINGS_SPLIT_FILES[0]))?;
    let tuned = finetune(&train, &base, &cfg.finetune)?;
    save_model(&tuned, out.join(MODEL_FILE))
}

/// A labeled evaluation file holds either rated examples or session pairs.
fn is_ratings_file(path: &Path) -> Result<bool> {
    let rows: Vec<serde_json::Value> = read_jsonl(path)?;
    match rows.first() {
        Some(first) if first.get("grade").is_some() => Ok(true),
        Some(first) if first.get("title_a").is_some() => Ok(false),
        Some(_) => Err(Error::invalid(format!("{}: neither ratings nor session pairs", path.display()))),
        None => Err(Error::invalid(format!("{}: no examples", path.display()))),
    }
}

fn cmd_eval(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let bundle = load_model(model)?;
    let report = if is_ratings_file(input)? {
        evaluate_ratings(&bundle, &read_jsonl::<RatingExample>(input)?)?
    } else {
        evaluate_session_pairs(&bundle, &read_session_pairs(input)?)?
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    println!("{}", serde_json::to_string(&report).map_err(|source| Error::Json { line: 0, source })?);
    Ok(())
}

#[derive(Debug, Clone, Deserialize)]
struct ScoreInput {
    query: String,
    title: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoredPair {
    pub query: String,
    pub title: String,
    pub score: f32,
}

fn cmd_score(model: &Path, input: &Path, out: &Path) -> Result<()> {
    let bundle = load_model(model)?;
    let rows: Vec<ScoreInput> = read_jsonl(input)?;
    let pairs: Vec<(&str, &str)> = rows.iter().map(|r| (r.query.as_str(), r.title.as_str())).collect();
    let scores = bundle.score_batch(&pairs)?;
    let scored: Vec<ScoredPair> = rows
        .into_iter()
        .zip(scores)
        .map(|(r, score)| ScoredPair { query: r.query, title: r.title, score })
        .collect();
    write_jsonl(out.join(SCORES_FILE), &scored)
}

fn cmd_case_study(model: &Path, baseline: Option<&Path>, input: &Path, out: &Path) -> Result<()> {
    let bundle = load_model(model)?;
    let baseline = baseline.map(load_model).transpose()?;
    let text = fs::read_to_string(input).map_err(|e| Error::file(input, e))?;
    let spec: CaseStudyInput =
        serde_json::from_str(&text).map_err(|source| Error::Json { line: source.line(), source })?;
    let report = case_study(&bundle, baseline.as_ref(), &spec)?;
    write_json(&out.join(CASE_STUDY_FILE), &report)?;
    for q in [&report.matched, &report.other] {
        println!("{:?}: scores in [{:.4}, {:.4}], mean {:.4}", q.query, q.min, q.max, q.mean);
    }
    match report.separation_ratio {
        Some(r) => println!("gap {:.4}, baseline gap {:.4}, separation ratio {r:.4}", report.gap, report.baseline_gap.unwrap_or(0.0)),
        None => println!("gap {:.4}", report.gap),
    }
    Ok(())
}

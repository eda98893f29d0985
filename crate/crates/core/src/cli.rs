//! Command-line surface: run configuration, the eight commands and their
//! report formats. Every command returns an [`Outcome`]; [`exit_code`] maps
//! it (or an error) to the process exit status.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autodiff::{grad_check, primitive_checks, Tape};
use crate::corpus::{load_corpus, oracle_labels, synthetic, tokenize, Cluster, Token};
use crate::extractor::{Extractor, ExtractorConfig, Vocab};
use crate::mmr::{greedy_mmr_indices, rouge_l_redundancy, tfidf_importance, MmrConfig, ScorerPair};
use crate::pobrl::{pobrl_summarize, BlendConfig, LambdaMode, TraceStep};
use crate::rl::{
    performance_difference_check, train_policy, warm_start, warm_start_loss, Decoding, EpochLog,
    Objective, RlConfig, TabularMdp, WarmStartConfig, Workers,
};
use crate::rouge::{decoupling_check, pairwise_redundancy, rouge_l, rouge_n, rouge_su4};
use crate::seed::{sha256_hex, SeedTree};
use crate::{Error, Result};

/// Finished command: either everything held, or a numerical check failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CHECK_FAILED: i32 = 2;

pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => EXIT_SUCCESS,
        Ok(Outcome::CheckFailed) => EXIT_CHECK_FAILED,
        Err(_) => EXIT_VALIDATION,
    }
}

/// Resolved settings for a run. Loaded from `key = value` lines (`#` starts
/// a comment), then overridden by `--set key=value` flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub model: ExtractorConfig,
    pub min_count: usize,
    pub warm_start: WarmStartConfig,
    pub rl: RlConfig,
    pub mmr_lambda: f64,
    pub mmr_budget: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            model: ExtractorConfig::default(),
            min_count: 2,
            warm_start: WarmStartConfig::default(),
            rl: RlConfig::default(),
            mmr_lambda: 0.7,
            mmr_budget: 100,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Every accepted key.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "workers",
        "model",
        "embedding_dim",
        "filters_per_window",
        "windows",
        "hidden",
        "article_layers",
        "init_bound",
        "min_count",
        "warm_epochs",
        "warm_lr",
        "warm_batch",
        "rl_epochs",
        "rl_lr",
        "rl_batch",
        "gamma",
        "entropy",
        "value_coef",
        "clip",
        "max_steps",
        "mmr_lambda",
        "mmr_budget",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "model" => {
                self.model = match value {
                    "default" => ExtractorConfig::default(),
                    "small" => ExtractorConfig::small(),
                    _ => return Err(Error::Config(format!("unknown model {value:?} (expected default|small)"))),
                }
            }
            "embedding_dim" => self.model.embedding_dim = parse(key, value)?,
            "filters_per_window" => self.model.filters_per_window = parse(key, value)?,
            "windows" => {
                self.model.windows = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            "hidden" => self.model.hidden = parse(key, value)?,
            "article_layers" => self.model.article_layers = parse(key, value)?,
            "init_bound" => self.model.init_bound = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "warm_epochs" => self.warm_start.epochs = parse(key, value)?,
            "warm_lr" => self.warm_start.lr = parse(key, value)?,
            "warm_batch" => self.warm_start.batch = parse(key, value)?,
            "rl_epochs" => self.rl.epochs = parse(key, value)?,
            "rl_lr" => self.rl.update.lr = parse(key, value)?,
            "rl_batch" => self.rl.batch = parse(key, value)?,
            "gamma" => self.rl.update.gamma = parse(key, value)?,
            "entropy" => self.rl.update.entropy_coef = parse(key, value)?,
            "value_coef" => self.rl.update.value_coef = parse(key, value)?,
            "clip" => {
                let clip: f64 = parse(key, value)?;
                self.rl.update.clip_norm = clip;
                self.warm_start.clip_norm = clip;
            }
            "max_steps" => self.rl.max_steps = parse(key, value)?,
            "mmr_lambda" => self.mmr_lambda = parse(key, value)?,
            "mmr_budget" => self.mmr_budget = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the overrides, then `seed`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            config.set(k, v)?;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        MmrConfig::new(self.mmr_lambda, self.mmr_budget)?;
        if self.workers == 0 || self.warm_start.batch == 0 || self.rl.batch == 0 || self.rl.max_steps == 0 {
            return Err(Error::Config("workers, batch sizes and max_steps must be positive".into()));
        }
        if !(self.rl.update.gamma > 0.0 && self.rl.update.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.rl.update.gamma)));
        }
        for (name, v) in [("warm_lr", self.warm_start.lr), ("rl_lr", self.rl.update.lr), ("clip", self.rl.update.clip_norm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Worker pool sized by `workers`, unless `POBRL_WORKERS` overrides it.
    pub fn workers(&self) -> Result<Workers> {
        Workers::from_env(self.workers)
    }
}

/// Provenance block embedded in every artifact.
pub fn provenance(config: &RunConfig, checkpoint_hash: Option<&str>) -> Value {
    json!({
        "seed": config.seed,
        "config_hash": config.hash(),
        "checkpoint_hash": checkpoint_hash,
    })
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn write_jsonl(path: &Path, lines: &[Value]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).expect("value serializes"));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

/// Options shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides, self.seed)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pobrl", version, about = "Policy-blended extractive multi-document summarization")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Oracle extraction labels for every cluster with a gold summary.
    Oracle {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm start, then the importance and redundancy policies.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarize a corpus with the blended policy or a baseline.
    Summarize(SummarizeArgs),
    /// ROUGE-1/2/L/SU4 F1 of summaries against the gold.
    Eval {
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also report ROUGE-1 per number of source articles.
        #[arg(long)]
        by_doc_count: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean pairwise ROUGE-L F1 between the sentences of each summary.
    Redundancy {
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the extractor loss.
    Gradcheck(GradcheckArgs),
    /// Performance-difference identity on random tabular MDPs.
    Mdpcheck(MdpcheckArgs),
    /// Decoupled importance/redundancy expansion of ROUGE-N recall.
    Decouple {
        #[arg(long)]
        summaries: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required_unless_present = "mmr_baseline")]
    pub importance: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["mmr_baseline", "single_policy"])]
    pub redundancy: Option<PathBuf>,
    /// fixed:<x> or adaptive.
    #[arg(long, default_value = "fixed:0.5")]
    pub lambda: String,
    /// greedy or sample.
    #[arg(long, default_value = "greedy")]
    pub decoding: String,
    /// Run greedy MMR with tf-idf importance instead of the policies.
    #[arg(long, conflicts_with = "single_policy")]
    pub mmr_baseline: bool,
    /// Importance policy alone (λ = 1).
    #[arg(long)]
    pub single_policy: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Random instances per primitive.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub primitive_tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub extractor_tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            trials: 10,
            epsilon: 1e-4,
            primitive_tolerance: 1e-4,
            extractor_tolerance: 1e-3,
            out: None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MdpcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub mdps: usize,
    #[arg(long, default_value_t = 8)]
    pub max_states: usize,
    #[arg(long, default_value_t = 3)]
    pub actions: usize,
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Default for MdpcheckArgs {
    fn default() -> Self {
        Self {
            mdps: 100,
            max_states: 8,
            actions: 3,
            gamma: 0.9,
            tolerance: 1e-6,
            out: None,
        }
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_SUCCESS };
        }
    };
    let result = run(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let config = cli.common.resolve()?;
    match &cli.command {
        Command::Oracle { corpus, out } => cmd_oracle(&config, corpus, out),
        Command::Train { corpus, out_dir } => cmd_train(&config, corpus, out_dir).map(|_| Outcome::Success),
        Command::Summarize(args) => cmd_summarize(&config, args),
        Command::Eval {
            summaries,
            corpus,
            by_doc_count,
            out,
        } => {
            let report = cmd_eval(&config, summaries, corpus, *by_doc_count)?;
            print_eval(&report);
            emit(out.as_deref(), &serde_json::to_value(&report).expect("report serializes"))
        }
        Command::Redundancy { summaries, out } => {
            let report = cmd_redundancy(&config, summaries)?;
            println!(
                "mean redundancy {:.4} (x100: {:.2}) over {} summaries",
                report.mean,
                report.mean_x100,
                report.summaries.len()
            );
            emit(out.as_deref(), &serde_json::to_value(&report).expect("report serializes"))
        }
        Command::Gradcheck(args) => {
            let report = cmd_gradcheck(&config, args)?;
            for line in &report.checks {
                println!(
                    "{:<14} max rel err {:.3e}  tol {:.0e}  {}",
                    line.name,
                    line.max_relative_error,
                    line.tolerance,
                    if line.passed { "ok" } else { "FAILED" }
                );
            }
            emit(args.out.as_deref(), &serde_json::to_value(&report).expect("report serializes"))?;
            Ok(report.outcome())
        }
        Command::Mdpcheck(args) => {
            let report = cmd_mdpcheck(&config, args)?;
            println!(
                "{} MDPs, max gap {:.3e} (tolerance {:.0e})",
                report.mdps, report.max_gap, report.tolerance
            );
            emit(args.out.as_deref(), &serde_json::to_value(&report).expect("report serializes"))?;
            Ok(report.outcome())
        }
        Command::Decouple {
            summaries,
            corpus,
            n,
            out,
        } => {
            let report = cmd_decouple(&config, summaries, corpus, *n)?;
            for e in &report.entries {
                println!("{:<16} sentences {}  exact {:.6}  approx {:.6}  gap {:.3e}", e.id, e.sentences, e.exact, e.approx, e.gap);
            }
            emit(out.as_deref(), &serde_json::to_value(&report).expect("report serializes"))?;
            Ok(report.outcome())
        }
    }
}

fn emit(out: Option<&Path>, value: &Value) -> Result<Outcome> {
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(value).expect("value serializes");
        text.push('\n');
        write_file(path, text.as_bytes())?;
    }
    Ok(Outcome::Success)
}

/// Writes `{"id", "labels", "provenance"}` per cluster; clusters without a
/// gold summary are skipped with a warning.
pub fn cmd_oracle(config: &RunConfig, corpus: &Path, out: &Path) -> Result<Outcome> {
    let clusters = load_corpus(corpus)?;
    let prov = provenance(config, None);
    let mut lines = Vec::new();
    for c in &clusters {
        if c.gold().is_empty() {
            log::warn!("cluster {} has no gold summary; skipped", c.id());
            continue;
        }
        let labels = oracle_labels(c)?;
        lines.push(json!({"id": c.id(), "labels": labels.labels, "provenance": prov}));
    }
    write_jsonl(out, &lines)?;
    Ok(Outcome::Success)
}

/// Files written by [`cmd_train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub warm_start: PathBuf,
    pub importance: PathBuf,
    pub redundancy: PathBuf,
    pub log: PathBuf,
    /// Checkpoint hashes in the order above.
    pub hashes: [String; 3],
}

pub fn cmd_train(config: &RunConfig, corpus: &Path, out_dir: &Path) -> Result<TrainOutput> {
    require_file(corpus)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let clusters = load_corpus(corpus)?;
    if !clusters.iter().any(|c| !c.gold().is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let workers = config.workers()?;
    let seeds = SeedTree::new(config.seed);
    let prov = provenance(config, None);
    let mut log_lines = Vec::new();

    let vocab = Vocab::build(&clusters, config.min_count);
    let mut extractor = Extractor::new(config.model.clone(), vocab, &mut seeds.rng("init"))?;
    let curve = warm_start(&mut extractor, &clusters, &config.warm_start, &seeds.split("warm-start"), &workers)?;
    for (epoch, loss) in curve.iter().enumerate() {
        log_lines.push(json!({"policy": "warm_start", "epoch": epoch, "mean_loss": loss, "provenance": prov}));
    }
    let out = TrainOutput {
        warm_start: out_dir.join("warm_start.ckpt"),
        importance: out_dir.join("importance.ckpt"),
        redundancy: out_dir.join("redundancy.ckpt"),
        log: out_dir.join("train_log.jsonl"),
        hashes: Default::default(),
    };
    let meta = |stage: &str| json!({"stage": stage, "provenance": prov});
    let mut hashes: [String; 3] = Default::default();
    hashes[0] = extractor.save(&out.warm_start, meta("warm_start"))?;
    for (slot, objective, path) in [
        (1, Objective::Importance, &out.importance),
        (2, Objective::Redundancy, &out.redundancy),
    ] {
        let policy = train_policy(objective, &extractor, &clusters, &config.rl, &seeds, &workers, |l: &EpochLog| {
            log::info!(
                "{} epoch {}: reward {:.4} loss {:.4} length {:.2}",
                objective.name(),
                l.epoch,
                l.mean_reward,
                l.mean_loss,
                l.mean_summary_len
            );
            let mut line = serde_json::to_value(l).expect("log serializes");
            line["policy"] = json!(objective.name());
            line["provenance"] = prov.clone();
            log_lines.push(line);
        })?;
        hashes[slot] = policy.save(path, meta(objective.name()))?;
    }
    write_jsonl(&out.log, &log_lines)?;
    Ok(TrainOutput { hashes, ..out })
}

/// One line of a summaries file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub summary: Vec<String>,
    #[serde(default)]
    pub trace: Vec<TraceStep>,
    #[serde(default)]
    pub provenance: Value,
}

pub fn read_summaries(path: &Path) -> Result<Vec<SummaryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_summaries(path: &Path, records: &[SummaryRecord]) -> Result<()> {
    let lines: Vec<Value> = records
        .iter()
        .map(|r| serde_json::to_value(r).expect("record serializes"))
        .collect();
    write_jsonl(path, &lines)
}

fn load_policy(path: &Path) -> Result<(Extractor, String)> {
    require_file(path)?;
    let hash = file_hash(path)?;
    let (extractor, _) = Extractor::load(path)?;
    Ok((extractor, hash))
}

pub fn cmd_summarize(config: &RunConfig, args: &SummarizeArgs) -> Result<Outcome> {
    require_file(&args.corpus)?;
    let decoding: Decoding = args.decoding.parse()?;
    let lambda: LambdaMode = if args.single_policy {
        LambdaMode::Fixed(1.0)
    } else {
        args.lambda.parse()?
    };
    let clusters = load_corpus(&args.corpus)?;
    let workers = config.workers()?;
    let records = if args.mmr_baseline {
        let mmr = MmrConfig::new(config.mmr_lambda, config.mmr_budget)?;
        let prov = provenance(config, None);
        workers.map(&clusters, |_, c| {
            let scorers = ScorerPair::new(tfidf_importance(c), rouge_l_redundancy());
            let picked = greedy_mmr_indices(c, mmr, &scorers);
            Ok(record(c, &picked, Vec::new(), prov.clone()))
        })?
    } else {
        let importance = args
            .importance
            .as_deref()
            .ok_or_else(|| Error::Config("--importance is required".into()))?;
        let (imp, imp_hash) = load_policy(importance)?;
        let (red, red_hash) = match (&args.redundancy, args.single_policy) {
            (Some(p), _) => load_policy(p)?,
            (None, true) => (imp.clone(), imp_hash.clone()),
            (None, false) => return Err(Error::Config("--redundancy is required".into())),
        };
        if imp.vocab().hash() != red.vocab().hash() {
            return Err(Error::VocabMismatch {
                checkpoint: imp.vocab().hash(),
                vocab: red.vocab().hash(),
            });
        }
        let prov = provenance(config, Some(&sha256_hex(format!("{imp_hash}{red_hash}").as_bytes())));
        let blend = BlendConfig {
            lambda,
            max_steps: config.rl.max_steps,
            decoding,
        };
        let seeds = SeedTree::new(config.seed).split("summarize");
        workers.map(&clusters, |i, c| {
            let mut rng = seeds.split_index("cluster", i as u64).rng("decode");
            let s = pobrl_summarize(c, &imp, &red, &blend, &mut rng)?;
            Ok(record(c, &s.summary, s.trace, prov.clone()))
        })?
    };
    write_summaries(&args.out, &records)?;
    Ok(Outcome::Success)
}

fn record(cluster: &Cluster, picked: &[usize], trace: Vec<TraceStep>, provenance: Value) -> SummaryRecord {
    SummaryRecord {
        id: cluster.id().to_owned(),
        summary: picked.iter().map(|&i| cluster.sentence(i).text()).collect(),
        trace,
        provenance,
    }
}

/// Mean F1 of each metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeTable {
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub rouge_su4: f64,
}

impl RougeTable {
    pub fn score(summary: &[Token], gold: &[Token]) -> Self {
        Self {
            rouge_1: rouge_n(summary, gold, 1).f1,
            rouge_2: rouge_n(summary, gold, 2).f1,
            rouge_l: rouge_l(summary, gold).f1,
            rouge_su4: rouge_su4(summary, gold).f1,
        }
    }

    fn add(&mut self, o: &Self) {
        self.rouge_1 += o.rouge_1;
        self.rouge_2 += o.rouge_2;
        self.rouge_l += o.rouge_l;
        self.rouge_su4 += o.rouge_su4;
    }

    fn scaled(&self, s: f64) -> Self {
        Self {
            rouge_1: self.rouge_1 * s,
            rouge_2: self.rouge_2 * s,
            rouge_l: self.rouge_l * s,
            rouge_su4: self.rouge_su4 * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocCountRow {
    pub clusters: usize,
    pub rouge_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clusters: usize,
    /// Clusters without a gold summary, which are not scored.
    pub skipped: usize,
    pub mean: RougeTable,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub by_doc_count: Option<BTreeMap<usize, DocCountRow>>,
    pub provenance: Value,
}

/// Provenance for a report over summaries: the checkpoint hash is carried
/// over from the summaries file when all records agree on one.
fn report_provenance(config: &RunConfig, records: &[SummaryRecord]) -> Value {
    let mut hashes = records.iter().map(|r| r.provenance.get("checkpoint_hash").and_then(Value::as_str));
    let first = hashes.next().flatten();
    let shared = if hashes.all(|h| h == first) { first } else { None };
    provenance(config, shared)
}

fn summary_tokens(summary: &[String]) -> Vec<Token> {
    summary.iter().flat_map(|s| tokenize(s)).collect()
}

/// Pairs each summary with its cluster; any id present on one side only is
/// an error listing all offenders.
fn align<'a>(summaries: &'a [SummaryRecord], clusters: &'a [Cluster]) -> Result<Vec<(&'a SummaryRecord, &'a Cluster)>> {
    let by_id: BTreeMap<&str, &Cluster> = clusters.iter().map(|c| (c.id(), c)).collect();
    let summary_ids: std::collections::BTreeSet<&str> = summaries.iter().map(|s| s.id.as_str()).collect();
    let mut offenders: Vec<String> = summaries
        .iter()
        .filter(|s| !by_id.contains_key(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    offenders.extend(clusters.iter().filter(|c| !summary_ids.contains(c.id())).map(|c| c.id().to_owned()));
    if !offenders.is_empty() {
        return Err(Error::IdMismatch(offenders));
    }
    Ok(summaries.iter().map(|s| (s, by_id[s.id.as_str()])).collect())
}

pub fn cmd_eval(config: &RunConfig, summaries: &Path, corpus: &Path, by_doc_count: bool) -> Result<EvalReport> {
    let records = read_summaries(summaries)?;
    let clusters = load_corpus(corpus)?;
    let pairs = align(&records, &clusters)?;
    let mut total = RougeTable::default();
    let mut groups: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    let mut scored = 0;
    for (record, cluster) in &pairs {
        if cluster.gold().is_empty() {
            continue;
        }
        let row = RougeTable::score(&summary_tokens(&record.summary), &cluster.gold_tokens());
        total.add(&row);
        scored += 1;
        let g = groups.entry(cluster.num_articles()).or_default();
        g.0 += 1;
        g.1 += row.rouge_1;
    }
    let mean = if scored == 0 { total } else { total.scaled(1.0 / scored as f64) };
    Ok(EvalReport {
        clusters: scored,
        skipped: pairs.len() - scored,
        mean,
        by_doc_count: by_doc_count.then(|| {
            groups
                .into_iter()
                .map(|(docs, (n, r1))| (docs, DocCountRow { clusters: n, rouge_1: r1 / n as f64 }))
                .collect()
        }),
        provenance: report_provenance(config, &records),
    })
}

fn print_eval(report: &EvalReport) {
    let m = &report.mean;
    println!("clusters  ROUGE-1  ROUGE-2  ROUGE-L  ROUGE-SU4");
    println!(
        "{:>8}  {:>7.2}  {:>7.2}  {:>7.2}  {:>9.2}",
        report.clusters,
        100.0 * m.rouge_1,
        100.0 * m.rouge_2,
        100.0 * m.rouge_l,
        100.0 * m.rouge_su4
    );
    if let Some(groups) = &report.by_doc_count {
        println!("documents  clusters  ROUGE-1");
        for (docs, row) in groups {
            println!("{docs:>9}  {:>8}  {:>7.2}", row.clusters, 100.0 * row.rouge_1);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyEntry {
    pub id: String,
    pub redundancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub summaries: Vec<RedundancyEntry>,
    pub mean: f64,
    pub mean_x100: f64,
    pub provenance: Value,
}

pub fn cmd_redundancy(config: &RunConfig, summaries: &Path) -> Result<RedundancyReport> {
    let records = read_summaries(summaries)?;
    let entries: Vec<RedundancyEntry> = records
        .iter()
        .map(|r| {
            let sentences: Vec<Vec<Token>> = r.summary.iter().map(|s| tokenize(s)).collect();
            RedundancyEntry {
                id: r.id.clone(),
                redundancy: pairwise_redundancy(&sentences),
            }
        })
        .collect();
    let mean = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.redundancy).sum::<f64>() / entries.len() as f64
    };
    Ok(RedundancyReport {
        summaries: entries,
        mean,
        mean_x100: 100.0 * mean,
        provenance: report_provenance(config, &records),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckLine>,
    pub provenance: Value,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn outcome(&self) -> Outcome {
        if self.passed() {
            Outcome::Success
        } else {
            Outcome::CheckFailed
        }
    }
}

/// Small network used for the whole-extractor gradient check.
pub fn gradcheck_model() -> ExtractorConfig {
    ExtractorConfig {
        embedding_dim: 6,
        windows: vec![3, 4, 5],
        filters_per_window: 3,
        hidden: 5,
        article_layers: 2,
        init_bound: 0.5,
    }
}

/// Checks every primitive and the warm-start loss of a small extractor on a
/// 2-article, 3-sentence-per-article cluster.
pub fn cmd_gradcheck(config: &RunConfig, args: &GradcheckArgs) -> Result<GradcheckReport> {
    let seeds = SeedTree::new(config.seed).split("gradcheck");
    let mut rng = seeds.rng("primitives");
    let mut checks: Vec<CheckLine> = primitive_checks(args.trials, args.epsilon, &mut rng)?
        .into_iter()
        .map(|c| CheckLine {
            name: c.primitive.name().to_owned(),
            max_relative_error: c.max_relative_error,
            tolerance: args.primitive_tolerance,
            passed: c.max_relative_error < args.primitive_tolerance,
        })
        .collect();
    let cluster = synthetic::toy_corpus(1, config.seed).remove(0);
    let labels = oracle_labels(&cluster)?;
    let vocab = Vocab::build(std::slice::from_ref(&cluster), 1);
    let extractor = Extractor::new(gradcheck_model(), vocab, &mut seeds.rng("extractor"))?;
    let err = grad_check(
        extractor.params(),
        |tape: &mut Tape<'_>| warm_start_loss(&extractor, tape, &cluster, &labels),
        args.epsilon,
        &mut seeds.rng("extractor-probe"),
    )?;
    checks.push(CheckLine {
        name: "extractor_nll".into(),
        max_relative_error: err,
        tolerance: args.extractor_tolerance,
        passed: err < args.extractor_tolerance,
    });
    Ok(GradcheckReport {
        checks,
        provenance: provenance(config, None),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpcheckReport {
    pub mdps: usize,
    pub max_gap: f64,
    pub tolerance: f64,
    pub gaps: Vec<f64>,
    pub provenance: Value,
}

impl MdpcheckReport {
    pub fn outcome(&self) -> Outcome {
        if self.max_gap < self.tolerance {
            Outcome::Success
        } else {
            Outcome::CheckFailed
        }
    }
}

/// Random MDPs with 1..=max_states states and random policy pairs.
pub fn cmd_mdpcheck(config: &RunConfig, args: &MdpcheckArgs) -> Result<MdpcheckReport> {
    if args.mdps == 0 || args.max_states == 0 || args.actions == 0 {
        return Err(Error::Config("mdps, max_states and actions must be positive".into()));
    }
    if !(args.gamma > 0.0 && args.gamma < 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", args.gamma)));
    }
    let seeds = SeedTree::new(config.seed).split("mdpcheck");
    let gaps = (0..args.mdps)
        .map(|i| {
            let mut rng = seeds.split_index("mdp", i as u64).rng("draw");
            let states = 1 + (i % args.max_states);
            let mdp = TabularMdp::random(states, args.actions, args.gamma, &mut rng)?;
            let mix = mdp.random_policy(&mut rng);
            let imp = mdp.random_policy(&mut rng);
            Ok(performance_difference_check(&mdp, &mix, &imp)?.gap)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(MdpcheckReport {
        mdps: args.mdps,
        max_gap: gaps.iter().copied().fold(0.0, f64::max),
        tolerance: args.tolerance,
        gaps,
        provenance: provenance(config, None),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupleEntry {
    pub id: String,
    pub sentences: usize,
    pub exact: f64,
    pub approx: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupleReport {
    pub n: usize,
    pub entries: Vec<DecoupleEntry>,
    pub provenance: Value,
}

impl DecoupleReport {
    /// Fails when a summary of at most two sentences shows a nonzero gap or
    /// any gap is non-finite.
    pub fn outcome(&self) -> Outcome {
        let bad = self
            .entries
            .iter()
            .any(|e| !e.gap.is_finite() || (e.sentences <= 2 && e.gap != 0.0));
        if bad {
            Outcome::CheckFailed
        } else {
            Outcome::Success
        }
    }
}

pub fn cmd_decouple(config: &RunConfig, summaries: &Path, corpus: &Path, n: usize) -> Result<DecoupleReport> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let records = read_summaries(summaries)?;
    let clusters = load_corpus(corpus)?;
    let pairs = align(&records, &clusters)?;
    let entries = pairs
        .iter()
        .filter(|(_, c)| !c.gold().is_empty())
        .map(|(r, c)| {
            let sentences: Vec<Vec<Token>> = r.summary.iter().map(|s| tokenize(s)).collect();
            let d = decoupling_check(&sentences, &c.gold_tokens(), n);
            DecoupleEntry {
                id: r.id.clone(),
                sentences: sentences.len(),
                exact: d.exact,
                approx: d.approx,
                gap: d.gap,
            }
        })
        .collect();
    Ok(DecoupleReport {
        n,
        entries,
        provenance: report_provenance(config, &records),
    })
}

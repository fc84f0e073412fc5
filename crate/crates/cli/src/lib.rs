//! The `hero` command line: dataset generation, training, evaluation and
//! corpus analysis, each run leaving a manifest next to its outputs.

pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hero_core::{
    analyzer, generate_dataset, load_model, novelty_report, ov_split_violations, read_dataset, save_model, synth,
    evaluate_model, train_observed, EpochLog, HeroError, HitRule, MetricsReport, Split, SynthConfig, TrainConfig,
    TrainObserver,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use manifest::{dataset_hashes, RunManifest};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }

    /// 1 for I/O, 2 for configuration or malformed input, 3 for a
    /// numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }
}

impl From<HeroError> for CliError {
    fn from(e: HeroError) -> Self {
        match e {
            HeroError::Io { ref path, .. } => CliError::Io {
                path: path.clone(),
                msg: e.to_string(),
            },
            HeroError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hero", version, about = "Open-vocabulary temporal sentence grounding")]
pub struct Cli {
    /// Overrides the seed of the loaded config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// JSON config, or a run manifest whose `config` is reused.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark.
    GenData,
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on dataset splits.
    Eval(EvalArgs),
    /// Vocabulary-novelty report of query corpora.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated: no-hem, no-sgvf, no-cmtr.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<String>,
    /// Number of hierarchy levels.
    #[arg(long)]
    pub taps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated split names.
    #[arg(long, value_delimiter = ',')]
    pub split: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Training corpus file, or a dataset directory (its train split).
    #[arg(long)]
    pub train: PathBuf,
    /// Test corpora, one report each.
    #[arg(long, required = true, num_args = 1..)]
    pub test: Vec<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: Vec<Split>,
    pub hit_rule: HitRule,
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: vec![Split::TestIid, Split::TestOv],
            hit_rule: HitRule::AtLeast,
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub k: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

/// Keeps large tensor buffers on the heap instead of a fresh mmap per
/// allocation; training allocates and frees many of them per step.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Loads `T` from `path` (defaults when absent). A run manifest is accepted
/// in place of a config and contributes its `config` object.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    if value.get("command").is_some() {
        if let Some(cfg) = value.get_mut("config") {
            value = cfg.take();
        }
    }
    serde_json::from_value(value).map_err(bad)
}

fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn pretty<T: Serialize>(v: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(|e| CliError::Config(e.to_string()))? + "\n")
}

struct Run {
    manifest: RunManifest,
    out: PathBuf,
    start: Instant,
}

impl Run {
    /// Creates the output directory and writes the initial manifest.
    fn begin(cli: &Cli, args: &[String], command: &str, config: serde_json::Value, prepare: impl FnOnce(&mut RunManifest)) -> Result<Self, CliError> {
        fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
        let mut manifest = RunManifest::new(command, args.to_vec(), config, &cli.out);
        if let Some(c) = &cli.config {
            manifest.inputs.push(c.clone());
        }
        prepare(&mut manifest);
        manifest.write(&cli.out)?;
        Ok(Self {
            manifest,
            out: cli.out.clone(),
            start: Instant::now(),
        })
    }

    fn finish(mut self, outputs: &[String]) -> Result<(), CliError> {
        self.manifest.record_outputs(&self.out, outputs)?;
        self.manifest.duration_s = Some(self.start.elapsed().as_secs_f64());
        self.manifest.write(&self.out)
    }
}

/// Parses and runs; `args` excludes the program name.
pub fn run_args(args: &[String]) -> Result<(), CliError> {
    let cli = Cli::try_parse_from(std::iter::once("hero".to_string()).chain(args.iter().cloned()))
        .map_err(|e| CliError::Config(e.to_string()))?;
    run(&cli, args)
}

pub fn run(cli: &Cli, args: &[String]) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData => gen_data(cli, args),
        Command::Train(t) => train_cmd(cli, args, t),
        Command::Eval(e) => eval_cmd(cli, args, e),
        Command::Analyze(a) => analyze_cmd(cli, args, a),
    }
}

fn gen_data(cli: &Cli, args: &[String]) -> Result<(), CliError> {
    let mut cfg: SynthConfig = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let run = Run::begin(cli, args, "gen-data", to_json(&cfg)?, |m| {
        m.seeds.insert("seed".into(), cfg.seed);
    })?;
    let ds = generate_dataset(&cfg)?;
    synth::write_dataset(&ds, &run.out)?;
    let mut run = run;
    run.manifest.dataset_hashes = dataset_hashes(&run.out)?;
    let outputs: Vec<String> = synth::DATASET_FILES.iter().map(|s| s.to_string()).collect();
    run.finish(&outputs)
}

fn require_dir(path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::io(path, "dataset directory not found"))
    }
}

/// Applies `--ablate` names to a model config.
pub fn apply_ablations(cfg: &mut TrainConfig, names: &[String]) -> Result<(), CliError> {
    for name in names {
        match name.trim() {
            "no-hem" => cfg.model.disable_hem = true,
            "no-sgvf" => cfg.model.disable_sgvf = true,
            "no-cmtr" => cfg.model.disable_cmtr = true,
            "" => {}
            other => {
                return Err(CliError::Config(format!(
                    "unknown ablation `{other}`; valid: no-hem, no-sgvf, no-cmtr"
                )))
            }
        }
    }
    Ok(())
}

struct Progress {
    quiet: bool,
}

impl TrainObserver for Progress {
    fn epoch(&mut self, log: &EpochLog) {
        if !self.quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val r1@0.5 {:.4}  r1@0.7 {:.4}  miou {:.4}",
                log.epoch, log.mean_total, log.val.r1_05, log.val.r1_07, log.val.miou
            );
        }
    }
}

fn metrics_csv(rows: &[(Split, &MetricsReport)]) -> String {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for (split, r) in rows {
        out.push_str(&r.csv_row(split.as_str()));
        out.push('\n');
    }
    out
}

fn train_cmd(cli: &Cli, args: &[String], t: &TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainConfig = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    apply_ablations(&mut cfg, &t.ablate)?;
    if let Some(n) = t.taps {
        cfg.model.taps = n;
    }
    if let Some(n) = t.epochs {
        cfg.epochs = n;
    }
    cfg.validate()?;
    require_dir(&t.data)?;
    let hashes = dataset_hashes(&t.data)?;
    let ds = read_dataset(&t.data)?;
    let mut run = Run::begin(cli, args, "train", to_json(&cfg)?, |m| {
        m.seeds.insert("seed".into(), cfg.seed);
        m.seeds.insert("data_seed".into(), ds.world.seed);
        m.inputs.push(t.data.clone());
        m.dataset_hashes = hashes;
    })?;
    let trained = train_observed(&cfg, &ds, &mut Progress { quiet: t.quiet })?;

    let out = run.out.clone();
    save_model(&out.join(CHECKPOINT_FILE), &cfg, &trained.model, &trained.store)?;
    write_file(&out.join("train_log.csv"), trained.log.steps_csv())?;
    let mut epochs = String::from("epoch,mean_total,r1_03,r1_05,r1_07,miou\n");
    for e in &trained.log.epochs {
        epochs.push_str(&format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.mean_total, e.val.r1_03, e.val.r1_05, e.val.r1_07, e.val.miou
        ));
    }
    write_file(&out.join("val_log.csv"), epochs)?;
    let summary = serde_json::json!({
        "best_epoch": trained.log.best_epoch,
        "val": trained.log.epochs.iter().map(|e| &e.val).collect::<Vec<_>>(),
        "test_iid": trained.log.test_iid,
        "test_ov": trained.log.test_ov,
    });
    write_file(&out.join("metrics.json"), pretty(&summary)?)?;
    let mut rows = Vec::new();
    if let Some(r) = &trained.log.test_iid {
        rows.push((Split::TestIid, r));
    }
    if let Some(r) = &trained.log.test_ov {
        rows.push((Split::TestOv, r));
    }
    write_file(&out.join("metrics.csv"), metrics_csv(&rows))?;
    run.manifest.outputs.clear();
    let names = ["checkpoint.json", "checkpoint.bin", "train_log.csv", "val_log.csv", "metrics.json", "metrics.csv"];
    run.finish(&names.map(String::from))
}

fn eval_cmd(cli: &Cli, args: &[String], e: &EvalArgs) -> Result<(), CliError> {
    let mut cfg: EvalConfig = load_config(cli.config.as_deref())?;
    if !e.split.is_empty() {
        cfg.splits = e.split.iter().map(|s| s.trim().parse::<Split>()).collect::<Result<_, _>>()?;
    }
    if cfg.splits.is_empty() || cfg.batch == 0 {
        return Err(CliError::Config("eval needs at least one split and a positive batch".into()));
    }
    require_dir(&e.data)?;
    let hashes = dataset_hashes(&e.data)?;
    let ds = read_dataset(&e.data)?;
    if !e.checkpoint.is_file() {
        return Err(CliError::io(&e.checkpoint, "checkpoint not found"));
    }
    let checkpoint_hash = manifest::hash_file(&e.checkpoint)?;
    let (train_cfg, model, store) = load_model(&e.checkpoint, &ds.world.table).map_err(|err| match err {
        HeroError::Tensor(_) | HeroError::Json(_) => CliError::io(&e.checkpoint, err),
        other => other.into(),
    })?;
    let run = Run::begin(cli, args, "eval", to_json(&cfg)?, |m| {
        m.seeds.insert("seed".into(), train_cfg.seed);
        m.inputs.push(e.checkpoint.clone());
        m.inputs.push(e.data.clone());
        m.dataset_hashes = hashes;
        m.dataset_hashes.insert("checkpoint".into(), checkpoint_hash);
    })?;
    let mut reports = Vec::new();
    for &split in &cfg.splits {
        let samples = ds.split(split)?;
        reports.push((split, evaluate_model(&model, &store, &ds.world.vocab, samples, cfg.hit_rule, cfg.batch)?));
    }
    let json: serde_json::Map<String, serde_json::Value> = reports
        .iter()
        .map(|(s, r)| Ok((s.as_str().to_string(), to_json(r)?)))
        .collect::<Result<_, CliError>>()?;
    write_file(&run.out.join("metrics.json"), pretty(&json)?)?;
    let rows: Vec<(Split, &MetricsReport)> = reports.iter().map(|(s, r)| (*s, r)).collect();
    write_file(&run.out.join("metrics.csv"), metrics_csv(&rows))?;
    run.finish(&["metrics.json".to_string(), "metrics.csv".to_string()])
}

fn corpus(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    if path.is_dir() {
        return Ok(analyzer::read_corpus(&path.join("train.jsonl"))?);
    }
    if !path.exists() {
        return Err(CliError::io(path, "corpus not found"));
    }
    Ok(analyzer::read_corpus(path)?)
}

#[derive(Serialize)]
struct CorpusReport<'a> {
    corpus: &'a Path,
    ov_split: bool,
    violations: usize,
    #[serde(flatten)]
    report: hero_core::NoveltyReport,
}

fn analyze_cmd(cli: &Cli, args: &[String], a: &AnalyzeArgs) -> Result<(), CliError> {
    let mut cfg: AnalyzeConfig = load_config(cli.config.as_deref())?;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    let train = corpus(&a.train)?;
    let tests = a.test.iter().map(|p| corpus(p)).collect::<Result<Vec<_>, _>>()?;
    let run = Run::begin(cli, args, "analyze", to_json(&cfg)?, |m| {
        m.inputs.push(a.train.clone());
        m.inputs.extend(a.test.iter().cloned());
    })?;
    let vocab = hero_core::build_vocab(&train);
    let mut outputs = Vec::new();
    for (i, (path, test)) in a.test.iter().zip(&tests).enumerate() {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = if a.test.len() > 1 { format!("{i}_{stem}") } else { stem };
        let report = novelty_report(test, &vocab, cfg.k)?;
        let violations = ov_split_violations(test, &vocab).len();
        let csv = report.histogram_csv();
        let doc = CorpusReport {
            corpus: path,
            ov_split: violations == 0,
            violations,
            report,
        };
        let (json_name, csv_name) = (format!("{stem}.report.json"), format!("{stem}.histogram.csv"));
        write_file(&run.out.join(&json_name), pretty(&doc)?)?;
        write_file(&run.out.join(&csv_name), csv)?;
        outputs.push(json_name);
        outputs.push(csv_name);
    }
    run.finish(&outputs)
}

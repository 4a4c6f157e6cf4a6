//! Configuration files, metrics CSVs, multi-seed runs and summary tables.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_client::{self, ChatClient, ClientError, EndpointConfig, HttpChatClient};
use crate::numfmt::sig;
use crate::par;
use crate::trainer::{ActiveRule, Algo, EpochMetrics, SelectorChoice, TrainConfig, TrainError, Trainer};

/// Significant digits of every float written to a metrics CSV.
pub const CSV_DIGITS: usize = 9;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const RECORD_FILE: &str = "run.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed metrics file {path}: {reason}")]
    BadMetrics { path: PathBuf, reason: String },
    #[error("no completed runs under {0}")]
    NoRuns(PathBuf),
    #[error("{0}")]
    Setup(String),
    #[error("transcript has {unused} record(s) left after {used} tick(s)")]
    TranscriptUnconsumed { used: usize, unused: usize },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> HarnessError {
    let context = context.into();
    move |source| HarnessError::Io { context, source }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) {
    match key.split_once('.') {
        Some((head, rest)) => {
            if let Some(toml::Value::Table(t)) = table.get_mut(head) {
                set_path(t, rest, value);
            }
        }
        None => {
            table.insert(key.to_string(), value);
        }
    }
}

/// Parses configuration text: unknown keys are rejected, missing keys keep
/// their defaults, and the result is validated.
pub fn parse_config(text: &str) -> Result<TrainConfig, ConfigError> {
    let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let mut merged = match toml::Value::try_from(TrainConfig::default()).expect("defaults serialize") {
        toml::Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    };
    let mut known = Vec::new();
    flatten("", &merged, &mut known);
    let known: BTreeMap<String, toml::Value> = known.into_iter().collect();

    let mut entries = Vec::new();
    flatten("", &user, &mut entries);
    for (key, value) in entries {
        let Some(default) = known.get(&key) else {
            return Err(ConfigError::UnknownKey(key));
        };
        let value = match (default, value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        set_path(&mut merged, &key, value);
        toml::Value::Table(merged.clone()).try_into::<TrainConfig>().map_err(|e| ConfigError::InvalidValue {
            key: key.clone(),
            reason: e.message().trim().to_string(),
        })?;
    }
    let cfg = toml::Value::Table(merged).try_into::<TrainConfig>().map_err(|e| ConfigError::InvalidValue {
        key: String::new(),
        reason: e.message().to_string(),
    })?;
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn validate_config(cfg: &TrainConfig) -> Result<(), ConfigError> {
    cfg.validate().map_err(|e| match e {
        TrainError::InvalidConfig { key, reason } => ConfigError::InvalidValue { key, reason },
        other => ConfigError::InvalidValue {
            key: String::new(),
            reason: other.to_string(),
        },
    })
}

pub fn load_config(path: &Path) -> Result<TrainConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Fully resolved configuration text; [`parse_config`] reads it back to an equal value.
pub fn config_to_string(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

/// Label used in summaries; ahrs without its auxiliary branch is reported separately.
pub fn variant_label(cfg: &TrainConfig) -> String {
    if cfg.algo == Algo::Ahrs && !cfg.aux.enabled {
        "ahrs w/o A".to_string()
    } else {
        cfg.algo.name().to_string()
    }
}

pub fn run_id(cfg: &TrainConfig) -> String {
    let algo = if cfg.algo == Algo::Ahrs && !cfg.aux.enabled {
        "ahrs-wo-a"
    } else {
        cfg.algo.name()
    };
    format!("{algo}_{}_seed{}", cfg.env, cfg.seed)
}

pub fn metrics_header(branches: usize) -> String {
    let mut cols: Vec<String> = ["epoch", "total_return_mean", "total_return_std", "rule_id"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in 1..=branches {
        cols.push(format!("ret_mean_{k}"));
        cols.push(format!("ret_var_{k}"));
        cols.push(format!("weight_{k}"));
    }
    cols.extend(["policy_loss", "value_loss", "entropy"].map(String::from));
    cols.join(",")
}

pub fn format_metrics_row(m: &EpochMetrics) -> String {
    let f = |x: f64| sig(x, CSV_DIGITS);
    let mut cols = vec![
        m.epoch.to_string(),
        f(m.total_return_mean),
        f(m.total_return_std),
        m.rule.to_string(),
    ];
    for k in 0..m.branch_means.len() {
        cols.push(f(m.branch_means[k]));
        cols.push(f(m.branch_vars[k]));
        cols.push(f(m.weights[k]));
    }
    cols.extend([f(m.policy_loss), f(m.value_loss), f(m.entropy)]);
    cols.join(",")
}

/// Appends metrics rows, writing the header before the first one.
pub struct MetricsWriter<W: Write> {
    inner: W,
    header_written: bool,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(inner: W) -> Self {
        MetricsWriter {
            inner,
            header_written: false,
        }
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(MetricsWriter::new(BufWriter::new(File::create(path)?)))
    }
}

/// One CSV row per call; flushed so an aborted run keeps every finished epoch.
pub fn write_metrics_row<W: Write>(sink: &mut MetricsWriter<W>, m: &EpochMetrics) -> io::Result<()> {
    if !sink.header_written {
        writeln!(sink.inner, "{}", metrics_header(m.branch_means.len()))?;
        sink.header_written = true;
    }
    writeln!(sink.inner, "{}", format_metrics_row(m))?;
    sink.inner.flush()
}

pub fn parse_metrics(text: &str) -> Result<Vec<EpochMetrics>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let cols = header.split(',').count();
    if cols < 7 || (cols - 7) % 3 != 0 {
        return Err(format!("header has {cols} columns"));
    }
    let b = (cols - 7) / 3;
    if header != metrics_header(b) {
        return Err("unexpected header".into());
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(format!("row {} has {} columns, expected {cols}", i + 1, f.len()));
        }
        let mut m = EpochMetrics {
            epoch: f[0].parse().map_err(|e| format!("epoch `{}`: {e}", f[0]))?,
            total_return_mean: num(f[1])?,
            total_return_std: num(f[2])?,
            rule: f[3].parse()?,
            branch_means: Vec::with_capacity(b),
            branch_vars: Vec::with_capacity(b),
            weights: Vec::with_capacity(b),
            policy_loss: num(f[4 + 3 * b])?,
            value_loss: num(f[5 + 3 * b])?,
            entropy: num(f[6 + 3 * b])?,
        };
        for k in 0..b {
            m.branch_means.push(num(f[4 + 3 * k])?);
            m.branch_vars.push(num(f[5 + 3 * k])?);
            m.weights.push(num(f[6 + 3 * k])?);
        }
        out.push(m);
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    parse_metrics(&text).map_err(|reason| HarnessError::BadMetrics {
        path: path.to_path_buf(),
        reason,
    })
}

/// Mean of `total_return_mean` over the last 10% of epochs (at least one).
pub fn final_window_mean(metrics: &[EpochMetrics]) -> Option<f64> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len().div_ceil(10).max(1);
    let tail = &metrics[metrics.len() - n..];
    Some(tail.iter().map(|m| m.total_return_mean).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub algo: String,
    pub env: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub metrics_path: PathBuf,
    pub transcript_path: Option<PathBuf>,
    pub status: RunStatus,
    /// Mean total return over the final 10% of epochs, when completed.
    pub final_return: Option<f64>,
}

/// Where LLM-backed selectors get their responses.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientSource {
    /// Live endpoint from `LLM_API_KEY`/`LLM_BASE_URL`/`LLM_MODEL`, recorded into the run directory.
    Live,
    /// Recorded transcript; a directory resolves to `<dir>/<run id>/transcript.jsonl`.
    Replay(PathBuf),
}

/// Builds the chat client for one run, if its selector needs one.
pub trait ClientFactory: Sync {
    fn client(&self, cfg: &TrainConfig, run_dir: &Path) -> Result<Option<(Box<dyn ChatClient>, PathBuf)>, HarnessError>;
}

fn selector_needs_client(cfg: &TrainConfig) -> bool {
    matches!(cfg.selector_kind(), Ok(Some(k)) if k.needs_client())
}

pub fn resolve_transcript(path: &Path, cfg: &TrainConfig) -> PathBuf {
    if path.is_dir() {
        path.join(run_id(cfg)).join(TRANSCRIPT_FILE)
    } else {
        path.to_path_buf()
    }
}

impl ClientFactory for ClientSource {
    fn client(&self, cfg: &TrainConfig, run_dir: &Path) -> Result<Option<(Box<dyn ChatClient>, PathBuf)>, HarnessError> {
        if !selector_needs_client(cfg) {
            return Ok(None);
        }
        match (cfg.selector, self) {
            (SelectorChoice::Replay, ClientSource::Replay(path)) => {
                let path = resolve_transcript(path, cfg);
                let client = llm_client::replay_session(&path)?;
                Ok(Some((Box::new(client), path)))
            }
            (SelectorChoice::Replay, ClientSource::Live) => {
                Err(HarnessError::Setup("the replay selector needs --transcript PATH".into()))
            }
            _ => {
                let endpoint = EndpointConfig::from_env();
                if !endpoint.has_credentials() {
                    return Err(HarnessError::Setup(
                        "the llm selector needs LLM_API_KEY (or use --selector replay with --transcript)".into(),
                    ));
                }
                let path = run_dir.join(TRANSCRIPT_FILE);
                let client = llm_client::record_session(HttpChatClient::new(endpoint), &path)?;
                Ok(Some((Box::new(client), path)))
            }
        }
    }
}

/// Runs one seed into `run_dir`: config echo, metrics CSV, checkpoints and `run.json`.
pub fn run_single(cfg: &TrainConfig, run_dir: &Path, clients: &dyn ClientFactory) -> Result<RunRecord, HarnessError> {
    fs::create_dir_all(run_dir).map_err(io_err(format!("creating {}", run_dir.display())))?;
    let config_path = run_dir.join(CONFIG_FILE);
    fs::write(&config_path, config_to_string(cfg)).map_err(io_err(format!("writing {}", config_path.display())))?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let mut record = RunRecord {
        run_id: run_id(cfg),
        algo: variant_label(cfg),
        env: cfg.env.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        metrics_path: metrics_path.clone(),
        transcript_path: None,
        status: RunStatus::Completed,
        final_return: None,
    };
    let outcome = (|| -> Result<Vec<EpochMetrics>, HarnessError> {
        let client = clients.client(cfg, run_dir)?;
        let client = client.map(|(c, path)| {
            record.transcript_path = Some(path);
            c
        });
        let mut trainer = Trainer::new(cfg.clone(), client)?.with_checkpoint_dir(run_dir.join("checkpoints"));
        let mut writer =
            MetricsWriter::create(&metrics_path).map_err(io_err(format!("creating {}", metrics_path.display())))?;
        let metrics = trainer.run(|m| write_metrics_row(&mut writer, m).map_err(|e| TrainError::Sink(e.to_string())))?;
        Ok(metrics)
    })();
    let result = match outcome {
        Ok(metrics) => {
            record.final_return = final_window_mean(&metrics);
            Ok(())
        }
        Err(e) => {
            record.status = RunStatus::Failed { error: e.to_string() };
            Err(e)
        }
    };
    let record_path = run_dir.join(RECORD_FILE);
    let json = serde_json::to_string_pretty(&record).expect("record serializes");
    fs::write(&record_path, json).map_err(io_err(format!("writing {}", record_path.display())))?;
    result.map(|_| record)
}

/// Aggregate of one `(algo, env)` cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub algo: String,
    pub env: String,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub std: f64,
    /// `(mean - mean_ppo) / |mean_ppo|` when the env has a ppo row.
    pub rel_vs_ppo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<RunRecord>,
    pub row: Option<SummaryRow>,
}

/// `(mean, sample std)`; the std is 0 for fewer than two values.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn order_key(algo: &str) -> (usize, String) {
    let rank = ["ppo", "ppo-a", "hd-ppo", "hd-ppo-a", "ahrs", "ahrs w/o A", "ahrs-r", "ahrs-d"]
        .iter()
        .position(|a| *a == algo)
        .unwrap_or(usize::MAX);
    (rank, algo.to_string())
}

/// Aggregates completed records; failed ones are skipped with a warning.
pub fn summarize_records(records: &[RunRecord]) -> SummaryTable {
    let mut cells: BTreeMap<(String, (usize, String)), Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        match (&r.status, r.final_return) {
            (RunStatus::Completed, Some(v)) => cells
                .entry((r.env.clone(), order_key(&r.algo)))
                .or_default()
                .push((r.seed, v)),
            _ => log::warn!("excluding run {} from the summary ({:?})", r.run_id, r.status),
        }
    }
    let mut rows: Vec<SummaryRow> = cells
        .into_iter()
        .map(|((env, (_, algo)), mut values)| {
            // fixed summation order regardless of discovery order
            values.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            let vals: Vec<f64> = values.iter().map(|v| v.1).collect();
            let (mean, std) = mean_and_std(&vals);
            SummaryRow {
                algo,
                env,
                seeds: vals.len(),
                mean,
                std,
                rel_vs_ppo: None,
            }
        })
        .collect();
    let baselines: BTreeMap<String, f64> = rows
        .iter()
        .filter(|r| r.algo == "ppo")
        .map(|r| (r.env.clone(), r.mean))
        .collect();
    for row in &mut rows {
        if let Some(base) = baselines.get(&row.env) {
            row.rel_vs_ppo = Some((row.mean - base) / base.abs());
        }
    }
    SummaryTable { rows }
}

impl SummaryTable {
    pub fn render_text(&self) -> String {
        let header = ["env", "algo", "seeds", "final return (mean ± std)", "vs ppo"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.env.clone(),
                    r.algo.clone(),
                    r.seeds.to_string(),
                    format!("{:.3} ± {:.3}", r.mean, r.std),
                    r.rel_vs_ppo.map_or("-".to_string(), |d| format!("{:+.2}%", 100.0 * d)),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}", w = *w))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for row in &body {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("env,algo,seeds,mean,std,rel_vs_ppo\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.env,
                r.algo,
                r.seeds,
                sig(r.mean, CSV_DIGITS),
                sig(r.std, CSV_DIGITS),
                r.rel_vs_ppo.map_or(String::new(), |d| sig(d, CSV_DIGITS))
            ));
        }
        out
    }
}

/// One run per seed under `out_dir/<run id>`; seeds run concurrently when the
/// build is parallel. Failed seeds are recorded and left out of the summary row.
pub fn run_experiment(
    cfg: &TrainConfig,
    seeds: &[u64],
    out_dir: &Path,
    clients: &dyn ClientFactory,
) -> Result<ExperimentResult, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::Setup("at least one seed is required".into()));
    }
    validate_config(cfg)?;
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .map(|&seed| TrainConfig { seed, ..cfg.clone() })
        .collect();
    let results = par::map(&configs, |c| {
        let dir = out_dir.join(run_id(c));
        (c.clone(), dir.clone(), run_single(c, &dir, clients))
    });
    let mut records = Vec::with_capacity(results.len());
    for (c, dir, result) in results {
        match result {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("run {} failed: {e}", run_id(&c));
                let path = dir.join(RECORD_FILE);
                let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
                let record: RunRecord = serde_json::from_str(&text)
                    .map_err(|e| HarnessError::Setup(format!("{}: {e}", path.display())))?;
                records.push(record);
            }
        }
    }
    let row = summarize_records(&records).rows.into_iter().next();
    Ok(ExperimentResult { records, row })
}

/// Scans `runs_dir/*/run.json`, recomputing final-window returns from each metrics CSV.
pub fn summarize(runs_dir: &Path) -> Result<SummaryTable, HarnessError> {
    let entries = fs::read_dir(runs_dir).map_err(io_err(format!("reading {}", runs_dir.display())))?;
    let mut records = Vec::new();
    for entry in entries {
        let dir = entry.map_err(io_err(format!("reading {}", runs_dir.display())))?.path();
        let path = dir.join(RECORD_FILE);
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
        let mut record: RunRecord = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if record.status == RunStatus::Completed {
            let metrics = read_metrics(&dir.join(METRICS_FILE))?;
            record.final_return = final_window_mean(&metrics);
        }
        records.push(record);
    }
    let table = summarize_records(&records);
    if table.rows.is_empty() {
        return Err(HarnessError::NoRuns(runs_dir.to_path_buf()));
    }
    Ok(table)
}

/// Re-runs `cfg` against a recorded transcript and checks that every record is
/// consumed with matching prompt hashes. Returns the number of ticks verified.
pub fn verify_replay(cfg: &TrainConfig, transcript: &Path) -> Result<usize, HarnessError> {
    let cfg = TrainConfig {
        selector: SelectorChoice::Replay,
        ..cfg.clone()
    };
    validate_config(&cfg)?;
    if !selector_needs_client(&cfg) {
        return Err(HarnessError::Setup(format!(
            "algo {} does not consult a transcript",
            cfg.algo
        )));
    }
    let records = llm_client::read_transcript(transcript)?.len();
    let client = llm_client::replay_session(transcript)?;
    let mut trainer = Trainer::new(cfg, Some(Box::new(client)))?;
    trainer.run(|_| Ok(()))?;
    let used = trainer.tick_log().len();
    if used != records {
        return Err(HarnessError::TranscriptUnconsumed {
            used,
            unused: records - used,
        });
    }
    Ok(used)
}

/// Rule column of a metrics row, for callers that only need the rule sequence.
pub fn rule_sequence(metrics: &[EpochMetrics]) -> Vec<ActiveRule> {
    metrics.iter().map(|m| m.rule).collect()
}

//! Experiment runner behind the `ctpo-lab run` command.
//!
//! A run reads one JSON config, executes one experiment inside a rayon pool
//! of the configured size, and writes into the output directory:
//!
//! * `manifest.json`: resolved config, tool version, seed, threads, wall time
//!   and start timestamp. The only file that changes between reruns.
//! * `report.json`: checks with pass/fail and experiment results.
//! * one or more CSV files, and for training a JSON-lines step stream.
//!
//! Schema violations write only `error.json` and exit with code 2.

pub mod artifacts;
mod experiments;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use artifacts::{Cell, CsvTable};
pub use experiments::{
    AdvantageSpec, AsymptoticCheck, BatteryParams, ChiSquareParams, ClipRateParams, CompareParams, ConstructScan,
    ExperimentParams, FixtureParams, LogStdParams, LogStdSource, RandomVarianceParams, TrainParams,
    VarianceScanParams, VerifyParams,
};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    VerifyUnbiasedness,
    VarianceScan,
    Chi2Factorization,
    LogStdProfile,
    ClipRate,
    Train,
    CompareObjectives,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::VerifyUnbiasedness => "verify-unbiasedness",
            ExperimentKind::VarianceScan => "variance-scan",
            ExperimentKind::Chi2Factorization => "chi2-factorization",
            ExperimentKind::LogStdProfile => "log-std-profile",
            ExperimentKind::ClipRate => "clip-rate",
            ExperimentKind::Train => "train",
            ExperimentKind::CompareObjectives => "compare-objectives",
        }
    }
}

fn default_threads() -> usize {
    1
}

/// Top-level config file. `params` is validated against the schema of `experiment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub params: Value,
}

/// Config with typed, default-filled parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub experiment: ExperimentKind,
    pub seed: u64,
    pub threads: usize,
    pub output_dir: Option<PathBuf>,
    pub params: ExperimentParams,
}

impl ResolvedConfig {
    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("experiment".into(), Value::from(self.experiment.name()));
        obj.insert("seed".into(), Value::from(self.seed));
        obj.insert("threads".into(), Value::from(self.threads));
        if let Some(dir) = &self.output_dir {
            obj.insert("output_dir".into(), Value::from(dir.display().to_string()));
        }
        obj.insert("params".into(), self.params.to_json());
        Value::Object(obj)
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("experiment failed: {0}")]
    Failed(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl HarnessError {
    pub fn exit_status(&self) -> ExitStatus {
        match self {
            HarnessError::Schema(_) => ExitStatus::SchemaViolation,
            HarnessError::Failed(_) => ExitStatus::AssertionFailure,
            HarnessError::Io { .. } => ExitStatus::Io,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Pass = 0,
    AssertionFailure = 1,
    SchemaViolation = 2,
    Io = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// One pass/fail assertion of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// `"<="`, `">="`, `"<"` or `">"`.
    pub comparison: &'static str,
    pub threshold: f64,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::make(name, value, "<=", threshold, value <= threshold)
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::make(name, value, ">=", threshold, value >= threshold)
    }

    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::make(name, value, "<", threshold, value < threshold)
    }

    pub fn above(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self::make(name, value, ">", threshold, value > threshold)
    }

    fn make(
        name: impl Into<String>,
        value: f64,
        comparison: &'static str,
        threshold: f64,
        passed: bool,
    ) -> Self {
        Self {
            name: name.into(),
            passed,
            value,
            comparison,
            threshold,
        }
    }
}

/// Everything an experiment produces, before anything touches disk.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub results: Value,
    pub tables: Vec<CsvTable>,
    /// JSON-lines files: name and one value per line.
    pub streams: Vec<(String, Vec<Value>)>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, file_name: &str) -> Option<&CsvTable> {
        self.tables.iter().find(|t| t.file_name == file_name)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    experiment: &'static str,
    seed: u64,
    passed: bool,
    checks: &'a [Check],
    results: &'a Value,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub status: ExitStatus,
    pub out_dir: Option<PathBuf>,
    pub outcome: Option<Outcome>,
    pub error: Option<String>,
}

/// Parses and validates a config value, applying overrides.
pub fn resolve(raw: Value, opts: &RunOptions) -> Result<ResolvedConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_value(raw).map_err(|e| HarnessError::Schema(e.to_string()))?;
    let threads = opts.threads.unwrap_or(cfg.threads);
    if threads == 0 {
        return Err(HarnessError::Schema("threads must be >= 1".into()));
    }
    let params = ExperimentParams::parse(cfg.experiment, cfg.params)?;
    Ok(ResolvedConfig {
        experiment: cfg.experiment,
        seed: opts.seed.unwrap_or(cfg.seed),
        threads,
        output_dir: cfg.output_dir,
        params,
    })
}

/// Runs the experiment inside a pool of `config.threads` workers. No files are written.
pub fn execute(config: &ResolvedConfig) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| HarnessError::Failed(format!("thread pool: {e}")))?;
    pool.install(|| config.params.run(config.seed))
}

fn default_out_dir(config_path: &Path) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(stem)
}

/// Best-effort output directory for a config that may not parse.
fn out_dir_hint(raw: Option<&Value>, opts: &RunOptions, config_path: &Path) -> PathBuf {
    if let Some(out) = &opts.out {
        return out.clone();
    }
    raw.and_then(|v| v.get("output_dir"))
        .and_then(Value::as_str)
        .map(PathBuf::from)
        .unwrap_or_else(|| default_out_dir(config_path))
}

fn write_error(dir: &Path, status: ExitStatus, message: &str) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    artifacts::write_json(
        &dir.join("error.json"),
        &serde_json::json!({"exit_code": status.code(), "error": message}),
    )
}

/// Runs a config file end to end and writes all artifacts.
pub fn run(config_path: &Path, opts: &RunOptions) -> RunSummary {
    let started = Instant::now();
    let started_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);

    let fail = |status: ExitStatus, dir: Option<PathBuf>, message: String| {
        let mut out_dir = None;
        if let Some(d) = dir {
            if write_error(&d, status, &message).is_ok() {
                out_dir = Some(d);
            }
        }
        RunSummary {
            status,
            out_dir,
            outcome: None,
            error: Some(message),
        }
    };

    let text = match fs::read_to_string(config_path) {
        Ok(t) => t,
        Err(e) => {
            let err = HarnessError::io(config_path, e);
            return fail(err.exit_status(), None, err.to_string());
        }
    };
    let raw: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            let dir = out_dir_hint(None, opts, config_path);
            let err = HarnessError::Schema(format!("invalid JSON: {e}"));
            return fail(err.exit_status(), Some(dir), err.to_string());
        }
    };
    let dir = out_dir_hint(Some(&raw), opts, config_path);
    let config = match resolve(raw, opts) {
        Ok(c) => c,
        Err(e) => return fail(e.exit_status(), Some(dir), e.to_string()),
    };

    if let Err(e) = fs::create_dir_all(&dir) {
        let err = HarnessError::io(&dir, e);
        return fail(err.exit_status(), None, err.to_string());
    }
    let outcome = match execute(&config) {
        Ok(o) => o,
        Err(e) => {
            let status = e.exit_status();
            let message = e.to_string();
            let manifest = manifest_json(&config, started, started_unix_ms, status, &[]);
            let _ = artifacts::write_json(&dir.join("manifest.json"), &manifest);
            return fail(status, Some(dir), message);
        }
    };
    let status = if outcome.passed() {
        ExitStatus::Pass
    } else {
        ExitStatus::AssertionFailure
    };
    match write_outcome(&dir, &config, &outcome, started, started_unix_ms, status) {
        Ok(()) => RunSummary {
            status,
            out_dir: Some(dir),
            outcome: Some(outcome),
            error: None,
        },
        Err(e) => RunSummary {
            status: e.exit_status(),
            out_dir: Some(dir),
            outcome: Some(outcome),
            error: Some(e.to_string()),
        },
    }
}

fn manifest_json(
    config: &ResolvedConfig,
    started: Instant,
    started_unix_ms: u64,
    status: ExitStatus,
    files: &[String],
) -> Value {
    serde_json::json!({
        "tool": TOOL_NAME,
        "version": TOOL_VERSION,
        "experiment": config.experiment.name(),
        "seed": config.seed,
        "threads": config.threads,
        "config": config.to_json(),
        "started_unix_ms": started_unix_ms,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "exit_code": status.code(),
        "artifacts": files,
    })
}

fn write_outcome(
    dir: &Path,
    config: &ResolvedConfig,
    outcome: &Outcome,
    started: Instant,
    started_unix_ms: u64,
    status: ExitStatus,
) -> Result<()> {
    let mut files = vec!["report.json".to_string()];
    let report = Report {
        experiment: config.experiment.name(),
        seed: config.seed,
        passed: outcome.passed(),
        checks: &outcome.checks,
        results: &outcome.results,
    };
    let path = dir.join("report.json");
    artifacts::write_json(&path, &report).map_err(|e| HarnessError::io(&path, e))?;
    for table in &outcome.tables {
        let path = dir.join(&table.file_name);
        table
            .to_bytes()
            .and_then(|b| fs::write(&path, b))
            .map_err(|e| HarnessError::io(&path, e))?;
        files.push(table.file_name.clone());
    }
    for (name, lines) in &outcome.streams {
        let path = dir.join(name);
        artifacts::write_jsonl(&path, lines).map_err(|e| HarnessError::io(&path, e))?;
        files.push(name.clone());
    }
    let manifest = manifest_json(config, started, started_unix_ms, status, &files);
    let path = dir.join("manifest.json");
    artifacts::write_json(&path, &manifest).map_err(|e| HarnessError::io(&path, e))
}

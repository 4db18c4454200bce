//! Configuration-driven experiment runner.

pub mod config;
pub mod experiments;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use config::{ExperimentConfig, Problem};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Problem>),
    #[error("no output directory: set output_dir in [experiment] or pass --output")]
    NoOutput,
    #[error("output directory {0} already exists")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Core(#[from] mfqp::Error),
    #[error("writing outputs: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn reason(&self) -> &'static str {
        match self {
            RunError::Read { .. } => "config_unreadable",
            RunError::Invalid(_) => "invalid_config",
            RunError::NoOutput => "no_output_dir",
            RunError::OutputExists(_) => "output_exists",
            RunError::Core(e) => e.reason(),
            RunError::Io(_) => "io",
        }
    }

    /// 3 for numerical failures during the experiment, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub problems: Vec<Problem>,
}

fn read(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(|source| RunError::Read { path: path.to_path_buf(), source })
}

fn load(text: &str) -> Result<ExperimentConfig, Vec<Problem>> {
    let raw = config::parse(text)?;
    match config::validate(&raw) {
        (Some(cfg), _) => Ok(cfg),
        (None, problems) => Err(problems),
    }
}

pub fn validate(config_path: &Path) -> Result<ValidationReport, RunError> {
    let problems = match load(&read(config_path)?) {
        Ok(_) => Vec::new(),
        Err(p) => p,
    };
    Ok(ValidationReport { valid: problems.is_empty(), problems })
}

/// Sibling of `out` used while the experiment is running.
fn staging_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
    out.with_file_name(format!(".{name}.staging-{}", std::process::id()))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
}

/// Runs the experiment into a staging directory and renames it into place
/// on success; on failure the staging directory is removed.
pub fn run(config_path: &Path, output: Option<&Path>, threads: usize) -> Result<RunSummary, RunError> {
    let text = read(config_path)?;
    let cfg = load(&text).map_err(RunError::Invalid)?;
    let out = output.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone()).ok_or(RunError::NoOutput)?;
    if out.exists() {
        return Err(RunError::OutputExists(out));
    }
    let model = cfg.model.build()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let staging = staging_dir(&out);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;

    let start = Instant::now();
    let result = experiments::run(&cfg, &model, &staging).map_err(RunError::from).and_then(|summary| {
        let mut files: Vec<String> = fs::read_dir(&staging)?
            .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect::<Result<_, _>>()?;
        files.sort();
        let manifest = json!({
            "tool": "mfqp",
            "version": VERSION,
            "experiment": cfg.experiment.name(),
            "model": model.name(),
            "config_path": config_path.display().to_string(),
            "config_text": text,
            "config": cfg.raw.sections,
            "parameters": cfg.params,
            "seed": cfg.raw.sections.get("experiment").and_then(|e| e.get("seed")).cloned(),
            "rng_algorithm": mfqp::simulator::ALGORITHM,
            "threads": threads,
            "wall_time_seconds": start.elapsed().as_secs_f64(),
            "outputs": files,
            "summary": summary,
        });
        fs::write(staging.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("plain json"))?;
        files.push("manifest.json".into());
        files.sort();
        fs::rename(&staging, &out)?;
        Ok(RunSummary { output_dir: out, files })
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result
}

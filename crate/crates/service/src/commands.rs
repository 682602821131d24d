//! Offline subcommands of the command-line tool.

use std::fs;
use std::path::Path;

use qcollab_core::codebook::{Codebook, EquivalenceMap, Level};
use qcollab_core::corpus::segment_sentences;
use qcollab_core::metrics::{code_coverage, cohen_kappa, reports_to_csv};
use qcollab_core::replay::{replay, ReplayScript};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{0}")]
    Failed(String),
}

impl CommandError {
    pub fn kind(&self) -> &'static str {
        match self {
            CommandError::Read { .. } => "read_error",
            CommandError::Parse { .. } => "parse_error",
            CommandError::Failed(_) => "failed",
        }
    }

    /// Machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

fn read(path: &Path) -> Result<String, CommandError> {
    fs::read_to_string(path).map_err(|e| CommandError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn parse_err(path: &Path, e: impl ToString) -> CommandError {
    CommandError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Labels separated by commas, whitespace or newlines. A first line
/// containing letters is taken as a header and skipped.
pub fn parse_labels(path: &Path, text: &str) -> Result<Vec<u32>, CommandError> {
    let mut lines = text.lines().peekable();
    if lines
        .peek()
        .is_some_and(|l| l.chars().any(|c| c.is_alphabetic()))
    {
        lines.next();
    }
    lines
        .flat_map(|l| l.split(|c: char| c == ',' || c.is_whitespace()))
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<u32>()
                .map_err(|_| parse_err(path, format!("`{t}` is not a label id")))
        })
        .collect()
}

pub fn kappa(a: &Path, b: &Path) -> Result<String, CommandError> {
    let va = parse_labels(a, &read(a)?)?;
    let vb = parse_labels(b, &read(b)?)?;
    let k = cohen_kappa(&va, &vb).map_err(|e| CommandError::Failed(e.to_string()))?;
    Ok(format!("{k}"))
}

fn load_codebook(path: &Path) -> Result<Codebook, CommandError> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "csv") {
        let owner = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        Codebook::read_csv(owner, text.as_bytes()).map_err(|e| parse_err(path, e))
    } else {
        Codebook::from_json(&text).map_err(|e| parse_err(path, e))
    }
}

pub fn coverage(
    coders: &Path,
    merged: &Path,
    equiv: Option<&Path>,
    level: Level,
) -> Result<String, CommandError> {
    let coders = load_codebook(coders)?;
    let merged = load_codebook(merged)?;
    let equiv = match equiv {
        Some(p) => {
            serde_json::from_str::<EquivalenceMap>(&read(p)?).map_err(|e| parse_err(p, e))?
        }
        None => EquivalenceMap::new(),
    };
    let c = code_coverage(&coders, &merged, &equiv, level)
        .map_err(|e| CommandError::Failed(e.to_string()))?;
    Ok(format!("{c}"))
}

/// One JSON line per sentence.
pub fn segment(doc: &Path) -> Result<String, CommandError> {
    let body = read(doc)?;
    let chars: Vec<char> = body.chars().collect();
    let mut out = String::new();
    for s in segment_sentences(&body) {
        let text: String = chars[s.start..s.end].iter().collect();
        out.push_str(
            &json!({ "index": s.index, "start": s.start, "end": s.end, "text": text }).to_string(),
        );
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn replay_log(log: &Path, format: ReportFormat) -> Result<String, CommandError> {
    let script = ReplayScript::parse(&read(log)?).map_err(|e| parse_err(log, e))?;
    let outcome = replay(&script).map_err(|e| CommandError::Failed(e.to_string()))?;
    Ok(match format {
        ReportFormat::Csv => reports_to_csv(&[outcome.report]),
        ReportFormat::Json => outcome.report.to_json() + "\n",
    })
}

//! Deterministic re-execution of session logs.
//!
//! A script is JSONL: a header line `{"config": {...}}` followed by one
//! event per line in the session log schema. Replays run every retrain
//! synchronously at the moment it is scheduled, with event timestamps as the
//! only clock, so the same bytes in always give the same report out.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{reports_to_csv, session_report, MetricsError, MetricsReport};
use crate::par::Exec;
use crate::session::{Session, SessionConfig, SessionError, SessionEvent};

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("event {index} rejected: {source}")]
    Event {
        index: usize,
        #[source]
        source: SessionError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ReplayError {
    fn schema(line: usize, message: impl Into<String>) -> Self {
        ReplayError::Schema {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: SessionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayScript {
    pub config: SessionConfig,
    pub events: Vec<SessionEvent>,
}

impl ReplayScript {
    pub fn parse(text: &str) -> Result<ReplayScript, ReplayError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let Some((n, first)) = lines.next() else {
            return Err(ReplayError::schema(
                0,
                "empty script: no header and no phase advances",
            ));
        };
        let header: Header = serde_json::from_str(first)
            .map_err(|e| ReplayError::schema(n, format!("bad header: {e}")))?;
        let mut events = Vec::new();
        let mut last = None;
        for (n, line) in lines {
            let e: SessionEvent =
                serde_json::from_str(line).map_err(|e| ReplayError::schema(n, e.to_string()))?;
            if last.is_some_and(|t| e.ts < t) {
                return Err(ReplayError::schema(n, "timestamps must be non-decreasing"));
            }
            last = Some(e.ts);
            events.push(e);
        }
        if events.is_empty() {
            return Err(ReplayError::schema(n, "script has no phase advances"));
        }
        Ok(ReplayScript {
            config: header.config,
            events,
        })
    }

    /// The accepted history of a live session as a script.
    pub fn from_session(session: &Session) -> ReplayScript {
        ReplayScript {
            config: session.config().clone(),
            events: session.log().to_vec(),
        }
    }

    pub fn header_line(config: &SessionConfig) -> String {
        serde_json::to_string(&Header {
            config: config.clone(),
        })
        .expect("config serializes")
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Self::header_line(&self.config);
        out.push('\n');
        for e in &self.events {
            writeln!(out, "{}", e.to_json_line()).unwrap();
        }
        out
    }
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub session: Session,
    pub report: MetricsReport,
}

/// Drive a fresh session through the script with synchronous retraining.
pub fn replay(script: &ReplayScript) -> Result<ReplayOutcome, ReplayError> {
    let serving = script.config.serving_config();
    let session = Session::from_log(script.config.clone(), &script.events, serving)
        .map_err(|(index, source)| ReplayError::Event { index, source })?;
    let report = session_report(&session)?;
    Ok(ReplayOutcome { session, report })
}

pub fn replay_text(text: &str) -> Result<MetricsReport, ReplayError> {
    Ok(replay(&ReplayScript::parse(text)?)?.report)
}

/// Replay independent scripts, in input order.
pub fn replay_many(
    scripts: &[ReplayScript],
    exec: Exec,
) -> Vec<Result<MetricsReport, ReplayError>> {
    exec.map(scripts, |s| replay(s).map(|o| o.report))
}

/// CSV for a single replayed script.
pub fn replay_to_csv(text: &str) -> Result<String, ReplayError> {
    Ok(reports_to_csv(&[replay_text(text)?]))
}

//! Collaboration sessions: two coders, four collaboration conditions and
//! three phases.
//!
//! | condition | suggestions | model            | phase-1 order            |
//! |-----------|-------------|------------------|--------------------------|
//! | A         | none        | none             | concurrent               |
//! | B         | yes         | one per coder    | concurrent               |
//! | C         | yes         | shared           | coder 1, then coder 2    |
//! | D         | yes         | shared           | concurrent               |
//!
//! Phase 1 is independent open coding of the first documents, phase 2 is a
//! discussion that ends with a committed shared codebook, and phase 3 applies
//! codes to the final document. Every accepted command is appended to an
//! event log; replaying the log from an empty session reproduces the state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Timestamp;
use crate::codebook::{
    build_codebook, Annotation, AnnotationId, CodeEntry, CodeLabel, Codebook, CodebookError,
    CoderId, EquivalenceMap,
};
use crate::corpus::{Corpus, CorpusError, DocId, Document, DocumentSource, SelectionSpan};
use crate::serving::{Notice, ServingConfig, ServingEngine, ServingError};
use crate::suggest::{assemble_training_set, Scope, SuggestionSet, DEFAULT_K};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("phase violation: {0}")]
    PhaseViolation(String),
    #[error("coder 2 may not code in phase 1 before coder 1 completes")]
    OrderingViolation,
    #[error("unknown coder `{0}`")]
    UnknownCoder(String),
    #[error("event requires a coder")]
    MissingCoder,
    #[error("unknown annotation {0}")]
    UnknownAnnotation(AnnotationId),
    #[error("annotation {0} belongs to another coder")]
    NotOwner(AnnotationId),
    #[error("annotation {0} is deleted")]
    AnnotationDeleted(AnnotationId),
    #[error("phase 2 cannot end without a committed codebook")]
    MissingCodebook,
    #[error("timestamp {got:?} precedes last event at {last:?}")]
    NonMonotonicTimestamp { last: Timestamp, got: Timestamp },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Serving(#[from] ServingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    /// Without AI.
    A,
    /// AI, asynchronous, one model per coder.
    B,
    /// AI, asynchronous, shared model; coder 2 starts after coder 1.
    C,
    /// AI, synchronous, shared model.
    D,
}

impl Condition {
    pub fn has_ai(self) -> bool {
        self != Condition::A
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::str::FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Condition::A),
            "B" => Ok(Condition::B),
            "C" => Ok(Condition::C),
            "D" => Ok(Condition::D),
            _ => Err(format!("unknown condition `{s}` (expected A|B|C|D)")),
        }
    }
}

/// Serialized as `1`, `2`, `3` or `"done"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    One,
    Two,
    Three,
    Done,
}

impl Phase {
    pub fn next(self) -> Option<Phase> {
        match self {
            Phase::One => Some(Phase::Two),
            Phase::Two => Some(Phase::Three),
            Phase::Three => Some(Phase::Done),
            Phase::Done => None,
        }
    }

    /// 0-based index of an active phase.
    pub fn index(self) -> Option<usize> {
        match self {
            Phase::One => Some(0),
            Phase::Two => Some(1),
            Phase::Three => Some(2),
            Phase::Done => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::One => f.write_str("1"),
            Phase::Two => f.write_str("2"),
            Phase::Three => f.write_str("3"),
            Phase::Done => f.write_str("done"),
        }
    }
}

impl Serialize for Phase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Phase::One => s.serialize_u8(1),
            Phase::Two => s.serialize_u8(2),
            Phase::Three => s.serialize_u8(3),
            Phase::Done => s.serialize_str("done"),
        }
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            N(u8),
            S(String),
        }
        match Wire::deserialize(d)? {
            Wire::N(1) => Ok(Phase::One),
            Wire::N(2) => Ok(Phase::Two),
            Wire::N(3) => Ok(Phase::Three),
            Wire::S(s) if s == "done" => Ok(Phase::Done),
            Wire::S(s) if s == "1" || s == "2" || s == "3" => {
                Ok([Phase::One, Phase::Two, Phase::Three][s.parse::<usize>().unwrap() - 1])
            }
            _ => Err(serde::de::Error::custom(
                "phase must be 1, 2, 3 or \"done\"",
            )),
        }
    }
}

fn default_limits() -> [u64; 3] {
    [20 * 60, 40 * 60, 10 * 60]
}

fn default_offsets() -> Vec<u64> {
    vec![15 * 60, 5 * 60]
}

fn default_interval_ms() -> u64 {
    10_000
}

fn default_k() -> usize {
    DEFAULT_K
}

/// Inputs to the metrics that are prepared by the analysts, not the coders.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisInputs {
    #[serde(default)]
    pub equivalence: EquivalenceMap,
    /// Canonical first-level label -> class id. Derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_mapping: Option<BTreeMap<String, u32>>,
    /// Phase-1 codebook built by the analysts. Derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_codebook: Option<Codebook>,
    /// Reference codebook for coverage. Coverage is left empty when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_codebook: Option<Codebook>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    #[serde(default)]
    pub name: String,
    pub condition: Condition,
    pub coders: [CoderId; 2],
    pub phase1_documents: Vec<DocumentSource>,
    pub phase3_document: DocumentSource,
    #[serde(default = "default_limits")]
    pub phase_limits_secs: [u64; 3],
    /// Remaining-time marks at which reminders fire.
    #[serde(default = "default_offsets")]
    pub reminder_offsets_secs: Vec<u64>,
    #[serde(default = "default_interval_ms")]
    pub min_retrain_interval_ms: u64,
    #[serde(default = "default_k")]
    pub suggestion_k: usize,
    /// Whether suggestion responses say whose history they came from.
    #[serde(default)]
    pub reveal_suggestion_origin: bool,
    #[serde(default)]
    pub analysis: AnalysisInputs,
}

impl SessionConfig {
    pub fn new(
        condition: Condition,
        coders: [&str; 2],
        phase1_documents: Vec<DocumentSource>,
        phase3_document: DocumentSource,
    ) -> Self {
        SessionConfig {
            name: String::new(),
            condition,
            coders: coders.map(CoderId::new),
            phase1_documents,
            phase3_document,
            phase_limits_secs: default_limits(),
            reminder_offsets_secs: default_offsets(),
            min_retrain_interval_ms: default_interval_ms(),
            suggestion_k: DEFAULT_K,
            reveal_suggestion_origin: false,
            analysis: AnalysisInputs::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::InvalidConfig(m.to_string()));
        if self.coders[0] == self.coders[1] {
            return bad("the two coders must be distinct");
        }
        if self.coders.iter().any(|c| c.0.trim().is_empty()) {
            return bad("coder ids must be nonempty");
        }
        if self.phase1_documents.is_empty() {
            return bad("at least one phase-1 document is required");
        }
        let mut ids = BTreeSet::new();
        for d in self.phase1_documents.iter().chain([&self.phase3_document]) {
            if !ids.insert(&d.id) {
                return bad(&format!("duplicate document id `{}`", d.id));
            }
        }
        if self.phase_limits_secs.contains(&0) {
            return bad("phase limits must be positive");
        }
        Ok(())
    }

    pub fn coder_index(&self, coder: &CoderId) -> Option<usize> {
        self.coders.iter().position(|c| c == coder)
    }

    pub fn serving_config(&self) -> ServingConfig {
        ServingConfig {
            min_retrain_interval: Duration::from_millis(self.min_retrain_interval_ms),
            ..ServingConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPayload {
    pub doc: DocId,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatePayload {
    pub doc: DocId,
    pub start: i64,
    pub end: i64,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptPayload {
    pub doc: DocId,
    pub start: i64,
    pub end: i64,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestPayload {
    pub doc: DocId,
    pub start: i64,
    pub end: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReminderPayload {
    pub phase: Phase,
    pub remaining_secs: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub overrun: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    Annotate(AnnotatePayload),
    EditCode {
        annotation: AnnotationId,
        code: String,
    },
    DeleteCode {
        annotation: AnnotationId,
    },
    RequestSuggestions(SuggestPayload),
    AcceptSuggestion(AcceptPayload),
    PhaseAdvance {
        to: Phase,
    },
    Reminder(ReminderPayload),
    CodebookCommit {
        entries: Vec<CodeEntry>,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Annotate(_) => "Annotate",
            EventBody::EditCode { .. } => "EditCode",
            EventBody::DeleteCode { .. } => "DeleteCode",
            EventBody::RequestSuggestions(_) => "RequestSuggestions",
            EventBody::AcceptSuggestion(_) => "AcceptSuggestion",
            EventBody::PhaseAdvance { .. } => "PhaseAdvance",
            EventBody::Reminder(_) => "Reminder",
            EventBody::CodebookCommit { .. } => "CodebookCommit",
        }
    }
}

/// One line of the event log: `{"ts", "coder", "kind", "payload"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub ts: Timestamp,
    pub coder: Option<CoderId>,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    pub fn new(ts: Timestamp, coder: Option<&CoderId>, body: EventBody) -> Self {
        SessionEvent {
            ts,
            coder: coder.cloned(),
            body,
        }
    }

    pub fn annotate(
        ts: Timestamp,
        coder: &CoderId,
        doc: &str,
        start: i64,
        end: i64,
        code: &str,
    ) -> Self {
        Self::new(
            ts,
            Some(coder),
            EventBody::Annotate(AnnotatePayload {
                doc: DocId::new(doc),
                start,
                end,
                code: code.to_string(),
            }),
        )
    }

    pub fn suggest(ts: Timestamp, coder: &CoderId, doc: &str, start: i64, end: i64) -> Self {
        Self::new(
            ts,
            Some(coder),
            EventBody::RequestSuggestions(SuggestPayload {
                doc: DocId::new(doc),
                start,
                end,
                k: None,
            }),
        )
    }

    pub fn advance(ts: Timestamp, coder: Option<&CoderId>, to: Phase) -> Self {
        Self::new(ts, coder, EventBody::PhaseAdvance { to })
    }

    pub fn commit(ts: Timestamp, coder: Option<&CoderId>, entries: Vec<CodeEntry>) -> Self {
        Self::new(ts, coder, EventBody::CodebookCommit { entries })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

/// Who should see an effect.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Audience {
    Coder(CoderId),
    Everyone,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Effect {
    AnnotationSaved {
        coder: CoderId,
        annotation: Annotation,
    },
    AnnotationUpdated {
        coder: CoderId,
        annotation: Annotation,
    },
    Suggestions {
        coder: CoderId,
        suggestions: SuggestionSet,
        disabled: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        origin: Option<Vec<CoderId>>,
    },
    RetrainScheduled {
        engine: usize,
        version: Option<u64>,
    },
    CoderCompleted {
        coder: CoderId,
        phase: Phase,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
    },
    Reminder {
        phase: Phase,
        remaining_secs: u64,
    },
    PhaseTimeExceeded {
        phase: Phase,
    },
    CodebookCommitted {
        entries: usize,
    },
}

impl Effect {
    pub fn audience(&self) -> Audience {
        match self {
            Effect::AnnotationSaved { coder, .. }
            | Effect::AnnotationUpdated { coder, .. }
            | Effect::Suggestions { coder, .. } => Audience::Coder(coder.clone()),
            _ => Audience::Everyone,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Denial {
    UnknownCoder,
    DiscussionPhase,
    SessionDone,
    AlreadyCompleted,
    AwaitingCoder1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Permission {
    pub allowed: bool,
    pub reason: Option<Denial>,
}

impl Permission {
    fn allow() -> Self {
        Permission {
            allowed: true,
            reason: None,
        }
    }

    fn deny(reason: Denial) -> Self {
        Permission {
            allowed: false,
            reason: Some(reason),
        }
    }

    pub fn message(&self) -> &'static str {
        match self.reason {
            None => "permitted",
            Some(Denial::UnknownCoder) => "unknown coder",
            Some(Denial::DiscussionPhase) => "phase 2 is for discussion and codebook edits only",
            Some(Denial::SessionDone) => "session is done",
            Some(Denial::AlreadyCompleted) => "coder already completed this phase",
            Some(Denial::AwaitingCoder1) => "awaiting coder1",
        }
    }
}

/// An engine and the coders whose histories feed it.
#[derive(Debug, Clone)]
pub struct EngineBinding {
    pub scope: Scope,
    pub engine: Arc<ServingEngine>,
}

/// Everything a coder is allowed to see.
#[derive(Debug, Clone, Serialize)]
pub struct CoderView {
    pub coder: CoderId,
    pub condition: Condition,
    pub phase: Phase,
    pub phase_started_at: Timestamp,
    pub phase_limit_secs: Option<u64>,
    pub completed: bool,
    pub permission: Permission,
    pub documents: Vec<DocumentSource>,
    pub annotations: Vec<Annotation>,
    /// Partner annotations; only populated in phase 2 and after the session.
    pub partner_annotations: Vec<Annotation>,
    pub codebook: Option<Codebook>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub config: SessionConfig,
    pub phase: Phase,
    pub phase_started: Vec<Timestamp>,
    pub annotations: Vec<Annotation>,
    pub completed: Vec<CoderId>,
    pub phase1_completed: Vec<CoderId>,
    pub codebook: Option<Codebook>,
    pub reminders_sent: Vec<(Phase, u64)>,
    pub log: Vec<SessionEvent>,
}

impl SessionSnapshot {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("snapshot serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug)]
pub struct Session {
    config: SessionConfig,
    corpus: Corpus,
    phase: Phase,
    phase_started: Vec<Timestamp>,
    annotations: Vec<Annotation>,
    /// Coders that completed the current phase.
    completed: BTreeSet<CoderId>,
    phase1_completed: BTreeSet<CoderId>,
    codebook: Option<Codebook>,
    engines: Vec<EngineBinding>,
    /// (phase, remaining secs); 0 marks the overrun marker.
    reminders_sent: BTreeSet<(Phase, u64)>,
    log: Vec<SessionEvent>,
}

impl Session {
    /// Start a session in phase 1 at `at` with engines wired per condition.
    pub fn create(config: SessionConfig, at: Timestamp) -> Result<Session, SessionError> {
        let serving = config.serving_config();
        Self::create_with(config, at, serving)
    }

    pub fn create_with(
        config: SessionConfig,
        at: Timestamp,
        serving: ServingConfig,
    ) -> Result<Session, SessionError> {
        config.validate()?;
        let mut corpus = Corpus::new();
        for d in config
            .phase1_documents
            .iter()
            .chain([&config.phase3_document])
        {
            corpus.insert(Document::from(d.clone()))?;
        }
        let engine = || Arc::new(ServingEngine::new(serving, at));
        let engines = match config.condition {
            Condition::A => vec![],
            Condition::B => config
                .coders
                .iter()
                .map(|c| EngineBinding {
                    scope: Scope::Coder(c.clone()),
                    engine: engine(),
                })
                .collect(),
            Condition::C | Condition::D => vec![EngineBinding {
                scope: Scope::Shared,
                engine: engine(),
            }],
        };
        Ok(Session {
            config,
            corpus,
            phase: Phase::One,
            phase_started: vec![at],
            annotations: Vec::new(),
            completed: BTreeSet::new(),
            phase1_completed: BTreeSet::new(),
            codebook: None,
            engines,
            reminders_sent: BTreeSet::new(),
            log: vec![SessionEvent::advance(at, None, Phase::One)],
        })
    }

    /// Rebuild a session from its log. The first event must be the
    /// operator's advance into phase 1, which fixes the start time.
    pub fn from_log(
        config: SessionConfig,
        events: &[SessionEvent],
        serving: ServingConfig,
    ) -> Result<Session, (usize, SessionError)> {
        let start = match events.first() {
            Some(SessionEvent {
                ts,
                coder: None,
                body: EventBody::PhaseAdvance { to: Phase::One },
            }) => *ts,
            _ => {
                return Err((
                    0,
                    SessionError::PhaseViolation(
                        "log must open with an operator advance into phase 1".into(),
                    ),
                ))
            }
        };
        let mut s = Session::create_with(config, start, serving).map_err(|e| (0, e))?;
        for (i, e) in events.iter().enumerate().skip(1) {
            s.apply_event(e.clone()).map_err(|err| (i, err))?;
        }
        Ok(s)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    pub fn engines(&self) -> &[EngineBinding] {
        &self.engines
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn phase_started_at(&self) -> Timestamp {
        *self.phase_started.last().unwrap()
    }

    pub fn last_ts(&self) -> Timestamp {
        self.log.last().map(|e| e.ts).unwrap_or_default()
    }

    pub fn all_annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn annotations_of(&self, coder: &CoderId) -> Vec<&Annotation> {
        self.annotations
            .iter()
            .filter(|a| &a.coder == coder)
            .collect()
    }

    pub fn has_completed(&self, coder: &CoderId) -> bool {
        self.completed.contains(coder)
    }

    pub fn engine_for(&self, coder: &CoderId) -> Option<&EngineBinding> {
        self.engines.iter().find(|b| b.scope.includes(coder))
    }

    fn phase_documents(&self, phase: Phase) -> Vec<&DocId> {
        match phase {
            Phase::One => self.config.phase1_documents.iter().map(|d| &d.id).collect(),
            Phase::Three => vec![&self.config.phase3_document.id],
            _ => vec![],
        }
    }

    /// Whether `coder` may annotate or request suggestions right now.
    pub fn can_code(&self, coder: &CoderId) -> Permission {
        let Some(ix) = self.config.coder_index(coder) else {
            return Permission::deny(Denial::UnknownCoder);
        };
        match self.phase {
            Phase::Two => return Permission::deny(Denial::DiscussionPhase),
            Phase::Done => return Permission::deny(Denial::SessionDone),
            _ => {}
        }
        if self.completed.contains(coder) {
            return Permission::deny(Denial::AlreadyCompleted);
        }
        if self.config.condition == Condition::C
            && self.phase == Phase::One
            && ix == 1
            && !self.phase1_completed.contains(&self.config.coders[0])
        {
            return Permission::deny(Denial::AwaitingCoder1);
        }
        Permission::allow()
    }

    fn require_coder<'a>(&self, coder: &'a Option<CoderId>) -> Result<&'a CoderId, SessionError> {
        let c = coder.as_ref().ok_or(SessionError::MissingCoder)?;
        if self.config.coder_index(c).is_none() {
            return Err(SessionError::UnknownCoder(c.to_string()));
        }
        Ok(c)
    }

    fn require_can_code(&self, coder: &CoderId) -> Result<(), SessionError> {
        let p = self.can_code(coder);
        match p.reason {
            None => Ok(()),
            Some(Denial::AwaitingCoder1) => Err(SessionError::OrderingViolation),
            Some(Denial::UnknownCoder) => Err(SessionError::UnknownCoder(coder.to_string())),
            Some(_) => Err(SessionError::PhaseViolation(p.message().to_string())),
        }
    }

    fn resolve(&self, doc: &DocId, start: i64, end: i64) -> Result<SelectionSpan, SessionError> {
        if !self.phase_documents(self.phase).contains(&doc) {
            self.corpus.get(doc)?;
            return Err(SessionError::PhaseViolation(format!(
                "document `{doc}` is not coded in phase {}",
                self.phase
            )));
        }
        Ok(self.corpus.get(doc)?.resolve_span(start, end)?)
    }

    /// Reminders and overrun markers that have come due by `now`, in due
    /// order. Each is logged and emitted once per phase, stamped with the
    /// moment it came due.
    pub fn timers(&mut self, now: Timestamp) -> Vec<Effect> {
        let Some(ix) = self.phase.index() else {
            return vec![];
        };
        let limit = self.config.phase_limits_secs[ix];
        let start = self.phase_started_at();
        let mut due: Vec<(Timestamp, u64)> = self
            .config
            .reminder_offsets_secs
            .iter()
            .filter(|&&off| off > 0 && off < limit)
            .map(|&off| (start.plus(Duration::from_secs(limit - off)), off))
            .collect();
        due.push((start.plus(Duration::from_secs(limit)), 0));
        due.sort();
        let mut out = Vec::new();
        for (at, remaining) in due {
            if at > now || !self.reminders_sent.insert((self.phase, remaining)) {
                continue;
            }
            let overrun = remaining == 0;
            self.log.push(SessionEvent::new(
                at,
                None,
                EventBody::Reminder(ReminderPayload {
                    phase: self.phase,
                    remaining_secs: remaining,
                    overrun,
                }),
            ));
            out.push(if overrun {
                Effect::PhaseTimeExceeded { phase: self.phase }
            } else {
                Effect::Reminder {
                    phase: self.phase,
                    remaining_secs: remaining,
                }
            });
        }
        out
    }

    /// Advance the clock to `now`: fire due timers and run due retrains.
    pub fn tick(&mut self, now: Timestamp) -> Vec<Effect> {
        let mut effects = self.timers(now);
        for (i, b) in self.engines.iter().enumerate() {
            if let Some(v) = b.engine.run_due(now) {
                effects.push(Effect::RetrainScheduled {
                    engine: i,
                    version: Some(v),
                });
            }
        }
        effects
    }

    /// Validate and apply one event. Rejected events leave the annotation
    /// state untouched and are not logged.
    pub fn apply_event(&mut self, event: SessionEvent) -> Result<Vec<Effect>, SessionError> {
        let last = self.last_ts();
        if event.ts < last {
            return Err(SessionError::NonMonotonicTimestamp {
                last,
                got: event.ts,
            });
        }
        let mut effects = self.tick(event.ts);
        // reminders are regenerated by the timers, never taken from input
        if matches!(event.body, EventBody::Reminder(_)) {
            return Ok(effects);
        }
        let ts = event.ts;
        match &event.body {
            EventBody::Annotate(p) => {
                let coder = self.require_coder(&event.coder)?.clone();
                self.require_can_code(&coder)?;
                let span = self.resolve(&p.doc, p.start, p.end)?;
                let code = CodeLabel::new(p.code.clone())?;
                effects.extend(self.add_annotation(coder, span, code, ts));
            }
            EventBody::AcceptSuggestion(p) => {
                let coder = self.require_coder(&event.coder)?.clone();
                self.require_can_code(&coder)?;
                let span = self.resolve(&p.doc, p.start, p.end)?;
                let code = CodeLabel::new(p.code.clone())?;
                effects.extend(self.add_annotation(coder, span, code, ts));
            }
            EventBody::EditCode { annotation, code } => {
                let coder = self.require_coder(&event.coder)?.clone();
                self.require_can_code(&coder)?;
                let code = CodeLabel::new(code.clone())?;
                let a = self.owned_mut(*annotation, &coder)?;
                a.edit(code, ts);
                let a = a.clone();
                effects.push(Effect::AnnotationUpdated {
                    coder: coder.clone(),
                    annotation: a,
                });
                effects.extend(self.notify_engines(&coder, ts));
            }
            EventBody::DeleteCode { annotation } => {
                let coder = self.require_coder(&event.coder)?.clone();
                self.require_can_code(&coder)?;
                let a = self.owned_mut(*annotation, &coder)?;
                a.delete(ts);
                let a = a.clone();
                effects.push(Effect::AnnotationUpdated {
                    coder: coder.clone(),
                    annotation: a,
                });
                effects.extend(self.notify_engines(&coder, ts));
            }
            EventBody::RequestSuggestions(p) => {
                let coder = self.require_coder(&event.coder)?.clone();
                self.require_can_code(&coder)?;
                let span = self.resolve(&p.doc, p.start, p.end)?;
                let k = p.k.unwrap_or(self.config.suggestion_k);
                effects.push(self.suggest(&coder, &span, k)?);
            }
            EventBody::PhaseAdvance { to } => {
                effects.extend(self.advance(event.coder.as_ref(), *to, ts)?);
            }
            EventBody::CodebookCommit { entries } => {
                if let Some(c) = &event.coder {
                    if self.config.coder_index(c).is_none() {
                        return Err(SessionError::UnknownCoder(c.to_string()));
                    }
                }
                if self.phase != Phase::Two {
                    return Err(SessionError::PhaseViolation(
                        "codebooks are committed in phase 2".into(),
                    ));
                }
                let owner = self.config.name.clone();
                let cb = build_codebook(owner, entries.clone())?;
                effects.push(Effect::CodebookCommitted {
                    entries: cb.entries().len(),
                });
                self.codebook = Some(cb);
            }
            EventBody::Reminder(_) => unreachable!(),
        }
        self.log.push(event);
        Ok(effects)
    }

    fn owned_mut(
        &mut self,
        id: AnnotationId,
        coder: &CoderId,
    ) -> Result<&mut Annotation, SessionError> {
        let a = self
            .annotations
            .iter_mut()
            .find(|a| a.id == id)
            .ok_or(SessionError::UnknownAnnotation(id))?;
        if &a.coder != coder {
            return Err(SessionError::NotOwner(id));
        }
        if a.deleted {
            return Err(SessionError::AnnotationDeleted(id));
        }
        Ok(a)
    }

    fn add_annotation(
        &mut self,
        coder: CoderId,
        span: SelectionSpan,
        code: CodeLabel,
        ts: Timestamp,
    ) -> Vec<Effect> {
        let id = AnnotationId(self.annotations.len() as u64 + 1);
        let a = Annotation::new(id, coder.clone(), span, code, ts);
        self.annotations.push(a.clone());
        let mut effects = vec![Effect::AnnotationSaved {
            coder: coder.clone(),
            annotation: a,
        }];
        effects.extend(self.notify_engines(&coder, ts));
        effects
    }

    fn notify_engines(&self, coder: &CoderId, ts: Timestamp) -> Vec<Effect> {
        let mut effects = Vec::new();
        for (i, b) in self.engines.iter().enumerate() {
            if !b.scope.includes(coder) {
                continue;
            }
            let training = assemble_training_set(&[&self.annotations], &self.corpus, &b.scope)
                .expect("annotations reference session documents");
            let version = match b.engine.notify_history_changed(training, ts) {
                Notice::Started(v) => Some(v),
                Notice::Pending => None,
            };
            effects.push(Effect::RetrainScheduled { engine: i, version });
        }
        effects
    }

    fn suggest(
        &self,
        coder: &CoderId,
        span: &SelectionSpan,
        k: usize,
    ) -> Result<Effect, SessionError> {
        let Some(binding) = self.engine_for(coder) else {
            return Ok(Effect::Suggestions {
                coder: coder.clone(),
                suggestions: SuggestionSet::empty(0),
                disabled: true,
                origin: None,
            });
        };
        let text = self.corpus.span_text(span)?;
        let suggestions = binding.engine.request_suggestions(text, k)?;
        let origin = self
            .config
            .reveal_suggestion_origin
            .then(|| match &binding.scope {
                Scope::Coder(c) => vec![c.clone()],
                Scope::Shared => self.config.coders.to_vec(),
            });
        Ok(Effect::Suggestions {
            coder: coder.clone(),
            suggestions,
            disabled: false,
            origin,
        })
    }

    fn advance(
        &mut self,
        coder: Option<&CoderId>,
        to: Phase,
        ts: Timestamp,
    ) -> Result<Vec<Effect>, SessionError> {
        let next = self
            .phase
            .next()
            .ok_or_else(|| SessionError::PhaseViolation("session is done".into()))?;
        if to != next {
            return Err(SessionError::PhaseViolation(format!(
                "cannot advance from phase {} to {to}",
                self.phase
            )));
        }
        if self.phase == Phase::Two && self.codebook.is_none() {
            return Err(SessionError::MissingCodebook);
        }
        let mut effects = Vec::new();
        let transition = match coder {
            None => true,
            Some(c) => {
                let ix = self
                    .config
                    .coder_index(c)
                    .ok_or_else(|| SessionError::UnknownCoder(c.to_string()))?;
                if self.phase == Phase::Two {
                    true
                } else {
                    self.require_can_code(c)?;
                    self.completed.insert(c.clone());
                    if self.phase == Phase::One {
                        self.phase1_completed.insert(c.clone());
                    }
                    effects.push(Effect::CoderCompleted {
                        coder: c.clone(),
                        phase: self.phase,
                    });
                    // hand-off point: coder 2 starts from coder 1's full history
                    if self.config.condition == Condition::C && self.phase == Phase::One && ix == 0
                    {
                        for (i, b) in self.engines.iter().enumerate() {
                            if let Some(v) = b.engine.flush(ts) {
                                effects.push(Effect::RetrainScheduled {
                                    engine: i,
                                    version: Some(v),
                                });
                            }
                        }
                    }
                    self.completed.len() == 2
                }
            }
        };
        if transition {
            let from = self.phase;
            self.phase = next;
            self.phase_started.push(ts);
            self.completed.clear();
            effects.push(Effect::PhaseChanged { from, to: next });
        }
        Ok(effects)
    }

    /// State visible to one coder. Partner annotations are withheld while
    /// coding is independent (phases 1 and 3).
    pub fn coder_view(&self, coder: &CoderId) -> Result<CoderView, SessionError> {
        let ix = self
            .config
            .coder_index(coder)
            .ok_or_else(|| SessionError::UnknownCoder(coder.to_string()))?;
        let partner = &self.config.coders[1 - ix];
        let shared = matches!(self.phase, Phase::Two | Phase::Done);
        let documents = match self.phase {
            Phase::One => self.config.phase1_documents.clone(),
            Phase::Three => vec![self.config.phase3_document.clone()],
            _ => self
                .config
                .phase1_documents
                .iter()
                .chain([&self.config.phase3_document])
                .cloned()
                .collect(),
        };
        Ok(CoderView {
            coder: coder.clone(),
            condition: self.config.condition,
            phase: self.phase,
            phase_started_at: self.phase_started_at(),
            phase_limit_secs: self.phase.index().map(|i| self.config.phase_limits_secs[i]),
            completed: self.completed.contains(coder),
            permission: self.can_code(coder),
            documents,
            annotations: self.annotations_of(coder).into_iter().cloned().collect(),
            partner_annotations: if shared {
                self.annotations_of(partner).into_iter().cloned().collect()
            } else {
                Vec::new()
            },
            codebook: self.codebook.clone(),
        })
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            config: self.config.clone(),
            phase: self.phase,
            phase_started: self.phase_started.clone(),
            annotations: self.annotations.clone(),
            completed: self.completed.iter().cloned().collect(),
            phase1_completed: self.phase1_completed.iter().cloned().collect(),
            codebook: self.codebook.clone(),
            reminders_sent: self.reminders_sent.iter().cloned().collect(),
            log: self.log.clone(),
        }
    }
}

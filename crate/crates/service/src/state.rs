//! Live sessions: authorization, linearized command application,
//! persistence and event fan-out.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use qcollab_core::clock::Clock;
use qcollab_core::codebook::CoderId;
use qcollab_core::corpus::DocumentSource;
use qcollab_core::metrics::{session_report, MetricsError, MetricsReport};
use qcollab_core::replay::ReplayScript;
use qcollab_core::serving::{RetrainMode, ServingConfig, WorkerHandle};
use qcollab_core::session::{
    AnalysisInputs, Audience, Condition, Effect, EventBody, Session, SessionConfig, SessionError,
    SessionEvent, SessionSnapshot,
};
use qcollab_core::suggest::Scope;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::config::{RetrainChoice, ServiceConfig};
use crate::store::{SessionTokens, Store, StoreError, StoredSnapshot};

const RECENT_EVENTS: usize = 256;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("missing or invalid token")]
    Unauthorized,
    #[error("operator token required")]
    OperatorOnly,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Coder(CoderId),
    Operator,
}

impl Role {
    fn coder(&self) -> Option<&CoderId> {
        match self {
            Role::Coder(c) => Some(c),
            Role::Operator => None,
        }
    }

    pub fn sees(&self, audience: &Audience) -> bool {
        match (self, audience) {
            (_, Audience::Everyone) | (Role::Operator, _) => true,
            (Role::Coder(me), Audience::Coder(c)) => me == c,
        }
    }
}

/// One server-sent event.
#[derive(Debug, Clone, Serialize)]
pub struct ServerEvent {
    pub id: u64,
    pub kind: String,
    pub data: Value,
    #[serde(skip)]
    pub audience: Audience,
}

/// Event fan-out with a short backlog for reconnecting clients.
pub struct Publisher {
    tx: broadcast::Sender<ServerEvent>,
    next_id: AtomicU64,
    recent: Mutex<VecDeque<ServerEvent>>,
}

impl Publisher {
    fn new() -> Self {
        Publisher {
            tx: broadcast::channel(1024).0,
            next_id: AtomicU64::new(1),
            recent: Mutex::new(VecDeque::new()),
        }
    }

    pub fn publish(&self, kind: &str, data: Value, audience: Audience) {
        let mut recent = self.recent.lock();
        let ev = ServerEvent {
            id: self.next_id.fetch_add(1, Ordering::SeqCst),
            kind: kind.to_string(),
            data,
            audience,
        };
        if recent.len() == RECENT_EVENTS {
            recent.pop_front();
        }
        recent.push_back(ev.clone());
        let _ = self.tx.send(ev);
    }

    /// Live receiver plus retained events newer than `after`, taken
    /// atomically so nothing falls between them.
    pub fn subscribe(
        &self,
        after: Option<u64>,
    ) -> (Vec<ServerEvent>, broadcast::Receiver<ServerEvent>) {
        let recent = self.recent.lock();
        let rx = self.tx.subscribe();
        let backlog = match after {
            Some(id) => recent.iter().filter(|e| e.id > id).cloned().collect(),
            None => Vec::new(),
        };
        (backlog, rx)
    }
}

fn effect_event(effect: &Effect) -> Option<(&'static str, Value)> {
    let kind = match effect {
        Effect::AnnotationSaved { .. } => "annotation_saved",
        Effect::AnnotationUpdated { .. } => "annotation_updated",
        Effect::CoderCompleted { .. } => "coder_completed",
        Effect::PhaseChanged { .. } => "phase_changed",
        Effect::Reminder { .. } => "reminder",
        Effect::PhaseTimeExceeded { .. } => "phase_time_exceeded",
        Effect::CodebookCommitted { .. } => "codebook_committed",
        Effect::Suggestions { .. } | Effect::RetrainScheduled { .. } => return None,
    };
    Some((
        kind,
        serde_json::to_value(effect).expect("effect serializes"),
    ))
}

struct Live {
    session: Session,
    persisted: usize,
    since_snapshot: usize,
}

pub struct SessionHandle {
    pub id: String,
    tokens: SessionTokens,
    live: Mutex<Live>,
    publisher: Arc<Publisher>,
    workers: Mutex<Vec<WorkerHandle>>,
    store: Store,
    clock: Arc<dyn Clock>,
    snapshot_every: usize,
}

impl SessionHandle {
    pub fn tokens(&self) -> &SessionTokens {
        &self.tokens
    }

    pub fn publisher(&self) -> &Publisher {
        &self.publisher
    }

    pub fn authorize(&self, token: Option<&str>) -> Result<Role, ApiError> {
        let token = token.ok_or(ApiError::Unauthorized)?;
        if token == self.tokens.operator {
            return Ok(Role::Operator);
        }
        let live = self.live.lock();
        let coders = &live.session.config().coders;
        self.tokens
            .coders
            .iter()
            .position(|t| t == token)
            .map(|i| Role::Coder(coders[i].clone()))
            .ok_or(ApiError::Unauthorized)
    }

    /// Apply one command as `role` at the current clock time.
    pub fn submit(&self, role: &Role, body: EventBody) -> Result<Vec<Effect>, ApiError> {
        let mut live = self.live.lock();
        let now = self.clock.now().max(live.session.last_ts());
        // timers fire even when the command itself is rejected
        let timers = live.session.tick(now);
        self.broadcast(&timers);
        let event = SessionEvent::new(now, role.coder(), body);
        let result = live.session.apply_event(event);
        self.persist(&mut live)?;
        let effects = result?;
        self.broadcast(&effects);
        Ok(effects)
    }

    /// Fire due timers and retrains.
    pub fn tick(&self) -> Result<(), ApiError> {
        let mut live = self.live.lock();
        let now = self.clock.now().max(live.session.last_ts());
        let effects = live.session.tick(now);
        self.persist(&mut live)?;
        self.broadcast(&effects);
        Ok(())
    }

    fn persist(&self, live: &mut Live) -> Result<(), ApiError> {
        let log = live.session.log();
        if live.persisted == log.len() {
            return Ok(());
        }
        self.store.append(&self.id, &log[live.persisted..])?;
        live.since_snapshot += log.len() - live.persisted;
        live.persisted = log.len();
        if live.since_snapshot >= self.snapshot_every {
            let snapshot = live.session.snapshot();
            self.store.write_snapshot(
                &self.id,
                &StoredSnapshot {
                    log_len: live.persisted,
                    hash: snapshot.hash(),
                    snapshot,
                },
            )?;
            live.since_snapshot = 0;
        }
        Ok(())
    }

    fn broadcast(&self, effects: &[Effect]) {
        for e in effects {
            if let Some((kind, data)) = effect_event(e) {
                self.publisher.publish(kind, data, e.audience());
            }
        }
    }

    pub fn with_session<R>(&self, f: impl FnOnce(&Session) -> R) -> R {
        f(&self.live.lock().session)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        self.with_session(Session::snapshot)
    }

    pub fn state(&self, role: &Role) -> Result<Value, ApiError> {
        let now = self.clock.now();
        self.with_session(|s| {
            let mut v = match role {
                Role::Coder(c) => serde_json::to_value(s.coder_view(c)?).expect("view serializes"),
                Role::Operator => operator_view(s),
            };
            v["server_time"] = json!(now);
            v["session_id"] = json!(self.id);
            Ok(v)
        })
    }

    pub fn report(&self) -> Result<MetricsReport, ApiError> {
        Ok(self.with_session(session_report)?)
    }

    pub fn script(&self) -> ReplayScript {
        self.with_session(ReplayScript::from_session)
    }

    fn stop_workers(&self) {
        for w in self.workers.lock().drain(..) {
            w.stop();
        }
    }
}

fn operator_view(s: &Session) -> Value {
    let counts: BTreeMap<&str, usize> = s
        .config()
        .coders
        .iter()
        .map(|c| {
            let n = s.annotations_of(c).iter().filter(|a| a.is_live()).count();
            (c.as_str(), n)
        })
        .collect();
    let engines: Vec<Value> = s
        .engines()
        .iter()
        .map(|b| json!({ "scope": format!("{:?}", b.scope), "stats": b.engine.stats() }))
        .collect();
    json!({
        "condition": s.config().condition,
        "phase": s.phase(),
        "phase_started_at": s.phase_started_at(),
        "live_annotations": counts,
        "codebook": s.codebook(),
        "engines": engines,
        "log_len": s.log().len(),
    })
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub condition: Option<Condition>,
    #[serde(default)]
    pub coders: Option<[String; 2]>,
    /// Phase-1 documents. Without `phase3_document` the last one is
    /// held back for phase 3.
    pub documents: Vec<DocumentSource>,
    #[serde(default)]
    pub phase3_document: Option<DocumentSource>,
    #[serde(default)]
    pub phase_limits: Option<[u64; 3]>,
    #[serde(default)]
    pub reminder_offsets: Option<Vec<u64>>,
    #[serde(default)]
    pub suggestion_k: Option<usize>,
    #[serde(default)]
    pub reveal_suggestion_origin: Option<bool>,
    #[serde(default)]
    pub analysis: Option<AnalysisInputs>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoderLink {
    pub coder: CoderId,
    pub token: String,
    pub url: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Created {
    pub session_id: String,
    pub coder_links: Vec<CoderLink>,
    pub operator_token: String,
}

fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::Rng::fill(&mut rand::thread_rng(), buf.as_mut_slice());
    hex::encode(buf)
}

pub struct AppState {
    pub config: ServiceConfig,
    clock: Arc<dyn Clock>,
    store: Store,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    /// Open the storage directory and recover every stored session.
    pub fn open(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Arc<AppState>, ApiError> {
        let store = Store::open(&config.storage_dir)?;
        let state = Arc::new(AppState {
            config,
            clock,
            store,
            sessions: RwLock::new(HashMap::new()),
        });
        for id in state.store.list()? {
            state.recover(&id)?;
        }
        Ok(state)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn serving(&self, config: &SessionConfig) -> ServingConfig {
        ServingConfig {
            min_retrain_interval: Duration::from_millis(config.min_retrain_interval_ms),
            mode: match self.config.retrain {
                RetrainChoice::Inline => RetrainMode::Inline,
                RetrainChoice::Background => RetrainMode::Background,
            },
            training_delay: Duration::ZERO,
        }
    }

    fn recover(&self, id: &str) -> Result<(), ApiError> {
        let stored = self.store.load(id)?;
        let serving = self.serving(&stored.script.config);
        let session =
            Session::from_log(stored.script.config.clone(), &stored.script.events, serving)
                .map_err(|(i, e)| {
                    ApiError::Invalid(format!("stored log of {id}, event {i}: {e}"))
                })?;
        if let Some(snap) = &stored.snapshot {
            if snap.log_len == session.log().len() && snap.hash != session.snapshot().hash() {
                tracing::warn!(session = id, "snapshot hash differs from replayed state");
            }
        }
        let persisted = session.log().len();
        tracing::info!(session = id, events = persisted, "recovered");
        self.install(id.to_string(), stored.tokens, session, persisted);
        Ok(())
    }

    fn install(
        &self,
        id: String,
        tokens: SessionTokens,
        session: Session,
        persisted: usize,
    ) -> Arc<SessionHandle> {
        let publisher = Arc::new(Publisher::new());
        let mut workers = Vec::new();
        for (i, b) in session.engines().iter().enumerate() {
            let audience = match &b.scope {
                Scope::Coder(c) => Audience::Coder(c.clone()),
                Scope::Shared => Audience::Everyone,
            };
            let p = Arc::clone(&publisher);
            b.engine.set_on_swap(move |version| {
                p.publish(
                    "model_updated",
                    json!({ "engine": i, "version": version }),
                    audience.clone(),
                );
            });
            if b.engine.config().mode == RetrainMode::Background {
                workers.push(b.engine.spawn_worker(Arc::clone(&self.clock)));
            }
        }
        let handle = Arc::new(SessionHandle {
            id: id.clone(),
            tokens,
            live: Mutex::new(Live {
                session,
                persisted,
                since_snapshot: 0,
            }),
            publisher,
            workers: Mutex::new(workers),
            store: self.store.clone(),
            clock: Arc::clone(&self.clock),
            snapshot_every: self.config.snapshot_every.max(1),
        });
        self.sessions.write().insert(id, Arc::clone(&handle));
        handle
    }

    pub fn create_session(&self, req: CreateSession) -> Result<Created, ApiError> {
        let mut documents = req.documents;
        let phase3 = match req.phase3_document {
            Some(d) => d,
            None if documents.len() >= 2 => documents.pop().unwrap(),
            None => {
                return Err(ApiError::Invalid(
                    "need a phase-3 document: pass phase3_document or at least two documents"
                        .into(),
                ))
            }
        };
        let coders = req
            .coders
            .unwrap_or_else(|| ["coder1".to_string(), "coder2".to_string()]);
        let mut config = SessionConfig::new(
            req.condition.unwrap_or(self.config.default_condition),
            [coders[0].as_str(), coders[1].as_str()],
            documents,
            phase3,
        );
        config.name = req.name.unwrap_or_default();
        config.min_retrain_interval_ms = self.config.min_retrain_interval_ms;
        config.suggestion_k = req.suggestion_k.unwrap_or(self.config.suggestion_k);
        if let Some(l) = req.phase_limits {
            config.phase_limits_secs = l;
        }
        if let Some(r) = req.reminder_offsets {
            config.reminder_offsets_secs = r;
        }
        if let Some(r) = req.reveal_suggestion_origin {
            config.reveal_suggestion_origin = r;
        }
        if let Some(a) = req.analysis {
            config.analysis = a;
        }
        if config.suggestion_k == 0 {
            return Err(ApiError::Invalid("suggestion_k must be positive".into()));
        }
        let id = random_hex(8);
        if config.name.is_empty() {
            config.name = id.clone();
        }
        let serving = self.serving(&config);
        let session = Session::create_with(config.clone(), self.clock.now(), serving)?;
        let tokens = SessionTokens {
            coders: [random_hex(16), random_hex(16)],
            operator: random_hex(16),
        };
        self.store.create(&id, &tokens, &config)?;
        self.store.append(&id, session.log())?;
        let persisted = session.log().len();
        self.install(id.clone(), tokens.clone(), session, persisted);
        let base = self.config.public_url.trim_end_matches('/');
        let coder_links = config
            .coders
            .iter()
            .zip(&tokens.coders)
            .map(|(c, t)| CoderLink {
                coder: c.clone(),
                token: t.clone(),
                url: format!("{base}/sessions/{id}/state?token={t}"),
            })
            .collect();
        Ok(Created {
            session_id: id,
            coder_links,
            operator_token: tokens.operator,
        })
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn tick_all(&self) {
        let handles: Vec<_> = self.sessions.read().values().cloned().collect();
        for h in handles {
            if let Err(e) = h.tick() {
                tracing::error!(session = %h.id, error = %e, "tick failed");
            }
        }
    }

    /// Stop all retrain workers. Sessions stay readable.
    pub fn shutdown(&self) {
        for h in self.sessions.read().values() {
            h.stop_workers();
        }
    }
}

impl Drop for AppState {
    fn drop(&mut self) {
        self.shutdown();
    }
}

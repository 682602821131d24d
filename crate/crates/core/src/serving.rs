//! Dual-slot model serving with background retraining.
//!
//! Two slots each hold a trained model. A swap replaces the slots one at a
//! time, marking a slot `Replacing` while its model is installed, so at every
//! instant at least one slot is `Ready`. Requests go to slot 1 when it is
//! ready and fail over to slot 2 otherwise. The read path is a pair of atomic
//! pointer loads and never waits on training or on the writer.
//!
//! Retraining is rate limited: a history change starts a retrain right away
//! when the engine is idle and the last retrain started at least
//! `min_retrain_interval` ago; otherwise it raises a pending flag and exactly
//! one follow-up retrain runs once the interval has elapsed.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::suggest::{train, SuggestionModel, SuggestionSet, TrainingSet};

pub const DEFAULT_MIN_RETRAIN_INTERVAL: Duration = Duration::from_secs(10);

/// Reader retries before declaring a fault. Each retry re-reads slot 1, which
/// the single writer has finished with by the time it touches slot 2.
const MAX_ROUTE_ATTEMPTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServingError {
    #[error("model version {offered} is not newer than served version {served}")]
    StaleModel { offered: u64, served: u64 },
    #[error("internal fault: no ready slot")]
    NoReadySlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Training runs on the caller's thread at notification or poll time.
    Inline,
    /// Training runs on a worker thread started with [`ServingEngine::spawn_worker`].
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServingConfig {
    pub min_retrain_interval: Duration,
    pub mode: RetrainMode,
    /// Artificial training latency, measured on the worker's clock.
    pub training_delay: Duration,
}

impl Default for ServingConfig {
    fn default() -> Self {
        ServingConfig {
            min_retrain_interval: DEFAULT_MIN_RETRAIN_INTERVAL,
            mode: RetrainMode::Inline,
            training_delay: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone)]
pub enum SlotState {
    Ready(Arc<SuggestionModel>),
    Replacing { previous: u64 },
}

impl SlotState {
    pub fn is_ready(&self) -> bool {
        matches!(self, SlotState::Ready(_))
    }

    pub fn version(&self) -> u64 {
        match self {
            SlotState::Ready(m) => m.version,
            SlotState::Replacing { previous } => *previous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotId {
    Primary,
    Secondary,
}

/// Outcome of a history-change notification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Notice {
    /// A retrain producing this version was started.
    Started(u64),
    /// Coalesced into the pending follow-up retrain.
    Pending,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrainTicket {
    pub version: u64,
    pub started_at: Timestamp,
}

/// Rate-limiting state machine deciding when retrains start.
#[derive(Debug, Clone)]
pub struct RetrainScheduler {
    min_interval: Duration,
    last_start: Option<Timestamp>,
    in_flight: bool,
    pending: bool,
    next_version: u64,
    started: u64,
}

impl RetrainScheduler {
    pub fn new(min_interval: Duration, first_version: u64) -> Self {
        RetrainScheduler {
            min_interval,
            last_start: None,
            in_flight: false,
            pending: false,
            next_version: first_version,
            started: 0,
        }
    }

    fn start(&mut self, at: Timestamp) -> RetrainTicket {
        let t = RetrainTicket {
            version: self.next_version,
            started_at: at,
        };
        self.next_version += 1;
        self.started += 1;
        self.in_flight = true;
        self.pending = false;
        self.last_start = Some(at);
        t
    }

    /// Earliest time a new retrain may start, ignoring the in-flight one.
    fn earliest(&self) -> Option<Timestamp> {
        self.last_start.map(|t| t.plus(self.min_interval))
    }

    pub fn on_change(&mut self, now: Timestamp) -> Option<RetrainTicket> {
        if !self.in_flight && self.earliest().is_none_or(|e| now >= e) {
            Some(self.start(now))
        } else {
            self.pending = true;
            None
        }
    }

    /// When the pending retrain becomes eligible, if there is one.
    pub fn due(&self) -> Option<Timestamp> {
        if !self.pending {
            return None;
        }
        Some(self.earliest().unwrap_or(Timestamp(i64::MIN)))
    }

    /// Start the pending retrain if it is eligible at `now`. The ticket is
    /// stamped with the moment it became eligible, not `now`, so late polling
    /// does not shift the schedule.
    pub fn poll(&mut self, now: Timestamp) -> Option<RetrainTicket> {
        let due = self.due()?;
        if self.in_flight || now < due {
            return None;
        }
        let at = if self.last_start.is_some() { due } else { now };
        Some(self.start(at))
    }

    /// Start the pending retrain now, ignoring the interval.
    pub fn force(&mut self, now: Timestamp) -> Option<RetrainTicket> {
        if self.pending && !self.in_flight {
            Some(self.start(now))
        } else {
            None
        }
    }

    pub fn complete(&mut self) {
        self.in_flight = false;
    }

    pub fn is_pending(&self) -> bool {
        self.pending
    }

    pub fn is_in_flight(&self) -> bool {
        self.in_flight
    }

    pub fn started(&self) -> u64 {
        self.started
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub retrains_started: u64,
    pub retrains_completed: u64,
    pub current_version: u64,
    pub last_training_ms: u64,
    pub pending: bool,
}

struct Control {
    scheduler: RetrainScheduler,
    queued: VecDeque<RetrainTicket>,
    latest: Arc<TrainingSet>,
    completed: u64,
    last_training_ms: u64,
    shutdown: bool,
}

type SwapHook = Box<dyn Fn(u64) + Send + Sync>;

pub struct ServingEngine {
    slots: [ArcSwap<SlotState>; 2],
    writer: Mutex<()>,
    control: Mutex<Control>,
    wake: Condvar,
    config: ServingConfig,
    on_swap: OnceLock<SwapHook>,
}

impl std::fmt::Debug for ServingEngine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServingEngine")
            .field("config", &self.config)
            .field("stats", &self.stats())
            .finish()
    }
}

impl ServingEngine {
    /// Both slots start with an empty version-0 model.
    pub fn new(config: ServingConfig, at: Timestamp) -> Self {
        let empty = Arc::new(SuggestionModel::empty(0, at));
        ServingEngine {
            slots: [
                ArcSwap::from_pointee(SlotState::Ready(empty.clone())),
                ArcSwap::from_pointee(SlotState::Ready(empty)),
            ],
            writer: Mutex::new(()),
            control: Mutex::new(Control {
                scheduler: RetrainScheduler::new(config.min_retrain_interval, 1),
                queued: VecDeque::new(),
                latest: Arc::new(TrainingSet::new()),
                completed: 0,
                last_training_ms: 0,
                shutdown: false,
            }),
            wake: Condvar::new(),
            config,
            on_swap: OnceLock::new(),
        }
    }

    pub fn config(&self) -> &ServingConfig {
        &self.config
    }

    /// Called with the new version after every completed swap. Set once.
    pub fn set_on_swap(&self, hook: impl Fn(u64) + Send + Sync + 'static) {
        let _ = self.on_swap.set(Box::new(hook));
    }

    pub fn slot_state(&self, slot: SlotId) -> Arc<SlotState> {
        self.slots[slot as usize].load_full()
    }

    /// Version served by slot 1 when ready, else slot 2.
    pub fn served_version(&self) -> u64 {
        self.route().map(|(_, m)| m.version).unwrap_or(0)
    }

    fn route(&self) -> Result<(SlotId, Arc<SuggestionModel>), ServingError> {
        for _ in 0..MAX_ROUTE_ATTEMPTS {
            for (i, id) in [SlotId::Primary, SlotId::Secondary].into_iter().enumerate() {
                if let SlotState::Ready(m) = &**self.slots[i].load() {
                    return Ok((id, m.clone()));
                }
            }
        }
        Err(ServingError::NoReadySlot)
    }

    pub fn request_suggestions(&self, text: &str, k: usize) -> Result<SuggestionSet, ServingError> {
        self.request_suggestions_routed(text, k).map(|(_, s)| s)
    }

    /// Like [`Self::request_suggestions`] but also reports the serving slot.
    pub fn request_suggestions_routed(
        &self,
        text: &str,
        k: usize,
    ) -> Result<(SlotId, SuggestionSet), ServingError> {
        let (slot, model) = self.route()?;
        Ok((slot, model.predict(text, k)))
    }

    /// Begin a stepwise swap. The returned plan holds the writer lock.
    pub fn begin_swap(&self, model: SuggestionModel) -> Result<SwapPlan<'_>, ServingError> {
        let guard = self.writer.lock().unwrap();
        let served = self
            .slots
            .iter()
            .map(|s| s.load().version())
            .max()
            .unwrap_or(0);
        if model.version <= served {
            return Err(ServingError::StaleModel {
                offered: model.version,
                served,
            });
        }
        Ok(SwapPlan {
            engine: self,
            model: Arc::new(model),
            step: 0,
            _guard: guard,
        })
    }

    /// Replace both slots, one at a time.
    pub fn swap_in(&self, model: SuggestionModel) -> Result<(), ServingError> {
        let mut plan = self.begin_swap(model)?;
        while plan.step() {}
        Ok(())
    }

    fn finish_swap(&self, version: u64) {
        if let Some(hook) = self.on_swap.get() {
            hook(version);
        }
    }

    pub fn latest_training_set(&self) -> Arc<TrainingSet> {
        self.control.lock().unwrap().latest.clone()
    }

    /// Record new training data and schedule a retrain. In inline mode a
    /// retrain that starts is run before returning.
    pub fn notify_history_changed(&self, latest: TrainingSet, now: Timestamp) -> Notice {
        let (notice, ticket) = {
            let mut c = self.control.lock().unwrap();
            c.latest = Arc::new(latest);
            match c.scheduler.on_change(now) {
                Some(t) => {
                    if self.config.mode == RetrainMode::Background {
                        c.queued.push_back(t);
                    }
                    (Notice::Started(t.version), Some(t))
                }
                None => (Notice::Pending, None),
            }
        };
        match (self.config.mode, ticket) {
            (RetrainMode::Inline, Some(t)) => self.run_inline(t),
            (RetrainMode::Background, Some(_)) => self.wake.notify_all(),
            _ => {}
        }
        notice
    }

    /// Run the pending retrain if it is due (inline mode), or nudge the worker.
    pub fn run_due(&self, now: Timestamp) -> Option<u64> {
        if self.config.mode == RetrainMode::Background {
            self.wake.notify_all();
            return None;
        }
        let ticket = self.control.lock().unwrap().scheduler.poll(now)?;
        self.run_inline(ticket);
        Some(ticket.version)
    }

    /// Start any pending retrain immediately, ignoring the interval.
    pub fn flush(&self, now: Timestamp) -> Option<u64> {
        let ticket = {
            let mut c = self.control.lock().unwrap();
            let t = c.scheduler.force(now)?;
            if self.config.mode == RetrainMode::Background {
                c.queued.push_back(t);
            }
            t
        };
        match self.config.mode {
            RetrainMode::Inline => self.run_inline(ticket),
            RetrainMode::Background => self.wake.notify_all(),
        }
        Some(ticket.version)
    }

    /// Time at which the pending retrain becomes eligible.
    pub fn next_due(&self) -> Option<Timestamp> {
        self.control.lock().unwrap().scheduler.due()
    }

    fn run_inline(&self, ticket: RetrainTicket) {
        let ts = self.latest_training_set();
        let t0 = Instant::now();
        let model = train(&ts, ticket.version, ticket.started_at);
        let elapsed = t0.elapsed();
        let _ = self.swap_in(model);
        self.finish_swap(ticket.version);
        let mut c = self.control.lock().unwrap();
        c.scheduler.complete();
        c.completed += 1;
        c.last_training_ms = elapsed.as_millis() as u64;
    }

    pub fn stats(&self) -> EngineStats {
        let c = self.control.lock().unwrap();
        EngineStats {
            retrains_started: c.scheduler.started(),
            retrains_completed: c.completed,
            current_version: self.served_version(),
            last_training_ms: c.last_training_ms,
            pending: c.scheduler.is_pending(),
        }
    }

    /// Start the background retrain worker. Dropping the handle stops it.
    pub fn spawn_worker(self: &Arc<Self>, clock: Arc<dyn Clock>) -> WorkerHandle {
        let engine = Arc::clone(self);
        let running = Arc::new(AtomicBool::new(true));
        let handle = std::thread::Builder::new()
            .name("retrain-worker".into())
            .spawn(move || engine.worker_loop(clock))
            .expect("spawn retrain worker");
        WorkerHandle {
            engine: Arc::clone(self),
            handle: Some(handle),
            running,
        }
    }

    fn worker_loop(&self, clock: Arc<dyn Clock>) {
        loop {
            let ticket = {
                let mut c = self.control.lock().unwrap();
                loop {
                    if c.shutdown {
                        return;
                    }
                    if let Some(t) = c.queued.pop_front() {
                        break t;
                    }
                    if let Some(t) = c.scheduler.poll(clock.now()) {
                        break t;
                    }
                    // The clock may be virtual, so deadlines are re-checked
                    // on a short real-time cadence.
                    c = self
                        .wake
                        .wait_timeout(c, Duration::from_millis(5))
                        .unwrap()
                        .0;
                }
            };
            let ts = self.latest_training_set();
            let t0 = Instant::now();
            if !self.config.training_delay.is_zero() {
                clock.sleep_until(ticket.started_at.plus(self.config.training_delay));
            }
            let model = train(&ts, ticket.version, ticket.started_at);
            let _ = self.swap_in(model);
            self.finish_swap(ticket.version);
            let mut c = self.control.lock().unwrap();
            c.scheduler.complete();
            c.completed += 1;
            c.last_training_ms = t0.elapsed().as_millis() as u64;
        }
    }
}

/// A swap in progress. Each [`SwapPlan::step`] performs one transition:
/// slot 1 to `Replacing`, slot 1 to the new model, then the same for slot 2.
pub struct SwapPlan<'a> {
    engine: &'a ServingEngine,
    model: Arc<SuggestionModel>,
    step: usize,
    _guard: std::sync::MutexGuard<'a, ()>,
}

impl SwapPlan<'_> {
    /// Perform the next transition; returns whether more remain.
    pub fn step(&mut self) -> bool {
        let slot = &self.engine.slots[self.step / 2];
        if self.step.is_multiple_of(2) {
            let previous = slot.load().version();
            slot.store(Arc::new(SlotState::Replacing { previous }));
        } else {
            slot.store(Arc::new(SlotState::Ready(self.model.clone())));
        }
        self.step += 1;
        self.step < 4
    }

    pub fn is_done(&self) -> bool {
        self.step >= 4
    }
}

pub struct WorkerHandle {
    engine: Arc<ServingEngine>,
    handle: Option<JoinHandle<()>>,
    running: Arc<AtomicBool>,
}

impl WorkerHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if !self.running.swap(false, Ordering::SeqCst) {
            return;
        }
        self.engine.control.lock().unwrap().shutdown = true;
        self.engine.wake.notify_all();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

//! Evaluation dispatch to external workers.
//!
//! Messages are single-line JSON objects. [`Dispatcher`] is a pure state
//! machine: callers feed it worker messages and the current time and drain
//! outgoing messages, completions and events. [`PoolEvaluator`] adapts a
//! dispatcher plus a [`Link`] (real sockets, or a simulated cluster in tests)
//! to the engine's evaluator traits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::arch::{count_params, Architecture, ModelShapeConfig};
use crate::engine::{Completion, ConcurrentEvaluator};
use crate::fitness::{EvalError, EvalScores, EvalSource, Evaluator};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMessage {
    pub job_id: String,
    pub status: ResultStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_message: Option<String>,
    /// Free-form timing metadata, passed through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Map<String, Value>>,
}

impl ResultMessage {
    pub fn ok(job_id: impl Into<String>, accuracy_pct: f64, robustness_pct: f64, param_count: Option<u64>) -> Self {
        ResultMessage {
            job_id: job_id.into(),
            status: ResultStatus::Ok,
            accuracy_pct: Some(accuracy_pct),
            robustness_pct: Some(robustness_pct),
            param_count,
            error_message: None,
            timing: None,
        }
    }

    pub fn error(job_id: impl Into<String>, message: impl Into<String>) -> Self {
        ResultMessage {
            job_id: job_id.into(),
            status: ResultStatus::Error,
            accuracy_pct: None,
            robustness_pct: None,
            param_count: None,
            error_message: Some(message.into()),
            timing: None,
        }
    }
}

/// Worker to engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WorkerMessage {
    Hello {
        worker_id: String,
        #[serde(default)]
        capabilities: Map<String, Value>,
    },
    Result(ResultMessage),
    Pong {
        nonce: String,
    },
}

/// Engine to worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EngineMessage {
    Eval { job_id: String, arch: Architecture, eval_config: Value },
    Ping { nonce: String },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("message is not an object with a string \"type\" field")]
    MissingType,
}

/// A decoded line; types this version does not know are surfaced, not
/// rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded<M> {
    Known(M),
    Unknown { kind: String },
}

pub fn encode<M: Serialize>(msg: &M) -> String {
    serde_json::to_string(msg).expect("protocol messages serialize")
}

fn decode<M: for<'de> Deserialize<'de>>(line: &str, known: &[&str]) -> Result<Decoded<M>, ProtocolError> {
    let value: Value = serde_json::from_str(line.trim())?;
    let kind = value.get("type").and_then(Value::as_str).ok_or(ProtocolError::MissingType)?;
    if !known.contains(&kind) {
        return Ok(Decoded::Unknown { kind: kind.to_string() });
    }
    Ok(Decoded::Known(serde_json::from_value(value)?))
}

pub fn decode_worker(line: &str) -> Result<Decoded<WorkerMessage>, ProtocolError> {
    decode(line, &["hello", "result", "pong"])
}

pub fn decode_engine(line: &str) -> Result<Decoded<EngineMessage>, ProtocolError> {
    decode(line, &["eval", "ping"])
}

fn secs(d: &Duration) -> f64 {
    d.as_secs_f64()
}

mod seconds {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(super::secs(d))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Supervision policy. Durations are written in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DispatchConfig {
    #[serde(rename = "job_timeout_s", with = "seconds")]
    pub job_timeout: Duration,
    /// Failed attempts a job may absorb and still be retried.
    pub retry_cap: u32,
    #[serde(rename = "probe_interval_s", with = "seconds")]
    pub probe_interval: Duration,
    #[serde(rename = "probe_timeout_s", with = "seconds")]
    pub probe_timeout: Duration,
    /// How long outstanding work may sit with no registered worker before
    /// the pool is reported empty.
    #[serde(rename = "pool_empty_grace_s", with = "seconds")]
    pub pool_empty_grace: Duration,
    /// How long `search` waits for the first worker to connect.
    #[serde(rename = "connect_timeout_s", with = "seconds")]
    pub connect_timeout: Duration,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            job_timeout: Duration::from_secs(30 * 60),
            retry_cap: 3,
            probe_interval: Duration::from_secs(30),
            probe_timeout: Duration::from_secs(10),
            pool_empty_grace: Duration::from_secs(10),
            connect_timeout: Duration::from_secs(60),
        }
    }
}

impl DispatchConfig {
    /// Short timeouts for test harnesses.
    pub fn for_tests() -> Self {
        DispatchConfig {
            job_timeout: Duration::from_secs(5),
            retry_cap: 3,
            probe_interval: Duration::from_secs(1),
            probe_timeout: Duration::from_secs(2),
            pool_empty_grace: Duration::from_secs(1),
            connect_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DispatchError {
    #[error("no workers are registered")]
    NoWorkers,
    #[error("job id {0} was already submitted")]
    DuplicateJob(String),
}

/// Everything worth logging or asserting on.
#[derive(Debug, Clone, PartialEq)]
pub enum DispatchEvent {
    Registered { worker: String },
    Deregistered { worker: String, reason: String },
    Assigned { job: String, worker: String },
    TimedOut { job: String, worker: String },
    Requeued { job: String, failures: u32 },
    Resolved { job: String, ok: bool },
    DuplicateResult { job: String, worker: String },
    UnknownJob { job: String, worker: String },
    StaleError { job: String, worker: String },
    InvalidResult { job: String, worker: String, reason: String },
    ParamMismatch { job: String, worker: String, engine: u64, reported: u64 },
    UnknownMessage { worker: String, kind: String },
    PoolEmpty,
}

/// The single resolution of a job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutcome {
    pub job_id: String,
    pub result: Result<EvalScores, String>,
    pub source: EvalSource,
    pub failures: u32,
}

#[derive(Debug, Clone, PartialEq)]
enum JobState {
    Queued,
    Running { worker: String, deadline: Duration },
}

#[derive(Debug)]
struct Job {
    arch: Architecture,
    state: JobState,
    failures: u32,
    tried: BTreeSet<String>,
    last_failed_on: Option<String>,
}

#[derive(Debug)]
struct Worker {
    capabilities: Map<String, Value>,
    current: Option<String>,
    /// Set after a job timeout; the worker is dropped if it stays silent
    /// past this instant.
    suspect_until: Option<Duration>,
    ping: Option<(String, Duration)>,
    next_probe: Duration,
    idle_since: Duration,
}

impl Worker {
    fn available(&self) -> bool {
        self.current.is_none() && self.suspect_until.is_none()
    }
}

pub struct Dispatcher {
    config: DispatchConfig,
    shape: ModelShapeConfig,
    eval_config: Value,
    workers: BTreeMap<String, Worker>,
    jobs: HashMap<String, Job>,
    queue: VecDeque<String>,
    resolved: HashSet<String>,
    outbox: VecDeque<(String, EngineMessage)>,
    completions: VecDeque<JobOutcome>,
    events: Vec<DispatchEvent>,
    empty_since: Option<Duration>,
    pool_empty: bool,
    nonce: u64,
}

impl Dispatcher {
    pub fn new(config: DispatchConfig, shape: ModelShapeConfig, eval_config: Value) -> Self {
        Dispatcher {
            config,
            shape,
            eval_config,
            workers: BTreeMap::new(),
            jobs: HashMap::new(),
            queue: VecDeque::new(),
            resolved: HashSet::new(),
            outbox: VecDeque::new(),
            completions: VecDeque::new(),
            events: Vec::new(),
            empty_since: None,
            pool_empty: false,
            nonce: 0,
        }
    }

    pub fn config(&self) -> &DispatchConfig {
        &self.config
    }

    pub fn worker_ids(&self) -> Vec<String> {
        self.workers.keys().cloned().collect()
    }

    pub fn capabilities(&self, worker: &str) -> Option<&Map<String, Value>> {
        self.workers.get(worker).map(|w| &w.capabilities)
    }

    pub fn is_suspect(&self, worker: &str) -> bool {
        self.workers.get(worker).is_some_and(|w| w.suspect_until.is_some())
    }

    /// Jobs submitted and not yet resolved.
    pub fn outstanding(&self) -> usize {
        self.jobs.len()
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn pool_empty(&self) -> bool {
        self.pool_empty
    }

    fn emit(&mut self, e: DispatchEvent) {
        match &e {
            DispatchEvent::Assigned { .. } | DispatchEvent::Resolved { .. } => debug!("{e:?}"),
            DispatchEvent::Registered { .. } => info!("{e:?}"),
            _ => warn!("{e:?}"),
        }
        self.events.push(e);
    }

    pub fn register(&mut self, worker: &str, capabilities: Map<String, Value>, now: Duration) {
        if self.workers.contains_key(worker) {
            self.drop_worker(worker, "re-registered", now);
        }
        self.workers.insert(
            worker.to_string(),
            Worker {
                capabilities,
                current: None,
                suspect_until: None,
                ping: None,
                next_probe: now + self.config.probe_interval,
                idle_since: now,
            },
        );
        self.empty_since = None;
        self.pool_empty = false;
        self.emit(DispatchEvent::Registered { worker: worker.to_string() });
        self.assign_queued(now);
    }

    /// The worker's connection is gone.
    pub fn disconnect(&mut self, worker: &str, now: Duration) {
        self.drop_worker(worker, "connection closed", now);
        self.assign_queued(now);
    }

    pub fn submit(&mut self, job_id: &str, arch: Architecture, now: Duration) -> Result<(), DispatchError> {
        if self.workers.is_empty() {
            return Err(DispatchError::NoWorkers);
        }
        if self.jobs.contains_key(job_id) || self.resolved.contains(job_id) {
            return Err(DispatchError::DuplicateJob(job_id.to_string()));
        }
        self.jobs.insert(
            job_id.to_string(),
            Job { arch, state: JobState::Queued, failures: 0, tried: BTreeSet::new(), last_failed_on: None },
        );
        self.queue.push_back(job_id.to_string());
        self.assign_queued(now);
        Ok(())
    }

    pub fn handle(&mut self, worker: &str, msg: WorkerMessage, now: Duration) {
        match msg {
            WorkerMessage::Hello { worker_id, capabilities } => self.register(&worker_id, capabilities, now),
            WorkerMessage::Pong { nonce } => {
                if let Some(w) = self.workers.get_mut(worker) {
                    if w.ping.as_ref().is_some_and(|(n, _)| *n == nonce) {
                        w.ping = None;
                        w.next_probe = now + self.config.probe_interval;
                    }
                }
            }
            WorkerMessage::Result(r) => self.handle_result(worker, r, now),
        }
        self.assign_queued(now);
    }

    /// Feeds one raw line from `worker`. Malformed lines and unknown message
    /// types are logged and ignored.
    pub fn handle_line(&mut self, worker: &str, line: &str, now: Duration) {
        match decode_worker(line) {
            Ok(Decoded::Known(m)) => self.handle(worker, m, now),
            Ok(Decoded::Unknown { kind }) => {
                self.emit(DispatchEvent::UnknownMessage { worker: worker.to_string(), kind })
            }
            Err(e) => warn!("ignoring line from {worker}: {e}"),
        }
    }

    fn handle_result(&mut self, worker: &str, r: ResultMessage, now: Duration) {
        let job_id = r.job_id.clone();
        if let Some(w) = self.workers.get_mut(worker) {
            // Suspicion lifts only when the job the worker was stuck on
            // comes back; stale results for older jobs prove nothing.
            if w.current.as_deref() == Some(job_id.as_str()) {
                w.current = None;
                w.idle_since = now;
                w.suspect_until = None;
            }
        }
        if self.resolved.contains(&job_id) {
            self.emit(DispatchEvent::DuplicateResult { job: job_id, worker: worker.to_string() });
            return;
        }
        let Some(job) = self.jobs.get(&job_id) else {
            self.emit(DispatchEvent::UnknownJob { job: job_id, worker: worker.to_string() });
            return;
        };
        let running_here = matches!(&job.state, JobState::Running { worker: w, .. } if w == worker);
        let failures = job.failures;
        let engine_count = count_params(&job.arch, &self.shape);
        let failure = match r.status {
            ResultStatus::Error => r.error_message.clone().unwrap_or_else(|| "worker reported an error".into()),
            ResultStatus::Ok => match (r.accuracy_pct, r.robustness_pct) {
                (Some(acc), Some(rob)) => match engine_count {
                    Ok(count) => match EvalScores::new(acc, rob, count.total) {
                        Ok(scores) => {
                            if let Some(reported) = r.param_count.filter(|&p| p != count.total) {
                                self.emit(DispatchEvent::ParamMismatch {
                                    job: job_id.clone(),
                                    worker: worker.to_string(),
                                    engine: count.total,
                                    reported,
                                });
                            }
                            self.resolve(&job_id, Ok(scores), EvalSource::Worker(worker.to_string()), failures);
                            return;
                        }
                        Err(e) => self.invalid(&job_id, worker, e.to_string()),
                    },
                    Err(e) => self.invalid(&job_id, worker, e.to_string()),
                },
                _ => self.invalid(&job_id, worker, "ok result without both percentages".into()),
            },
        };
        if running_here {
            self.fail_attempt(&job_id, worker, failure);
        } else {
            self.emit(DispatchEvent::StaleError { job: job_id, worker: worker.to_string() });
        }
    }

    fn invalid(&mut self, job: &str, worker: &str, reason: String) -> String {
        self.emit(DispatchEvent::InvalidResult { job: job.to_string(), worker: worker.to_string(), reason: reason.clone() });
        reason
    }

    fn resolve(&mut self, job_id: &str, result: Result<EvalScores, String>, source: EvalSource, failures: u32) {
        if self.jobs.remove(job_id).is_none() {
            return;
        }
        self.queue.retain(|j| j != job_id);
        self.resolved.insert(job_id.to_string());
        self.emit(DispatchEvent::Resolved { job: job_id.to_string(), ok: result.is_ok() });
        self.completions.push_back(JobOutcome { job_id: job_id.to_string(), result, source, failures });
    }

    /// Counts a failed attempt; retries at the head of the queue or resolves
    /// the job as failed once the retry cap is exceeded.
    fn fail_attempt(&mut self, job_id: &str, worker: &str, reason: String) {
        let Some(job) = self.jobs.get_mut(job_id) else { return };
        job.failures += 1;
        job.tried.insert(worker.to_string());
        job.last_failed_on = Some(worker.to_string());
        job.state = JobState::Queued;
        let failures = job.failures;
        if failures > self.config.retry_cap {
            self.resolve(job_id, Err(reason), EvalSource::Failed, failures);
        } else {
            self.queue.push_front(job_id.to_string());
            self.emit(DispatchEvent::Requeued { job: job_id.to_string(), failures });
        }
    }

    fn drop_worker(&mut self, worker: &str, reason: &str, _now: Duration) {
        let Some(w) = self.workers.remove(worker) else { return };
        self.emit(DispatchEvent::Deregistered { worker: worker.to_string(), reason: reason.to_string() });
        if let Some(job_id) = w.current {
            let running_here =
                matches!(self.jobs.get(&job_id).map(|j| &j.state), Some(JobState::Running { worker: r, .. }) if r == worker);
            if running_here {
                self.fail_attempt(&job_id, worker, format!("worker {worker} lost: {reason}"));
            }
        }
    }

    fn assign_queued(&mut self, now: Duration) {
        while let Some(job_id) = self.queue.front().cloned() {
            let Some(job) = self.jobs.get(&job_id) else {
                self.queue.pop_front();
                continue;
            };
            let mut idle: Vec<(&String, &Worker)> = self.workers.iter().filter(|(_, w)| w.available()).collect();
            if idle.is_empty() {
                break;
            }
            idle.sort_by_key(|(id, w)| (w.idle_since, (*id).clone()));
            let pick = idle
                .iter()
                .find(|(id, _)| !job.tried.contains(*id))
                .or_else(|| idle.iter().find(|(id, _)| job.last_failed_on.as_ref() != Some(*id)))
                .unwrap_or(&idle[0])
                .0
                .clone();
            self.queue.pop_front();
            let deadline = now + self.config.job_timeout;
            let job = self.jobs.get_mut(&job_id).expect("queued job exists");
            job.state = JobState::Running { worker: pick.clone(), deadline };
            let msg = EngineMessage::Eval { job_id: job_id.clone(), arch: job.arch.clone(), eval_config: self.eval_config.clone() };
            self.workers.get_mut(&pick).expect("picked worker").current = Some(job_id.clone());
            self.outbox.push_back((pick.clone(), msg));
            self.emit(DispatchEvent::Assigned { job: job_id, worker: pick });
        }
    }

    /// Advances timers: job timeouts, liveness probes, pool-empty detection.
    pub fn tick(&mut self, now: Duration) {
        let timed_out: Vec<(String, String)> = self
            .jobs
            .iter()
            .filter_map(|(id, j)| match &j.state {
                JobState::Running { worker, deadline } if now >= *deadline => Some((id.clone(), worker.clone())),
                _ => None,
            })
            .collect();
        for (job, worker) in timed_out {
            if let Some(w) = self.workers.get_mut(&worker) {
                w.suspect_until = Some(now + self.config.job_timeout);
            }
            self.emit(DispatchEvent::TimedOut { job: job.clone(), worker: worker.clone() });
            self.fail_attempt(&job, &worker, format!("timed out on {worker}"));
        }

        let mut dead = Vec::new();
        let mut pings = Vec::new();
        for (id, w) in self.workers.iter_mut() {
            if w.suspect_until.is_some_and(|t| now >= t) {
                dead.push((id.clone(), "unresponsive after job timeout"));
            } else if let Some((_, deadline)) = &w.ping {
                if now >= *deadline {
                    dead.push((id.clone(), "missed liveness probe"));
                }
            } else if now >= w.next_probe {
                self.nonce += 1;
                let nonce = format!("p{}", self.nonce);
                w.ping = Some((nonce.clone(), now + self.config.probe_timeout));
                pings.push((id.clone(), EngineMessage::Ping { nonce }));
            }
        }
        self.outbox.extend(pings);
        for (id, reason) in dead {
            self.drop_worker(&id, reason, now);
        }

        if self.workers.is_empty() && !self.jobs.is_empty() {
            let since = *self.empty_since.get_or_insert(now);
            if !self.pool_empty && now.saturating_sub(since) >= self.config.pool_empty_grace {
                self.pool_empty = true;
                self.emit(DispatchEvent::PoolEmpty);
            }
        } else {
            self.empty_since = None;
        }
        self.assign_queued(now);
    }

    /// Earliest instant at which `tick` has something to do.
    pub fn next_deadline(&self) -> Option<Duration> {
        let jobs = self.jobs.values().filter_map(|j| match j.state {
            JobState::Running { deadline, .. } => Some(deadline),
            JobState::Queued => None,
        });
        let workers = self.workers.values().map(|w| {
            let probe = w.ping.as_ref().map(|(_, d)| *d).unwrap_or(w.next_probe);
            w.suspect_until.map_or(probe, |s| s.min(probe))
        });
        let empty = self.empty_since.map(|s| s + self.config.pool_empty_grace);
        jobs.chain(workers).chain(empty).min()
    }

    pub fn poll_outgoing(&mut self) -> Option<(String, EngineMessage)> {
        self.outbox.pop_front()
    }

    pub fn poll_completion(&mut self) -> Option<JobOutcome> {
        self.completions.pop_front()
    }

    pub fn drain_events(&mut self) -> Vec<DispatchEvent> {
        std::mem::take(&mut self.events)
    }
}

/// Moves messages between a dispatcher and its workers.
pub trait Link {
    fn now(&self) -> Duration;
    /// Delivers queued outgoing messages, then feeds incoming traffic and
    /// timer ticks into the dispatcher. May block briefly.
    fn pump(&mut self, dispatcher: &mut Dispatcher) -> Result<(), EvalError>;
}

struct PoolInner<L> {
    dispatcher: Dispatcher,
    link: L,
    stash: HashMap<String, JobOutcome>,
    next_sync: u64,
}

/// Evaluator backed by a worker pool.
pub struct PoolEvaluator<L> {
    inner: Mutex<PoolInner<L>>,
}

fn ticket_job(ticket: u64) -> String {
    format!("job-{ticket}")
}

fn outcome_result(o: &JobOutcome) -> Result<EvalScores, EvalError> {
    o.result.clone().map_err(EvalError::Failed)
}

impl<L: Link> PoolEvaluator<L> {
    pub fn new(dispatcher: Dispatcher, link: L) -> Self {
        PoolEvaluator { inner: Mutex::new(PoolInner { dispatcher, link, stash: HashMap::new(), next_sync: 0 }) }
    }

    /// Runs `f` with the dispatcher and link locked.
    pub fn with<T>(&self, f: impl FnOnce(&mut Dispatcher, &mut L) -> T) -> T {
        let mut g = self.inner.lock().expect("pool lock");
        let inner = &mut *g;
        f(&mut inner.dispatcher, &mut inner.link)
    }

    pub fn into_parts(self) -> (Dispatcher, L) {
        let inner = self.inner.into_inner().expect("pool lock");
        (inner.dispatcher, inner.link)
    }

    fn submit_job(inner: &mut PoolInner<L>, job_id: &str, arch: &Architecture) -> Result<(), EvalError> {
        let now = inner.link.now();
        inner.dispatcher.submit(job_id, arch.clone(), now).map_err(|e| match e {
            DispatchError::NoWorkers => EvalError::PoolEmpty,
            DispatchError::DuplicateJob(j) => EvalError::Failed(format!("duplicate job id {j}")),
        })?;
        inner.link.pump(&mut inner.dispatcher)
    }

    fn next_outcome(inner: &mut PoolInner<L>) -> Result<JobOutcome, EvalError> {
        loop {
            if let Some(o) = inner.dispatcher.poll_completion() {
                return Ok(o);
            }
            if inner.dispatcher.pool_empty() {
                return Err(EvalError::PoolEmpty);
            }
            inner.link.pump(&mut inner.dispatcher)?;
        }
    }
}

impl<L: Link> Evaluator for PoolEvaluator<L> {
    fn evaluate(&self, arch: &Architecture) -> Result<EvalScores, EvalError> {
        self.evaluate_with_source(arch).map(|(s, _)| s)
    }

    fn source(&self) -> EvalSource {
        EvalSource::Worker("pool".into())
    }

    fn evaluate_with_source(&self, arch: &Architecture) -> Result<(EvalScores, EvalSource), EvalError> {
        let mut g = self.inner.lock().expect("pool lock");
        let inner = &mut *g;
        inner.next_sync += 1;
        let job_id = format!("sync-{}", inner.next_sync);
        Self::submit_job(inner, &job_id, arch)?;
        loop {
            let o = match inner.stash.remove(&job_id) {
                Some(o) => o,
                None => Self::next_outcome(inner)?,
            };
            if o.job_id == job_id {
                return outcome_result(&o).map(|s| (s, o.source));
            }
            inner.stash.insert(o.job_id.clone(), o);
        }
    }
}

impl<L: Link> ConcurrentEvaluator for PoolEvaluator<L> {
    fn submit(&self, ticket: u64, arch: &Architecture) -> Result<(), EvalError> {
        let mut g = self.inner.lock().expect("pool lock");
        Self::submit_job(&mut g, &ticket_job(ticket), arch)
    }

    fn wait_any(&self) -> Result<Completion, EvalError> {
        let mut g = self.inner.lock().expect("pool lock");
        let inner = &mut *g;
        let stashed = inner.stash.keys().find(|k| k.starts_with("job-")).cloned();
        let o = match stashed.and_then(|k| inner.stash.remove(&k)) {
            Some(o) => o,
            None => loop {
                let o = Self::next_outcome(inner)?;
                if o.job_id.starts_with("job-") {
                    break o;
                }
                inner.stash.insert(o.job_id.clone(), o);
            },
        };
        let ticket = o.job_id["job-".len()..]
            .parse()
            .map_err(|_| EvalError::Failed(format!("unexpected job id {}", o.job_id)))?;
        Ok(Completion { ticket, outcome: outcome_result(&o), source: o.source })
    }
}

enum ConnEvent {
    Opened(u64, TcpStream),
    Line(u64, String),
    Closed(u64),
}

/// Line-delimited JSON over TCP. Each connection must open with `hello`.
pub struct TcpLink {
    start: Instant,
    events_tx: Sender<ConnEvent>,
    events_rx: Receiver<ConnEvent>,
    /// Connection id to (worker id once known, writer).
    conns: HashMap<u64, (Option<String>, TcpStream)>,
    by_worker: HashMap<String, u64>,
    next_conn: u64,
    max_wait: Duration,
    local_addr: Option<SocketAddr>,
}

fn spawn_reader(id: u64, stream: TcpStream, tx: Sender<ConnEvent>) -> std::io::Result<()> {
    let writer = stream.try_clone()?;
    let _ = tx.send(ConnEvent::Opened(id, writer));
    thread::spawn(move || {
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => {
                    if tx.send(ConnEvent::Line(id, l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(ConnEvent::Closed(id));
    });
    Ok(())
}

impl TcpLink {
    fn empty() -> Self {
        let (events_tx, events_rx) = mpsc::channel();
        TcpLink {
            start: Instant::now(),
            events_tx,
            events_rx,
            conns: HashMap::new(),
            by_worker: HashMap::new(),
            next_conn: 0,
            max_wait: Duration::from_millis(200),
            local_addr: None,
        }
    }

    /// Accepts worker connections on `addr` in a background thread.
    pub fn listen(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let mut link = Self::empty();
        link.local_addr = Some(listener.local_addr()?);
        let tx = link.events_tx.clone();
        thread::spawn(move || {
            // connection ids from the listener count down to stay clear of dialed ones
            let mut id = u64::MAX;
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                if spawn_reader(id, stream, tx.clone()).is_err() {
                    continue;
                }
                id -= 1;
            }
        });
        Ok(link)
    }

    /// Connects out to workers that are listening. The worker still speaks
    /// first with `hello`.
    pub fn dial(&mut self, endpoints: &[String]) -> std::io::Result<()> {
        for ep in endpoints {
            let stream = TcpStream::connect(ep.as_str())?;
            spawn_reader(self.next_conn, stream, self.events_tx.clone())?;
            self.next_conn += 1;
        }
        Ok(())
    }

    pub fn dial_only(endpoints: &[String]) -> std::io::Result<Self> {
        let mut link = Self::empty();
        link.dial(endpoints)?;
        Ok(link)
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.local_addr
    }

    /// Blocks until at least `count` workers have said hello or `timeout`
    /// passes; returns the number registered.
    pub fn wait_for_workers(&mut self, d: &mut Dispatcher, count: usize, timeout: Duration) -> usize {
        let until = self.now() + timeout;
        while d.worker_ids().len() < count && self.now() < until {
            let _ = self.pump(d);
        }
        d.worker_ids().len()
    }

    fn apply(&mut self, d: &mut Dispatcher, ev: ConnEvent) {
        let now = self.now();
        match ev {
            ConnEvent::Opened(id, w) => {
                self.conns.insert(id, (None, w));
            }
            ConnEvent::Line(id, line) => {
                let known = self.conns.get(&id).and_then(|(w, _)| w.clone());
                match known {
                    Some(worker) => d.handle_line(&worker, &line, now),
                    None => match decode_worker(&line) {
                        Ok(Decoded::Known(WorkerMessage::Hello { worker_id, capabilities })) => {
                            if let Some(old) = self.by_worker.insert(worker_id.clone(), id) {
                                if old != id {
                                    self.close(old);
                                }
                            }
                            if let Some(c) = self.conns.get_mut(&id) {
                                c.0 = Some(worker_id.clone());
                            }
                            d.register(&worker_id, capabilities, now);
                        }
                        _ => warn!("connection {id}: expected hello, got {line:?}"),
                    },
                }
            }
            ConnEvent::Closed(id) => {
                if let Some((Some(worker), _)) = self.conns.remove(&id) {
                    if self.by_worker.get(&worker) == Some(&id) {
                        self.by_worker.remove(&worker);
                        d.disconnect(&worker, now);
                    }
                }
            }
        }
    }

    fn close(&mut self, id: u64) {
        if let Some((_, s)) = self.conns.remove(&id) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }

    fn flush(&mut self, d: &mut Dispatcher) {
        let now = self.now();
        while let Some((worker, msg)) = d.poll_outgoing() {
            let line = encode(&msg) + "\n";
            let sent = self
                .by_worker
                .get(&worker)
                .and_then(|id| self.conns.get_mut(id))
                .is_some_and(|(_, s)| s.write_all(line.as_bytes()).and_then(|_| s.flush()).is_ok());
            if !sent {
                if let Some(id) = self.by_worker.remove(&worker) {
                    self.close(id);
                }
                d.disconnect(&worker, now);
            }
        }
    }
}

impl Link for TcpLink {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn pump(&mut self, d: &mut Dispatcher) -> Result<(), EvalError> {
        self.flush(d);
        let wait = d
            .next_deadline()
            .map(|t| t.saturating_sub(self.now()))
            .unwrap_or(self.max_wait)
            .min(self.max_wait);
        match self.events_rx.recv_timeout(wait) {
            Ok(ev) => {
                self.apply(d, ev);
                while let Ok(ev) = self.events_rx.try_recv() {
                    self.apply(d, ev);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return Err(EvalError::PoolEmpty),
        }
        d.tick(self.now());
        self.flush(d);
        Ok(())
    }
}

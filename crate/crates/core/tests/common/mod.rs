//! Shared helpers for integration and acceptance tests.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robnas_core::arch::{count_params, Architecture, LayerType, ModelShapeConfig};
use robnas_core::dispatch::{
    decode_engine, encode, Decoded, DispatchConfig, DispatchEvent, Dispatcher, EngineMessage, Link, PoolEvaluator,
    ResultMessage, WorkerMessage,
};
use robnas_core::fitness::{surrogate_eval, EvalError, ScoredIndividual, SurrogateConfig};
use robnas_core::space::SearchSpaceDef;
use robnas_core::InputMode;

/// n = 4 with two layer choices, two widths, one merge mode and one
/// activation, edge counts in [2, 5]. Small enough to enumerate.
pub fn restricted_space() -> SearchSpaceDef {
    let mut s = SearchSpaceDef::with_nodes(4);
    s.repeats = vec![3, 4];
    s.hidden_widths = vec![128, 256];
    s.layer_types = vec![LayerType::Conv, LayerType::Glu];
    s.conv_params = vec![3];
    s.output_widths = vec![128, 256];
    s.input_modes = vec![InputMode::Add];
    s.activations = vec![robnas_core::Activation::Relu];
    s.edge_min = Some(2);
    s.edge_max = Some(5);
    s
}

/// Two-pass population mean and standard deviation.
pub fn two_pass(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    let scale = a.abs().max(b.abs()).max(1e-300);
    (a - b).abs() <= tol * scale || (a - b).abs() <= 1e-12
}

/// Checks that `trace` never decreases; returns the number of violations.
pub fn monotone_violations(trace: &[f64]) -> usize {
    trace.windows(2).filter(|w| w[1] < w[0]).count()
}

pub fn history_is_partitioned(history: &[ScoredIndividual]) -> bool {
    let ids: BTreeSet<u64> = history.iter().map(|r| r.id).collect();
    ids.len() == history.len()
}

#[derive(Debug, Clone, Copy)]
pub struct FaultPlan {
    /// Worker connection drops mid-job.
    pub kill: f64,
    /// Worker goes silent: no result, no pongs.
    pub vanish: f64,
    /// Worker keeps answering pings but never returns this job.
    pub hang: f64,
    /// Result sent twice.
    pub duplicate: f64,
    /// Result arrives after the job timeout.
    pub late: f64,
    /// Error status instead of scores.
    pub error: f64,
    /// Reports a wrong parameter count.
    pub miscount: f64,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan { kill: 0.0, vanish: 0.0, hang: 0.0, duplicate: 0.0, late: 0.0, error: 0.0, miscount: 0.0 }
    }

    pub fn heavy() -> Self {
        FaultPlan { kill: 0.06, vanish: 0.03, hang: 0.04, duplicate: 0.12, late: 0.06, error: 0.10, miscount: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultCounts {
    pub kill: u64,
    pub vanish: u64,
    pub hang: u64,
    pub duplicate: u64,
    pub late: u64,
    pub error: u64,
    pub miscount: u64,
}

impl FaultCounts {
    pub fn total(&self) -> u64 {
        self.kill + self.vanish + self.hang + self.duplicate + self.late + self.error + self.miscount
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Delivery {
    Line(String, String),
    Disconnect(String),
    Spawn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimState {
    Alive,
    /// Answers pings but ignores further eval requests.
    Hung,
    Dead,
}

/// Scripted stub workers on a fake clock. Workers score with the surrogate
/// and talk to the dispatcher through the real wire encoding.
pub struct SimCluster {
    now: Duration,
    seq: u64,
    queue: BinaryHeap<Reverse<(Duration, u64, Delivery)>>,
    workers: BTreeMap<String, SimState>,
    next_worker: u64,
    pub target_workers: usize,
    rng: ChaCha8Rng,
    pub plan: FaultPlan,
    pub faults: FaultCounts,
    pub surrogate: SurrogateConfig,
    pub shape: ModelShapeConfig,
    pub events: Vec<DispatchEvent>,
    /// Stop replacing workers once this many have been spawned.
    pub spawn_limit: u64,
    pub evals_sent: u64,
    pub pumps: u64,
}

impl SimCluster {
    pub fn new(workers: usize, plan: FaultPlan, seed: u64) -> Self {
        SimCluster {
            now: Duration::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            workers: BTreeMap::new(),
            next_worker: 0,
            target_workers: workers,
            rng: ChaCha8Rng::seed_from_u64(seed),
            plan,
            faults: FaultCounts::default(),
            surrogate: SurrogateConfig::default(),
            shape: ModelShapeConfig::default(),
            events: Vec::new(),
            spawn_limit: u64::MAX,
            evals_sent: 0,
            pumps: 0,
        }
    }

    fn schedule(&mut self, after: Duration, d: Delivery) {
        self.seq += 1;
        self.queue.push(Reverse((self.now + after, self.seq, d)));
    }

    fn send(&mut self, after: Duration, worker: &str, msg: &WorkerMessage) {
        self.schedule(after, Delivery::Line(worker.to_string(), encode(msg)));
    }

    /// Registers the initial workers.
    pub fn start(&mut self, d: &mut Dispatcher) {
        for _ in 0..self.target_workers {
            self.spawn(d);
        }
    }

    fn spawn(&mut self, d: &mut Dispatcher) {
        if self.next_worker >= self.spawn_limit {
            return;
        }
        let id = format!("w{}", self.next_worker);
        self.next_worker += 1;
        self.workers.insert(id.clone(), SimState::Alive);
        let hello = WorkerMessage::Hello { worker_id: id.clone(), capabilities: Default::default() };
        d.handle_line(&id, &encode(&hello), self.now);
    }

    fn secs(&mut self, lo: f64, hi: f64) -> Duration {
        Duration::from_secs_f64(self.rng.gen_range(lo..hi))
    }

    fn on_message(&mut self, worker: String, msg: EngineMessage, cfg: &DispatchConfig) {
        let state = self.workers.get(&worker).copied().unwrap_or(SimState::Dead);
        match msg {
            EngineMessage::Ping { nonce } => {
                if state != SimState::Dead {
                    let after = self.secs(0.01, 0.2);
                    self.send(after, &worker, &WorkerMessage::Pong { nonce });
                }
            }
            EngineMessage::Eval { job_id, arch, .. } => {
                if state != SimState::Alive {
                    return;
                }
                self.evals_sent += 1;
                let p = self.plan;
                let roll: f64 = self.rng.gen();
                let mut acc = 0.0;
                let mut hit = |x: f64| {
                    acc += x;
                    roll < acc
                };
                if hit(p.kill) {
                    self.faults.kill += 1;
                    self.workers.insert(worker.clone(), SimState::Dead);
                    let after = self.secs(0.1, 2.0);
                    self.schedule(after, Delivery::Disconnect(worker));
                    let after = self.secs(0.5, 3.0);
                    self.schedule(after, Delivery::Spawn);
                } else if hit(p.vanish) {
                    self.faults.vanish += 1;
                    self.workers.insert(worker, SimState::Dead);
                } else if hit(p.hang) {
                    self.faults.hang += 1;
                    self.workers.insert(worker, SimState::Hung);
                } else if hit(p.error) {
                    self.faults.error += 1;
                    let after = self.secs(0.1, 1.0);
                    self.send(after, &worker, &WorkerMessage::Result(ResultMessage::error(job_id, "injected failure")));
                } else {
                    let scores = surrogate_eval(&arch, &self.surrogate, &self.shape).expect("surrogate scores");
                    let mut count = count_params(&arch, &self.shape).expect("countable").total;
                    let miscount = hit(p.miscount);
                    if miscount {
                        self.faults.miscount += 1;
                        count += 1;
                    }
                    let msg = WorkerMessage::Result(ResultMessage::ok(
                        job_id,
                        scores.accuracy_pct,
                        scores.robustness_pct,
                        Some(count),
                    ));
                    if !miscount && hit(p.duplicate) {
                        self.faults.duplicate += 1;
                        let a = self.secs(0.2, 2.0);
                        let b = self.secs(2.0, 12.0);
                        self.send(a, &worker, &msg);
                        self.send(b, &worker, &msg);
                    } else if !miscount && hit(p.late) {
                        self.faults.late += 1;
                        let after = cfg.job_timeout + self.secs(0.5, 3.0);
                        self.send(after, &worker, &msg);
                    } else {
                        let after = self.secs(0.2, 3.0);
                        self.send(after, &worker, &msg);
                    }
                }
            }
        }
    }

    /// Workers the dispatcher dropped on its own are restarted under a new
    /// id, keeping the pool near its target size.
    fn replace_dropped(&mut self, d: &mut Dispatcher) {
        let registered: BTreeSet<String> = d.worker_ids().into_iter().collect();
        let gone: Vec<String> =
            self.workers.keys().filter(|w| !registered.contains(*w)).cloned().collect();
        for w in gone {
            if self.workers.remove(&w).is_some_and(|s| s != SimState::Dead) || self.workers.len() < self.target_workers {
                let after = self.secs(0.5, 2.0);
                self.schedule(after, Delivery::Spawn);
            }
        }
    }

    fn deliver(&mut self, d: &mut Dispatcher, what: Delivery) {
        match what {
            Delivery::Line(worker, line) => {
                if self.workers.get(&worker).is_some_and(|s| *s != SimState::Dead) {
                    d.handle_line(&worker, &line, self.now);
                }
            }
            Delivery::Disconnect(worker) => d.disconnect(&worker, self.now),
            Delivery::Spawn => {
                let live = self.workers.values().filter(|s| **s != SimState::Dead).count();
                if live < self.target_workers {
                    self.spawn(d);
                }
            }
        }
    }
}

impl Link for SimCluster {
    fn now(&self) -> Duration {
        self.now
    }

    fn pump(&mut self, d: &mut Dispatcher) -> Result<(), EvalError> {
        self.pumps += 1;
        assert!(
            self.pumps < 2_000_000,
            "simulation stalled at {:?}: workers {:?}, registered {:?}, outstanding {}, queued {}",
            self.now,
            self.workers,
            d.worker_ids(),
            d.outstanding(),
            d.queued()
        );
        let cfg = d.config().clone();
        while let Some((worker, msg)) = d.poll_outgoing() {
            let line = encode(&msg);
            match decode_engine(&line).expect("engine messages decode") {
                Decoded::Known(m) => self.on_message(worker, m, &cfg),
                Decoded::Unknown { kind } => panic!("engine sent unknown message type {kind}"),
            }
        }
        let next_event = self.queue.peek().map(|Reverse((t, _, _))| *t);
        let next = match (next_event, d.next_deadline()) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => self.now + Duration::from_secs(1),
        };
        self.now = self.now.max(next);
        while let Some(Reverse((t, _, _))) = self.queue.peek() {
            if *t > self.now {
                break;
            }
            let Reverse((_, _, what)) = self.queue.pop().expect("peeked");
            self.deliver(d, what);
        }
        d.tick(self.now);
        self.replace_dropped(d);
        self.events.extend(d.drain_events());
        Ok(())
    }
}

pub fn sim_pool(workers: usize, plan: FaultPlan, seed: u64) -> PoolEvaluator<SimCluster> {
    let mut d = Dispatcher::new(DispatchConfig::for_tests(), ModelShapeConfig::default(), serde_json::Value::Null);
    let mut sim = SimCluster::new(workers, plan, seed);
    sim.start(&mut d);
    PoolEvaluator::new(d, sim)
}

/// Per-job resolution counts from the dispatcher event log.
pub fn resolutions(events: &[DispatchEvent]) -> HashMap<String, u32> {
    let mut out = HashMap::new();
    for e in events {
        if let DispatchEvent::Resolved { job, .. } = e {
            *out.entry(job.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// Jobs that were assigned at least once.
pub fn assigned_jobs(events: &[DispatchEvent]) -> BTreeSet<String> {
    events
        .iter()
        .filter_map(|e| match e {
            DispatchEvent::Assigned { job, .. } => Some(job.clone()),
            _ => None,
        })
        .collect()
}

/// Every architecture in the restricted space.
pub fn restricted_members() -> Vec<Architecture> {
    robnas_core::space::enumerate_restricted(&restricted_space(), 10_000).expect("enumerable").collect()
}

#[derive(Debug, serde::Deserialize)]
pub struct ParamFixture {
    pub name: String,
    pub shape: ModelShapeConfig,
    pub arch: Architecture,
    pub embedding: u64,
    pub per_block: u64,
    pub blocks: u64,
    pub classifier: u64,
    pub total: u64,
}

/// Counts produced by building each fixture in a reference deep-learning
/// framework and summing its parameter tensors.
pub fn param_fixtures() -> Vec<ParamFixture> {
    let text = include_str!("../fixtures/param_oracle.json");
    serde_json::from_str(text).expect("fixture table parses")
}

pub struct FaultRun {
    pub faults: FaultCounts,
    pub history: Vec<ScoredIndividual>,
    pub events: Vec<DispatchEvent>,
    pub best_trace: Vec<f64>,
    pub stop: robnas_core::engine::StopReason,
}

impl FaultRun {
    /// Every assigned job resolved exactly once, and every resolution
    /// belongs to an assigned job.
    pub fn exactly_once(&self) -> Result<(), String> {
        let res = resolutions(&self.events);
        let assigned = assigned_jobs(&self.events);
        if let Some((job, n)) = res.iter().find(|(_, n)| **n != 1) {
            return Err(format!("job {job} resolved {n} times"));
        }
        if let Some(job) = assigned.iter().find(|j| !res.contains_key(*j)) {
            return Err(format!("job {job} never resolved"));
        }
        if let Some(job) = res.keys().find(|j| !assigned.contains(*j)) {
            return Err(format!("job {job} resolved without being assigned"));
        }
        if !history_is_partitioned(&self.history) {
            return Err("history ids repeat".into());
        }
        Ok(())
    }
}

/// A concurrent search over the default space scored by simulated workers
/// with faults injected per `plan`. `evaluations` counts history records.
pub fn fault_search(seed: u64, plan: FaultPlan, workers: usize, evaluations: u64) -> FaultRun {
    use robnas_core::engine::{Engine, EngineConfig};
    let population = 20;
    let cfg = EngineConfig {
        population,
        budget: evaluations - population as u64,
        patience: u64::MAX,
        seed,
        in_flight: workers,
        ..Default::default()
    };
    let pool = sim_pool(workers, plan, seed);
    let mut engine = Engine::init(SearchSpaceDef::default(), cfg, pool).expect("init");
    let result = engine.run_concurrent().expect("search completes");
    let (faults, events) = engine.evaluator().with(|d, sim| {
        let mut ev = std::mem::take(&mut sim.events);
        ev.extend(d.drain_events());
        (sim.faults, ev)
    });
    FaultRun { faults, history: result.history, events, best_trace: result.best_trace, stop: result.stop }
}

/// Checks row statistics against an independent two-pass recomputation and
/// that each property's counts sum to the number of scored records.
pub fn check_stats(history: &[ScoredIndividual]) -> Result<(), String> {
    use robnas_core::analysis::{group_stats, Property};
    let scored: Vec<&ScoredIndividual> = history.iter().filter(|h| h.scores.is_some()).collect();
    for p in Property::all() {
        let rows = group_stats(history, p).map_err(|e| e.to_string())?;
        let total: u64 = rows.iter().map(|r| r.count).sum();
        if total != scored.len() as u64 {
            return Err(format!("{p}: counts sum to {total}, history has {}", scored.len()));
        }
        for r in &rows {
            let members: Vec<&&ScoredIndividual> = scored.iter().filter(|h| p.of(&h.arch) == r.key).collect();
            let acc: Vec<f64> = members.iter().map(|h| h.scores.unwrap().accuracy_pct).collect();
            let rob: Vec<f64> = members.iter().map(|h| h.scores.unwrap().robustness_pct).collect();
            let (am, asd) = two_pass(&acc);
            let (rm, rsd) = two_pass(&rob);
            let pairs = [(r.acc_mean, am), (r.acc_std, asd), (r.rob_mean, rm), (r.rob_std, rsd)];
            if members.len() as u64 != r.count || !pairs.iter().all(|&(a, b)| rel_close(a, b, 1e-9)) {
                return Err(format!("{p}={}: {r:?} vs two-pass {pairs:?}", r.key));
            }
        }
    }
    Ok(())
}

//! Steady-state tournament evolution.
//!
//! Each generation samples `tournament_size` members, mutates the fittest,
//! evaluates the offspring, inserts it and removes the least fit member of
//! the same sample. The best individual ever evaluated is tracked separately
//! and only replaced by a strictly fitter one, so the best-so-far fitness is
//! non-decreasing.
//!
//! All randomness for generation `g` comes from a stream derived from
//! `(seed, g)`, so a run resumed from a checkpoint replays exactly the trace
//! an uninterrupted run would have produced.

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, info, warn};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arch::Architecture;
use crate::evolution::{evolve_with, EvolutionError};
use crate::fitness::{
    aggregate, EvalError, EvalScores, EvalSource, Evaluator, FitnessCache, FitnessError, FitnessWeights, Lookup,
    ScoredIndividual,
};
use crate::rng;
use crate::space::{contains, simplest, SearchSpaceDef, SpaceError};

/// Regeneration attempts per initial individual whose evaluation keeps
/// failing.
pub const INIT_REGEN_CAP: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub population: usize,
    pub tournament_size: usize,
    /// Inclusive range of evolution steps applied to the simplest
    /// architecture to seed each initial individual.
    pub init_ops: [u32; 2],
    /// Stop after this many consecutive generations without a new best.
    pub patience: u64,
    /// Offspring evaluations allowed after initialization.
    pub budget: u64,
    pub seed: u64,
    pub weights: FitnessWeights,
    /// Evaluation retries for an initial individual before it is regenerated.
    pub init_eval_retries: u32,
    /// Tournaments allowed in flight at once; 1 is the deterministic
    /// synchronous mode.
    pub in_flight: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            population: 100,
            tournament_size: 2,
            init_ops: [5, 30],
            patience: 50,
            budget: 2_000,
            seed: 0,
            weights: FitnessWeights::default(),
            init_eval_retries: 3,
            in_flight: 1,
        }
    }
}

impl EngineConfig {
    pub fn check(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.tournament_size < 2 {
            return bad(format!("tournament_size must be at least 2 (got {})", self.tournament_size));
        }
        if self.tournament_size > self.population {
            return bad(format!(
                "tournament_size {} exceeds population {}",
                self.tournament_size, self.population
            ));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if self.init_ops[0] > self.init_ops[1] {
            return bad(format!("init_ops range [{}, {}] is empty", self.init_ops[0], self.init_ops[1]));
        }
        if self.in_flight < 1 {
            return bad("in_flight must be at least 1".into());
        }
        let w = &self.weights;
        if !(w.mu1.is_finite() && w.mu2.is_finite() && w.mu3.is_finite()) {
            return bad("fitness weights must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Fitness(#[from] FitnessError),
    #[error("evaluation pool is empty; search paused")]
    PoolEmpty,
    #[error("initial individual {index} could not be evaluated: {last}")]
    InitFailed { index: usize, last: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint was written for a different configuration (checkpoint {found}, current {expected})")]
    ConfigMismatch { expected: String, found: String },
    #[error("history holds {found} records but the checkpoint expects at least {expected}")]
    HistoryTruncated { expected: u64, found: u64 },
}

/// Picks `size` distinct members uniformly; returns `(winner, loser)` IDs.
/// The winner has the highest fitness and the loser the lowest; ties prefer
/// the older (lower-ID) member as winner and the younger as loser.
pub fn tournament<R: Rng + ?Sized>(members: &[ScoredIndividual], size: usize, rng: &mut R) -> (u64, u64) {
    assert!(!members.is_empty(), "tournament on an empty population");
    let size = size.clamp(1, members.len());
    let picks = index::sample(rng, members.len(), size);
    let mut winner: Option<&ScoredIndividual> = None;
    let mut loser: Option<&ScoredIndividual> = None;
    for i in picks.iter() {
        let m = &members[i];
        winner = match winner {
            Some(w) if w.fitness > m.fitness || (w.fitness == m.fitness && w.id < m.id) => Some(w),
            _ => Some(m),
        };
        loser = match loser {
            Some(l) if l.fitness < m.fitness || (l.fitness == m.fitness && l.id > m.id) => Some(l),
            _ => Some(m),
        };
    }
    (winner.expect("sampled").id, loser.expect("sampled").id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: u64,
    pub offspring: ScoredIndividual,
    pub eliminated: u64,
    pub parent: u64,
    pub cache_hit: bool,
    pub improved: bool,
    pub best_fitness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    BudgetExhausted,
    /// `run_for` reached its generation limit first.
    Paused,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::BudgetExhausted => "budget exhausted",
            StopReason::Paused => "paused",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: ScoredIndividual,
    pub history: Vec<ScoredIndividual>,
    pub generations: u64,
    pub stop: StopReason,
    /// Best fitness after initialization and after each generation of this
    /// invocation.
    pub best_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct EngineState {
    generation: u64,
    next_id: u64,
    since_improvement: u64,
    population: Vec<ScoredIndividual>,
    best: ScoredIndividual,
    history: Vec<ScoredIndividual>,
}

/// A concurrent evaluation backend: many submissions, completions in any
/// order.
pub trait ConcurrentEvaluator: Evaluator {
    fn submit(&self, ticket: u64, arch: &Architecture) -> Result<(), EvalError>;
    /// Blocks until some submitted ticket resolves.
    fn wait_any(&self) -> Result<Completion, EvalError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub ticket: u64,
    pub outcome: Result<EvalScores, EvalError>,
    pub source: EvalSource,
}

pub struct Engine<E> {
    space: SearchSpaceDef,
    config: EngineConfig,
    evaluator: E,
    cache: FitnessCache,
    state: EngineState,
}

fn score_into(
    id: u64,
    generation: u64,
    parent: Option<u64>,
    arch: Architecture,
    result: Result<(EvalScores, EvalSource), EvalError>,
    weights: &FitnessWeights,
) -> Result<ScoredIndividual, EngineError> {
    match result {
        Ok((scores, source)) => Ok(ScoredIndividual {
            id,
            birth_generation: generation,
            parent,
            fitness: aggregate(&scores, weights)?,
            arch,
            scores: Some(scores),
            eval_source: source,
        }),
        Err(EvalError::PoolEmpty) => Err(EngineError::PoolEmpty),
        Err(e) => {
            warn!("evaluation of individual {id} failed: {e}");
            Ok(ScoredIndividual {
                id,
                birth_generation: generation,
                parent,
                arch,
                scores: None,
                fitness: f64::NEG_INFINITY,
                eval_source: EvalSource::Failed,
            })
        }
    }
}

fn better(a: &ScoredIndividual, b: &ScoredIndividual) -> bool {
    a.fitness > b.fitness || (a.fitness == b.fitness && a.id < b.id)
}

impl<E: Evaluator> Engine<E> {
    /// Builds the initial population: each member is the simplest
    /// architecture after `K` random evolution steps, `K` uniform in
    /// `config.init_ops`.
    pub fn init(space: SearchSpaceDef, config: EngineConfig, evaluator: E) -> Result<Self, EngineError> {
        config.check()?;
        let space = space.normalized()?;
        let cache = FitnessCache::new();
        let base = simplest(&space);
        let mut population = Vec::with_capacity(config.population);
        for i in 0..config.population {
            let mut member = None;
            let mut last = String::new();
            for regen in 0..INIT_REGEN_CAP {
                let mut r = rng::derive(config.seed, &format!("init/{regen}"), i as u64);
                let k = r.gen_range(config.init_ops[0]..=config.init_ops[1]);
                let mut arch = base.clone();
                for _ in 0..k {
                    arch = evolve_with(&arch, &space, &mut r)?.arch;
                }
                for _ in 0..=config.init_eval_retries {
                    match cache.cached_eval(&arch, &evaluator) {
                        Ok((s, src, _)) => {
                            member = Some(score_into(i as u64, 0, None, arch.clone(), Ok((s, src)), &config.weights)?);
                            break;
                        }
                        Err(EvalError::PoolEmpty) => return Err(EngineError::PoolEmpty),
                        Err(e) => {
                            debug!("initial individual {i}: {e}");
                            last = e.to_string();
                        }
                    }
                }
                if member.is_some() {
                    break;
                }
                warn!("regenerating initial individual {i} after repeated failures: {last}");
            }
            population.push(member.ok_or(EngineError::InitFailed { index: i, last })?);
        }
        let best = population
            .iter()
            .fold(None::<&ScoredIndividual>, |acc, m| match acc {
                Some(b) if !better(m, b) => Some(b),
                _ => Some(m),
            })
            .cloned()
            .ok_or_else(|| EngineError::Config("population must not be empty".into()))?;
        info!("initialized {} individuals; best fitness {:.4}", population.len(), best.fitness);
        let state = EngineState {
            generation: 0,
            next_id: population.len() as u64,
            since_improvement: 0,
            history: population.clone(),
            population,
            best,
        };
        Ok(Engine { space, config, evaluator, cache, state })
    }

    pub fn space(&self) -> &SearchSpaceDef {
        &self.space
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn population(&self) -> &[ScoredIndividual] {
        &self.state.population
    }

    pub fn best(&self) -> &ScoredIndividual {
        &self.state.best
    }

    pub fn history(&self) -> &[ScoredIndividual] {
        &self.state.history
    }

    pub fn generation(&self) -> u64 {
        self.state.generation
    }

    pub fn cache(&self) -> &FitnessCache {
        &self.cache
    }

    pub fn evaluator(&self) -> &E {
        &self.evaluator
    }

    pub fn into_evaluator(self) -> E {
        self.evaluator
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        if self.state.generation >= self.config.budget {
            Some(StopReason::BudgetExhausted)
        } else if self.state.since_improvement >= self.config.patience {
            Some(StopReason::Converged)
        } else {
            None
        }
    }

    fn evaluate_cached(&self, arch: &Architecture) -> (Result<(EvalScores, EvalSource), EvalError>, bool) {
        match self.cache.cached_eval(arch, &self.evaluator) {
            Ok((s, src, lookup)) => (Ok((s, src)), lookup == Lookup::Hit),
            Err(e) => (Err(e), false),
        }
    }

    /// Inserts an evaluated offspring and removes `loser`.
    fn apply(&mut self, offspring: ScoredIndividual, loser: u64) -> (bool, u64) {
        let pop = &mut self.state.population;
        let pos = pop.iter().position(|m| m.id == loser).expect("loser is a member");
        pop.remove(pos);
        pop.push(offspring.clone());
        self.state.history.push(offspring.clone());
        self.state.generation += 1;
        let improved = offspring.fitness > self.state.best.fitness;
        if improved {
            self.state.best = offspring;
            self.state.since_improvement = 0;
        } else {
            self.state.since_improvement += 1;
        }
        (improved, loser)
    }

    /// Runs one generation.
    pub fn step(&mut self) -> Result<GenerationReport, EngineError> {
        let g = self.state.generation + 1;
        let mut r = rng::derive(self.config.seed, "step", g);
        let (winner, loser) = tournament(&self.state.population, self.config.tournament_size, &mut r);
        let parent = self.state.population.iter().find(|m| m.id == winner).expect("winner is a member");
        let evolved = evolve_with(&parent.arch, &self.space, &mut r)?;
        let (result, cache_hit) = self.evaluate_cached(&evolved.arch);
        let id = self.state.next_id;
        let offspring = score_into(id, g, Some(winner), evolved.arch, result, &self.config.weights)?;
        self.state.next_id += 1;
        debug!("generation {g}: {:?} -> id {id} fitness {:.4}", evolved.op, offspring.fitness);
        let (improved, eliminated) = self.apply(offspring.clone(), loser);
        Ok(GenerationReport {
            generation: g,
            offspring,
            eliminated,
            parent: winner,
            cache_hit,
            improved,
            best_fitness: self.state.best.fitness,
        })
    }

    /// Steps until convergence or budget exhaustion.
    pub fn run(&mut self) -> Result<SearchResult, EngineError> {
        self.run_for(u64::MAX)
    }

    /// Like [`Engine::run`] but pauses after at most `max_steps` generations.
    pub fn run_for(&mut self, max_steps: u64) -> Result<SearchResult, EngineError> {
        let mut trace = vec![self.state.best.fitness];
        let mut steps = 0;
        let stop = loop {
            if let Some(reason) = self.stop_reason() {
                break reason;
            }
            if steps >= max_steps {
                break StopReason::Paused;
            }
            let report = self.step()?;
            trace.push(report.best_fitness);
            steps += 1;
        };
        info!("search stopped ({stop}) after {} generations; best fitness {:.4}", self.state.generation, self.state.best.fitness);
        Ok(self.result(stop, trace))
    }

    fn result(&self, stop: StopReason, best_trace: Vec<f64>) -> SearchResult {
        SearchResult {
            best: self.state.best.clone(),
            history: self.state.history.clone(),
            generations: self.state.generation,
            stop,
            best_trace,
        }
    }

    /// Serializes the resumable state. The history itself lives in a
    /// separate append-only file; the checkpoint pins its length and digest.
    pub fn checkpoint(&self, config_digest: &str) -> String {
        let mut body = String::new();
        for m in &self.state.population {
            body.push_str(&serde_json::to_string(&CheckpointLine::Member(m.clone())).expect("serializable"));
            body.push('\n');
        }
        body.push_str(&serde_json::to_string(&CheckpointLine::Best(self.state.best.clone())).expect("serializable"));
        body.push('\n');
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            config_digest: config_digest.to_string(),
            seed: self.config.seed,
            generation: self.state.generation,
            next_id: self.state.next_id,
            since_improvement: self.state.since_improvement,
            history_len: self.state.history.len() as u64,
            history_digest: history_digest(&self.state.history),
            body_digest: hex::encode(Sha256::digest(body.as_bytes())),
        };
        let mut out = serde_json::to_string(&header).expect("serializable");
        out.push('\n');
        out.push_str(&body);
        out
    }

    /// Restores an engine from a checkpoint and the history file it points
    /// into. History records past the checkpoint are dropped.
    pub fn resume(
        space: SearchSpaceDef,
        config: EngineConfig,
        evaluator: E,
        config_digest: &str,
        checkpoint: &str,
        mut history: Vec<ScoredIndividual>,
    ) -> Result<Self, EngineError> {
        config.check()?;
        let space = space.normalized()?;
        let (header_line, body) = checkpoint
            .split_once('\n')
            .ok_or_else(|| CheckpointError::Corrupt("missing header line".into()))?;
        let header: CheckpointHeader =
            serde_json::from_str(header_line).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Corrupt(format!("unknown format {:?}", header.format)).into());
        }
        if hex::encode(Sha256::digest(body.as_bytes())) != header.body_digest {
            return Err(CheckpointError::Corrupt("body digest mismatch".into()).into());
        }
        if header.config_digest != config_digest || header.seed != config.seed {
            return Err(CheckpointError::ConfigMismatch {
                expected: format!("{config_digest} seed {}", config.seed),
                found: format!("{} seed {}", header.config_digest, header.seed),
            }
            .into());
        }
        if (history.len() as u64) < header.history_len {
            return Err(CheckpointError::HistoryTruncated { expected: header.history_len, found: history.len() as u64 }.into());
        }
        history.truncate(header.history_len as usize);
        if history_digest(&history) != header.history_digest {
            return Err(CheckpointError::Corrupt("history digest mismatch".into()).into());
        }
        let mut population = Vec::new();
        let mut best = None;
        for (k, line) in body.lines().enumerate() {
            let parsed: CheckpointLine =
                serde_json::from_str(line).map_err(|e| CheckpointError::Corrupt(format!("body line {}: {e}", k + 2)))?;
            match parsed {
                CheckpointLine::Member(m) => population.push(m),
                CheckpointLine::Best(b) => best = Some(b),
            }
        }
        let best = best.ok_or_else(|| CheckpointError::Corrupt("missing best record".into()))?;
        if population.len() != config.population {
            return Err(CheckpointError::Corrupt(format!(
                "population has {} members, configuration expects {}",
                population.len(),
                config.population
            ))
            .into());
        }
        if let Some(m) = population.iter().find(|m| !contains(&space, &m.arch)) {
            return Err(CheckpointError::Corrupt(format!("member {} is outside the search space", m.id)).into());
        }
        let cache = FitnessCache::new();
        for rec in &history {
            if let Some(s) = rec.scores {
                cache.insert(&rec.arch, s, rec.eval_source.clone());
            }
        }
        let state = EngineState {
            generation: header.generation,
            next_id: header.next_id,
            since_improvement: header.since_improvement,
            population,
            best,
            history,
        };
        Ok(Engine { space, config, evaluator, cache, state })
    }
}

struct Pending {
    arch: Architecture,
    parent: u64,
    loser: u64,
    launch: u64,
}

impl<E: ConcurrentEvaluator> Engine<E> {
    /// Keeps up to `config.in_flight` evaluations outstanding. Offspring are
    /// inserted, and losers removed, in completion order. Population size
    /// and best-so-far monotonicity hold; the trace is not reproducible
    /// when more than one evaluation is in flight.
    pub fn run_concurrent(&mut self) -> Result<SearchResult, EngineError> {
        let width = self.config.in_flight.max(1);
        let mut trace = vec![self.state.best.fitness];
        let mut pending: BTreeMap<u64, Pending> = BTreeMap::new();
        let mut launched = self.state.generation;
        loop {
            while pending.len() < width && launched < self.config.budget && self.state.since_improvement < self.config.patience
            {
                launched += 1;
                let mut r = rng::derive(self.config.seed, "step", launched);
                let (winner, loser) = tournament(&self.state.population, self.config.tournament_size, &mut r);
                let parent = self.state.population.iter().find(|m| m.id == winner).expect("member");
                let arch = evolve_with(&parent.arch, &self.space, &mut r)?.arch;
                let id = self.state.next_id;
                self.state.next_id += 1;
                if let Some((scores, source)) = self.cache.get(&arch) {
                    let ind = score_into(id, launched, Some(winner), arch, Ok((scores, source)), &self.config.weights)?;
                    let loser = self.live_loser(loser, launched);
                    self.apply(ind, loser);
                    trace.push(self.state.best.fitness);
                    continue;
                }
                match self.evaluator.submit(id, &arch) {
                    Ok(()) => {
                        pending.insert(id, Pending { arch, parent: winner, loser, launch: launched });
                    }
                    Err(EvalError::PoolEmpty) => return Err(EngineError::PoolEmpty),
                    Err(e) => {
                        let ind = score_into(id, launched, Some(winner), arch, Err(e), &self.config.weights)?;
                        let loser = self.live_loser(loser, launched);
                        self.apply(ind, loser);
                        trace.push(self.state.best.fitness);
                    }
                }
            }
            if pending.is_empty() {
                break;
            }
            let done = match self.evaluator.wait_any() {
                Ok(c) => c,
                Err(EvalError::PoolEmpty) => return Err(EngineError::PoolEmpty),
                Err(e) => return Err(EngineError::Config(format!("evaluation backend failed: {e}"))),
            };
            let Some(p) = pending.remove(&done.ticket) else {
                warn!("completion for unknown ticket {} ignored", done.ticket);
                continue;
            };
            let result = done.outcome.map(|s| (s, done.source));
            if let Ok((s, src)) = &result {
                self.cache.insert(&p.arch, *s, src.clone());
            }
            let ind = score_into(done.ticket, p.launch, Some(p.parent), p.arch, result, &self.config.weights)?;
            let loser = self.live_loser(p.loser, p.launch);
            self.apply(ind, loser);
            trace.push(self.state.best.fitness);
        }
        let stop = if self.state.generation >= self.config.budget {
            StopReason::BudgetExhausted
        } else {
            StopReason::Converged
        };
        Ok(self.result(stop, trace))
    }

    /// The recorded loser if it is still a member, else the loser of a fresh
    /// tournament.
    fn live_loser(&self, loser: u64, launch: u64) -> u64 {
        if self.state.population.iter().any(|m| m.id == loser) {
            return loser;
        }
        let mut r = rng::derive(self.config.seed, "loser", launch);
        tournament(&self.state.population, self.config.tournament_size, &mut r).1
    }
}

pub const CHECKPOINT_FORMAT: &str = "robnas-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_digest: String,
    pub seed: u64,
    pub generation: u64,
    pub next_id: u64,
    pub since_improvement: u64,
    pub history_len: u64,
    pub history_digest: String,
    pub body_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CheckpointLine {
    Member(ScoredIndividual),
    Best(ScoredIndividual),
}

/// One history record as written to the history file (no trailing newline).
pub fn history_line(rec: &ScoredIndividual) -> String {
    serde_json::to_string(rec).expect("serializable")
}

/// SHA-256 over the history file contents for `records`.
pub fn history_digest(records: &[ScoredIndividual]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(history_line(r).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Parses a history file, one record per line; blank lines are skipped.
pub fn parse_history(text: &str) -> Result<Vec<ScoredIndividual>, (usize, serde_json::Error)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e)))
        .collect()
}

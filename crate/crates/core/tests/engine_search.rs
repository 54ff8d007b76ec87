mod common;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use robnas_core::engine::{history_digest, tournament, Engine, EngineConfig, StopReason};
use robnas_core::fitness::{
    aggregate, surrogate_eval, EvalError, EvalScores, EvalSource, Evaluator, FitnessWeights, ScoredIndividual,
    SurrogateConfig, SurrogateEvaluator,
};
use robnas_core::rng;
use robnas_core::space::contains;
use robnas_core::{Architecture, ModelShapeConfig, SearchSpaceDef};

fn surrogate() -> SurrogateEvaluator {
    SurrogateEvaluator::new(SurrogateConfig::default(), ModelShapeConfig::default())
}

fn restricted_config(seed: u64) -> EngineConfig {
    EngineConfig { population: 50, init_ops: [1, 6], budget: 1_950, patience: 1_950, seed, ..Default::default() }
}

fn brute_force_optimum() -> f64 {
    let cfg = SurrogateConfig::default();
    let shape = ModelShapeConfig::default();
    let w = FitnessWeights::default();
    common::restricted_members()
        .iter()
        .map(|a| aggregate(&surrogate_eval(a, &cfg, &shape).unwrap(), &w).unwrap())
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn same_seed_same_trace() {
    let cfg = EngineConfig { population: 16, budget: 120, patience: 1_000, seed: 21, ..Default::default() };
    let a = Engine::init(SearchSpaceDef::default(), cfg.clone(), surrogate()).unwrap().run().unwrap();
    let b = Engine::init(SearchSpaceDef::default(), cfg, surrogate()).unwrap().run().unwrap();
    assert_eq!(history_digest(&a.history), history_digest(&b.history));
    assert_eq!(a.best, b.best);
}

#[test]
fn restricted_space_search_finds_global_optimum() {
    let optimum = brute_force_optimum();
    let mut hits = 0;
    for seed in 0..5 {
        let mut e = Engine::init(common::restricted_space(), restricted_config(seed), surrogate()).unwrap();
        let r = e.run().unwrap();
        assert!(r.history.len() <= 2_000);
        if r.best.fitness == optimum {
            hits += 1;
        }
    }
    assert!(hits >= 4, "{hits}/5 runs found the optimum");
}

#[test]
fn invariants_hold_every_generation() {
    let space = SearchSpaceDef::default();
    let cfg = EngineConfig { population: 20, budget: 300, patience: 40, seed: 9, ..Default::default() };
    let mut e = Engine::init(space.clone(), cfg, surrogate()).unwrap();
    let mut last = e.best().fitness;
    let mut steps = 0;
    while e.stop_reason().is_none() {
        let r = e.step().unwrap();
        steps += 1;
        assert_eq!(e.population().len(), 20);
        assert!(r.best_fitness >= last);
        assert!(contains(&space, &r.offspring.arch));
        assert_eq!(r.offspring.birth_generation, r.generation);
        assert!(!e.population().iter().any(|m| m.id == r.eliminated));
        last = r.best_fitness;
    }
    assert!(common::history_is_partitioned(e.history()));
    assert_eq!(e.history().len(), 20 + steps);
    let best_in_history = e.history().iter().map(|h| h.fitness).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(e.best().fitness, best_in_history);
}

#[test]
fn patience_stops_a_flat_landscape() {
    struct Flat;
    impl Evaluator for Flat {
        fn evaluate(&self, a: &Architecture) -> Result<EvalScores, EvalError> {
            let _ = a;
            Ok(EvalScores::new(50.0, 50.0, 0)?)
        }
        fn source(&self) -> EvalSource {
            EvalSource::Surrogate
        }
    }
    let cfg = EngineConfig { population: 10, budget: 10_000, patience: 25, seed: 1, ..Default::default() };
    let r = Engine::init(SearchSpaceDef::default(), cfg, Flat).unwrap().run().unwrap();
    assert_eq!(r.stop, StopReason::Converged);
    assert_eq!(r.generations, 25);
    // ties keep the earliest best
    assert_eq!(r.best.id, 0);
}

/// Fails every third call; counts invocations.
struct Flaky {
    calls: AtomicU64,
    inner: SurrogateEvaluator,
}

impl Evaluator for Flaky {
    fn evaluate(&self, a: &Architecture) -> Result<EvalScores, EvalError> {
        let k = self.calls.fetch_add(1, Ordering::SeqCst);
        if k % 3 == 2 {
            return Err(EvalError::Failed("flaky".into()));
        }
        self.inner.evaluate(a)
    }
    fn source(&self) -> EvalSource {
        EvalSource::Surrogate
    }
}

#[test]
fn failed_offspring_get_sentinel_and_lose() {
    let cfg = EngineConfig { population: 12, budget: 90, patience: 1_000, seed: 4, ..Default::default() };
    let flaky = Flaky { calls: AtomicU64::new(0), inner: surrogate() };
    let mut e = Engine::init(SearchSpaceDef::default(), cfg, &flaky).unwrap();
    assert!(e.population().iter().all(|m| m.fitness.is_finite()));
    let mut finite_lost_to_failed = 0;
    while e.stop_reason().is_none() {
        let fitness_of: HashMap<u64, f64> = e.population().iter().map(|m| (m.id, m.fitness)).collect();
        let r = e.step().unwrap();
        // a sentinel parent means the whole sample had failed, so the loser did too
        if fitness_of[&r.parent] == f64::NEG_INFINITY && fitness_of[&r.eliminated].is_finite() {
            finite_lost_to_failed += 1;
        }
    }
    assert_eq!(finite_lost_to_failed, 0);
    let failed: Vec<&ScoredIndividual> = e.history().iter().filter(|h| h.is_failed()).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|h| h.fitness == f64::NEG_INFINITY && h.eval_source == EvalSource::Failed));
    assert!(e.best().fitness.is_finite());
}

#[test]
fn tournament_membership_is_uniform_and_winner_is_fittest() {
    let members: Vec<ScoredIndividual> = (0..8)
        .map(|i| ScoredIndividual {
            id: i,
            birth_generation: 0,
            parent: None,
            arch: robnas_core::space::simplest(&SearchSpaceDef::default()),
            scores: None,
            fitness: (i * 7 % 8) as f64,
            eval_source: EvalSource::Surrogate,
        })
        .collect();
    let mut wins = [0u64; 8];
    let mut losses = [0u64; 8];
    let trials = 40_000;
    let mut r = rng::seeded(123);
    for _ in 0..trials {
        let (w, l) = tournament(&members, 2, &mut r);
        assert!(members[w as usize].fitness > members[l as usize].fitness);
        wins[w as usize] += 1;
        losses[l as usize] += 1;
    }
    // Under uniform pairs a member of fitness rank k (0 = worst) of 8 wins
    // with probability k / C(8,2) and loses with probability (7-k) / C(8,2).
    for i in 0..8 {
        let rank = members[i].fitness;
        let pw = rank / 28.0;
        let pl = (7.0 - rank) / 28.0;
        for (count, p) in [(wins[i], pw), (losses[i], pl)] {
            let sigma = (trials as f64 * p * (1.0 - p)).sqrt().max(1.0);
            assert!((count as f64 - trials as f64 * p).abs() < 4.0 * sigma, "member {i}: {count} vs {p}");
        }
    }
}

#[test]
fn resume_after_interrupt_reproduces_the_uninterrupted_run() {
    let space = SearchSpaceDef::default();
    let cfg = EngineConfig { population: 15, budget: 200, patience: 60, seed: 77, ..Default::default() };
    let full = Engine::init(space.clone(), cfg.clone(), surrogate()).unwrap().run().unwrap();
    for cut in [0, 1, 37, 150] {
        let mut first = Engine::init(space.clone(), cfg.clone(), surrogate()).unwrap();
        first.run_for(cut).unwrap();
        let ckpt = first.checkpoint("digest");
        let history = first.history().to_vec();
        drop(first);
        let mut second = Engine::resume(space.clone(), cfg.clone(), surrogate(), "digest", &ckpt, history).unwrap();
        let r = second.run().unwrap();
        assert_eq!(r.best, full.best, "cut at {cut}");
        assert_eq!(history_digest(&r.history), history_digest(&full.history), "cut at {cut}");
        assert_eq!(r.stop, full.stop);
    }
}

mod common;

use robnas_core::analysis::{all_stats, emit_table, group_stats, parse_csv, Property, TableFormat};
use robnas_core::engine::{Engine, EngineConfig};
use robnas_core::fitness::{surrogate_eval, EvalSource, ScoredIndividual, SurrogateConfig, SurrogateEvaluator};
use robnas_core::space::sample;
use robnas_core::{ModelShapeConfig, SearchSpaceDef};

fn surrogate() -> SurrogateEvaluator {
    SurrogateEvaluator::new(SurrogateConfig::default(), ModelShapeConfig::default())
}

#[test]
fn search_histories_match_two_pass_oracle() {
    for seed in 0..4 {
        let cfg = EngineConfig { population: 30, budget: 400, patience: 100, seed, ..Default::default() };
        let r = Engine::init(SearchSpaceDef::default(), cfg, surrogate()).unwrap().run().unwrap();
        common::check_stats(&r.history).unwrap();
    }
}

#[test]
fn failed_records_are_excluded_from_groups() {
    let cfg = SurrogateConfig::default();
    let shape = ModelShapeConfig::default();
    let mut history: Vec<ScoredIndividual> = (0..50)
        .map(|i| {
            let arch = sample(&SearchSpaceDef::default(), i).unwrap();
            let scores = surrogate_eval(&arch, &cfg, &shape).unwrap();
            ScoredIndividual {
                id: i,
                birth_generation: 0,
                parent: None,
                arch,
                scores: Some(scores),
                fitness: 0.0,
                eval_source: EvalSource::Surrogate,
            }
        })
        .collect();
    for h in history.iter_mut().step_by(7) {
        h.scores = None;
        h.fitness = f64::NEG_INFINITY;
        h.eval_source = EvalSource::Failed;
    }
    common::check_stats(&history).unwrap();
}

#[test]
fn robustness_falls_off_past_eight_edges_on_the_surrogate() {
    // Sampled architectures cover every edge count; the default surrogate
    // robustness peaks in the middle of the edge range.
    let cfg = SurrogateConfig::default();
    let shape = ModelShapeConfig::default();
    let history: Vec<ScoredIndividual> = (0..6_000)
        .map(|i| {
            let arch = sample(&SearchSpaceDef::default(), i).unwrap();
            let scores = surrogate_eval(&arch, &cfg, &shape).unwrap();
            ScoredIndividual {
                id: i,
                birth_generation: 0,
                parent: None,
                arch,
                scores: Some(scores),
                fitness: 0.0,
                eval_source: EvalSource::Surrogate,
            }
        })
        .collect();
    let rows = group_stats(&history, Property::EdgeCount).unwrap();
    let at = |k: u64| rows.iter().find(|r| r.key == k).map(|r| r.rob_mean);
    let twelve = at(12).expect("edge count 12 observed");
    let peak = (4..=8).filter_map(at).fold(f64::NEG_INFINITY, f64::max);
    assert!(twelve < peak, "edge 12: {twelve}, peak 4..8: {peak}");
}

#[test]
fn csv_from_a_run_parses_back_and_is_stable() {
    let cfg = EngineConfig { population: 12, budget: 60, patience: 100, seed: 2, ..Default::default() };
    let r = Engine::init(SearchSpaceDef::default(), cfg, surrogate()).unwrap().run().unwrap();
    let rows = all_stats(&r.history).unwrap();
    let mut a = Vec::new();
    emit_table(&rows, TableFormat::Csv, &mut a).unwrap();
    let mut shuffled = rows.clone();
    shuffled.reverse();
    let mut b = Vec::new();
    emit_table(&shuffled, TableFormat::Csv, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(parse_csv(a.as_slice()).unwrap(), rows);
}

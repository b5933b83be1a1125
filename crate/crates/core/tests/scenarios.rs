mod common;

use std::time::Duration;

use adsandbox::harness::{EpisodeOptions, SilExecutor};
use adsandbox::scenario::proposer::{benign_route_distances, heuristic_proposal};
use adsandbox::scenario::{
    builtin, evolve, propose_adversary, rollout_risk, EvolutionConfig, ExternalProposer, ProposalSource, Proposer, ScenarioSpec,
};
use common::{brute_force_route_distances, random_three_agent_scene, stub_proposer, untrained_stack, StubReply};

fn oracle_argmin(d: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..d.len() {
        if d[i] < d[best] {
            best = i;
        }
    }
    best
}

#[test]
fn heuristic_matches_brute_force_oracle() {
    for seed in 0..100 {
        let s = random_three_agent_scene(seed);
        let oracle = brute_force_route_distances(&s);
        let ours = benign_route_distances(&s).unwrap();
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "seed {seed}: {ours:?} vs {oracle:?}");
        }
        assert_eq!(heuristic_proposal(&s).unwrap().agent_index, oracle_argmin(&oracle), "seed {seed}");
    }
}

fn external(url: String, timeout_ms: u64) -> Proposer {
    Proposer::External(ExternalProposer {
        endpoint: url,
        timeout: Duration::from_millis(timeout_ms),
    })
}

#[test]
fn external_proposer_is_used_when_valid() {
    let (url, hits) = stub_proposer(StubReply::Json(r#"{"agent_index":1,"rationale":"stub"}"#.into()));
    let p = propose_adversary(&random_three_agent_scene(3), &external(url, 2000)).unwrap();
    assert_eq!((p.agent_index, p.source), (1, ProposalSource::External));
    assert_eq!(p.rationale, "stub");
    assert!(p.warning.is_none());
    assert_eq!(hits.load(std::sync::atomic::Ordering::SeqCst), 1);
}

#[test]
fn external_failures_fall_back_to_heuristic() {
    let s = random_three_agent_scene(4);
    let expected = heuristic_proposal(&s).unwrap().agent_index;
    let cases = [
        stub_proposer(StubReply::Json(r#"{"agent_index":7,"rationale":"out of range"}"#.into())).0,
        stub_proposer(StubReply::Garbage).0,
        stub_proposer(StubReply::Sleep(Duration::from_millis(1500))).0,
        "http://127.0.0.1:9/nothing-listens".into(),
    ];
    for url in cases {
        let p = propose_adversary(&s, &external(url.clone(), 300)).unwrap();
        assert_eq!(p.source, ProposalSource::Heuristic, "{url}");
        assert_eq!(p.agent_index, expected);
        assert!(p.warning.is_some());
    }
}

fn untouched_parts_equal(a: &ScenarioSpec, b: &ScenarioSpec) {
    assert_eq!(a.ego, b.ego);
    assert_eq!(a.map, b.map);
    assert_eq!(a.attack, b.attack);
    assert_eq!(a.weather, b.weather);
    assert_eq!(a.episode_ticks, b.episode_ticks);
}

#[test]
fn evolution_is_monotone_closed_and_deterministic() {
    let stack = untrained_stack();
    let mut seed = builtin("cutin_benign").unwrap();
    seed.episode_ticks = 160;
    let cfg = EvolutionConfig {
        iterations: 12,
        introduce_probability: 0.5,
        seed: 5,
        ..Default::default()
    };
    let opts = EpisodeOptions::default();
    let a = evolve(&seed, &stack, &cfg, &Proposer::Heuristic, &mut SilExecutor, &opts).unwrap();
    let accepted = a.accepted_objectives();
    assert!(accepted.windows(2).all(|w| w[1] > w[0]), "{accepted:?}");
    assert_eq!(a.lineage.len(), cfg.iterations + 1);
    for e in &a.lineage {
        assert!(e.best_objective >= e.report.objective || e.accepted);
    }
    a.scenario.validate().unwrap();
    untouched_parts_equal(&a.scenario, &seed);
    assert!(a.scenario.agents.len() <= seed.agents.len() + cfg.n_background);

    let (re, _) = rollout_risk(&a.scenario, &stack, &mut SilExecutor, &cfg.weights, &opts).unwrap();
    assert_eq!(re.objective, *accepted.last().unwrap());
    assert_eq!(re, a.best_report);

    let b = evolve(&seed, &stack, &cfg, &Proposer::Heuristic, &mut SilExecutor, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.lineage_jsonl(), b.lineage_jsonl());
}

#[test]
fn evolution_rejects_agentless_seed() {
    let stack = untrained_stack();
    let seed = builtin("ego_only").unwrap();
    let cfg = EvolutionConfig::default();
    assert!(evolve(&seed, &stack, &cfg, &Proposer::Heuristic, &mut SilExecutor, &EpisodeOptions::default()).is_err());
}

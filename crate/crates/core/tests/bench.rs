use std::sync::Arc;

use hrc_core::bench::*;
use hrc_core::graph::GraphOptions;
use hrc_core::policy::RobotPolicy;
use hrc_core::rl::TrainConfig;
use hrc_core::ScenarioConfig;

fn scenario(cfg: ScenarioConfig) -> Scenario {
    Scenario { name: "chair".into(), htm: Arc::new(hrc_core::chair()), cfg }
}

fn baselines(s: &Scenario) -> Vec<(String, Arc<dyn RobotPolicy>)> {
    [PolicyKind::Greedy, PolicyKind::Random]
        .into_iter()
        .map(|k| (k.name().to_string(), build_policy(k, s, &GraphOptions::default(), &TrainConfig::default()).unwrap()))
        .collect()
}

fn csv_with_threads(threads: usize, s: &Scenario) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let results = pool.install(|| run_benchmark(s, &baselines(s), 200, 42).unwrap());
    let mut out = Vec::new();
    write_csv(&results, &mut out).unwrap();
    out
}

#[test]
fn csv_is_independent_of_worker_count() {
    let s = scenario(ScenarioConfig { p_change: 0.2, p_fail: Some(0.1), ..ScenarioConfig::default() });
    let one = csv_with_threads(1, &s);
    assert_eq!(one, csv_with_threads(4, &s));
    assert_eq!(one, csv_with_threads(4, &s));
    let text = String::from_utf8(one).unwrap();
    assert!(text.starts_with("scenario,policy,trial,seed,steps,n_events,n_changes,n_failures\n"));
    assert_eq!(text.lines().count(), 401);
}

#[test]
fn reported_mean_matches_records() {
    let s = scenario(ScenarioConfig::default());
    for r in run_benchmark(&s, &baselines(&s), 300, 1).unwrap() {
        let steps: Vec<f64> = r.records.iter().map(|t| t.makespan as f64).collect();
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        let var = steps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / steps.len() as f64;
        assert!((r.mean - mean).abs() < 1e-9);
        assert!((r.std - var.sqrt()).abs() < 1e-9);
    }
}

#[test]
fn single_trial_has_zero_std() {
    let s = scenario(ScenarioConfig::default());
    for r in run_benchmark(&s, &baselines(&s), 1, 1).unwrap() {
        assert_eq!(r.std, 0.0);
        assert!(summarize(&[r]).contains("[0.0]"));
    }
}

#[test]
fn graph_policy_is_refused_for_stochastic_scenarios() {
    let s = scenario(ScenarioConfig { p_change: 0.1, ..ScenarioConfig::deterministic() });
    match build_policy(PolicyKind::Graph, &s, &GraphOptions::default(), &TrainConfig::default()) {
        Err(BenchError::Refused { reason, .. }) => assert!(reason.contains("p_change")),
        other => panic!("expected refusal, got {:?}", other.err()),
    }
}

//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use hrc_core::bench::generate_random_htm;
use hrc_core::{chair, Htm, ScenarioConfig};

/// Tasks the benchmarks run on: the chair and random tasks whose graphs stay small.
pub fn tasks() -> Vec<(String, Arc<Htm>)> {
    let mut out = vec![("chair".to_string(), Arc::new(chair()))];
    for n in [8, 16] {
        out.push((format!("random{n}s1"), Arc::new(generate_random_htm(n, 1).expect("valid size"))));
    }
    out
}

pub fn deterministic() -> ScenarioConfig {
    ScenarioConfig::deterministic()
}

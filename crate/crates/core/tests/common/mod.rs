#![allow(dead_code)]

use std::sync::Arc;

use hrc_core::htm::{ActionSpec, Capability, Htm, NodeKind, TaskTree};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tiny task with every capability possible, for brute-force cross-checks.
pub fn small_htm(n: usize, seed: u64) -> Arc<Htm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let caps = [Capability::HumanOnly, Capability::RobotOnly, Capability::Either, Capability::Joint];
    let actions = (1..=n as u16)
        .map(|id| {
            let cap = caps[rng.random_range(0..4)];
            let h = rng.random_range(1..=6);
            let r = if cap == Capability::Joint { h } else { rng.random_range(1..=6) };
            ActionSpec::new(id, format!("t{id}"), cap, h, r)
        })
        .collect();
    let mut ids: Vec<u16> = (1..=n as u16).collect();
    ids.shuffle(&mut rng);
    let root = tree(&ids, &mut rng);
    Arc::new(Htm::new(actions, root).unwrap())
}

fn tree(ids: &[u16], rng: &mut ChaCha8Rng) -> TaskTree {
    if ids.len() == 1 {
        return TaskTree::leaf(ids[0]);
    }
    let kind = [NodeKind::Sequential, NodeKind::Independent, NodeKind::Parallel][rng.random_range(0..3)];
    if rng.random_bool(0.5) {
        return TaskTree::node(kind, ids.iter().map(|&i| TaskTree::leaf(i)).collect());
    }
    let cut = rng.random_range(1..ids.len());
    TaskTree::node(kind, vec![tree(&ids[..cut], rng), tree(&ids[cut..], rng)])
}

pub fn robot_chain(durations: &[u32]) -> Arc<Htm> {
    let actions = durations
        .iter()
        .enumerate()
        .map(|(i, &d)| ActionSpec::new(i as u16 + 1, format!("r{i}"), Capability::RobotOnly, d, d))
        .collect();
    let leaves = (1..=durations.len() as u16).map(TaskTree::leaf).collect();
    Arc::new(Htm::new(actions, TaskTree::node(NodeKind::Independent, leaves)).unwrap())
}

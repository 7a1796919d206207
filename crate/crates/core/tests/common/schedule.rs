//! Invariants every epoch schedule must satisfy.

use std::collections::BTreeMap;

use mtnlu::rng::stream;
use mtnlu::trainer::{build_schedule, steps_per_epoch};
use proptest::prelude::*;

/// Two tasks: `synth` instances repeated `m` times and `ood` instances once,
/// in groups of at most `n`, with one update per `t` groups.
pub fn check_schedule(synth: usize, ood: usize, m: usize, n: usize, t: usize, seed: u64) -> Result<(), TestCaseError> {
    let tasks = vec![("atis".to_string(), synth, m), ("subs".to_string(), ood, 1)];
    let groups = build_schedule(&tasks, n, &mut stream(seed, "schedule", 1));
    let mut seen: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    for g in &groups {
        prop_assert!(!g.items.is_empty() && g.items.len() <= n);
        let limit = if g.task == "atis" { synth } else { ood };
        for &i in &g.items {
            prop_assert!(i < limit);
            *seen.entry((g.task.as_str(), i)).or_default() += 1;
        }
    }
    for i in 0..synth {
        prop_assert_eq!(seen.get(&("atis", i)).copied(), Some(m));
    }
    for i in 0..ood {
        prop_assert_eq!(seen.get(&("subs", i)).copied(), Some(1));
    }
    prop_assert_eq!(groups.len(), (synth * m).div_ceil(n) + ood.div_ceil(n));
    prop_assert_eq!(steps_per_epoch(groups.len(), t), groups.len().div_ceil(t));
    Ok(())
}

pub fn schedule_params() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (1usize..60, 1usize..300, 1usize..6, 1usize..40, 1usize..12, any::<u64>())
}

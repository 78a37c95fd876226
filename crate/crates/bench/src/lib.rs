//! Shared fixtures for the benchmarks.

use lyapresp::dynamics::{advance, State};
use lyapresp::lorenz96::{initial_condition, L96Params, Lorenz96};
use lyapresp::lyapunov::{incremental_map, random_direction, HistoryEntry, MapHistory};

/// Rescaled F = 8 regime on 20 nodes.
pub fn l96() -> Lorenz96 {
    Lorenz96::new(L96Params::new(20, 8.0, 2.3417, 0.27472).unwrap())
}

pub fn attractor_state(field: &Lorenz96) -> State {
    advance(field, &initial_condition(20, 1), 0.01, 20_000, |_, _| {}).unwrap()
}

/// A full history of `depth + 1` steps ending at index `depth`.
pub fn filled_history(field: &Lorenz96, depth: usize) -> MapHistory {
    let mut x = attractor_state(field);
    let mut w = random_direction(20, 3);
    let mut history = MapHistory::new(depth + 1);
    for k in 0..=depth as u64 {
        let t = incremental_map(field, &x, 0.01, 25).unwrap();
        let v = &t.matrix * &w;
        history.push(HistoryEntry::new(k, x, w, t.matrix).unwrap()).unwrap();
        w = &v / v.norm();
        x = t.end_state;
    }
    history
}

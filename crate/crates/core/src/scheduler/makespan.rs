//! Timing traces of dispatched phases and list-scheduling bounds.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub task_id: String,
    pub worker_id: String,
    /// Offsets from the start of the phase.
    pub start: Duration,
    pub end: Duration,
}

impl TraceEntry {
    pub fn duration(&self) -> Duration {
        self.end.saturating_sub(self.start)
    }
}

#[derive(Debug, Clone, Default)]
pub struct DispatchTrace {
    pub entries: Vec<TraceEntry>,
    pub wall: Duration,
    /// Worker slots connected at the end of the phase.
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MakespanReport {
    pub wall_secs: f64,
    pub serial_secs: f64,
    pub longest_task_secs: f64,
    pub slots: usize,
    pub speedup: f64,
    /// Greedy list-scheduling bound `serial / slots + longest`.
    pub bound_secs: f64,
    pub busy_secs: BTreeMap<String, f64>,
}

impl MakespanReport {
    pub fn within_bound(&self) -> bool {
        self.wall_secs <= self.bound_secs
    }
}

pub fn makespan_report(trace: &DispatchTrace) -> MakespanReport {
    let mut busy: BTreeMap<String, f64> = BTreeMap::new();
    let mut serial = 0.0;
    let mut longest: f64 = 0.0;
    for e in &trace.entries {
        let d = e.duration().as_secs_f64();
        serial += d;
        longest = longest.max(d);
        *busy.entry(e.worker_id.clone()).or_default() += d;
    }
    let slots = trace.slots.max(1);
    let wall = trace.wall.as_secs_f64();
    MakespanReport {
        wall_secs: wall,
        serial_secs: serial,
        longest_task_secs: longest,
        slots,
        speedup: if wall > 0.0 { serial / wall } else { 0.0 },
        bound_secs: serial / slots as f64 + longest,
        busy_secs: busy,
    }
}

/// Indices of `costs` ordered longest first, ties by index.
pub fn lpt_order(costs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[b].total_cmp(&costs[a]).then(a.cmp(&b)));
    order
}

/// Makespan of greedy list scheduling of `costs`, taken in `order`, on
/// `slots` identical machines.
pub fn list_schedule(costs: &[f64], order: &[usize], slots: usize) -> f64 {
    let mut load = vec![0.0f64; slots.max(1)];
    for &i in order {
        let m = (0..load.len())
            .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
            .expect("at least one slot");
        load[m] += costs[i];
    }
    load.into_iter().fold(0.0, f64::max)
}

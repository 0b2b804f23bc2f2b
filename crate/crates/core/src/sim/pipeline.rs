//! Micro-batch pipeline schedules under an integer tick-cost model.
//!
//! Each worker runs seven stages per micro-batch. Compute stages share one
//! resource and the two communication stages share another, so with several
//! micro-batches the gather of one can overlap the compute of another.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sim::collectives::CommStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    FeFwd,
    Gather,
    FcFwd,
    Softmax,
    FcBwd,
    Reduce,
    FeBwd,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::FeFwd,
        Stage::Gather,
        Stage::FcFwd,
        Stage::Softmax,
        Stage::FcBwd,
        Stage::Reduce,
        Stage::FeBwd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::FeFwd => "fe_fwd",
            Stage::Gather => "gather",
            Stage::FcFwd => "fc_fwd",
            Stage::Softmax => "softmax",
            Stage::FcBwd => "fc_bwd",
            Stage::Reduce => "reduce",
            Stage::FeBwd => "fe_bwd",
        }
    }

    pub fn is_comm(self) -> bool {
        matches!(self, Stage::Gather | Stage::Reduce)
    }

    fn index(self) -> usize {
        self as usize
    }

    fn prev(self) -> Option<Stage> {
        self.index().checked_sub(1).map(|i| Stage::ALL[i])
    }
}

/// Per-stage tick cost of one micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickCosts {
    pub fe_fwd: u64,
    pub gather: u64,
    pub fc_fwd: u64,
    pub softmax: u64,
    pub fc_bwd: u64,
    pub reduce: u64,
    pub fe_bwd: u64,
}

impl Default for TickCosts {
    fn default() -> Self {
        Self {
            fe_fwd: 4,
            gather: 3,
            fc_fwd: 2,
            softmax: 1,
            fc_bwd: 2,
            reduce: 3,
            fe_bwd: 4,
        }
    }
}

impl TickCosts {
    pub fn uniform(c: u64) -> Self {
        Self {
            fe_fwd: c,
            gather: c,
            fc_fwd: c,
            softmax: c,
            fc_bwd: c,
            reduce: c,
            fe_bwd: c,
        }
    }

    pub fn cost(&self, s: Stage) -> u64 {
        match s {
            Stage::FeFwd => self.fe_fwd,
            Stage::Gather => self.gather,
            Stage::FcFwd => self.fc_fwd,
            Stage::Softmax => self.softmax,
            Stage::FcBwd => self.fc_bwd,
            Stage::Reduce => self.reduce,
            Stage::FeBwd => self.fe_bwd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineEvent {
    pub worker: usize,
    pub stage: Stage,
    pub micro_batch: usize,
    pub start_tick: u64,
    pub end_tick: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineMode {
    /// Every stage finishes on all micro-batches before the next one starts.
    Baseline,
    /// Greedy list scheduling over the compute and communication resources.
    Overlapped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineSchedule {
    pub micro_batches: usize,
    pub mode: PipelineMode,
    /// Sorted by (worker, start, stage, micro-batch).
    pub events: Vec<PipelineEvent>,
}

impl PipelineSchedule {
    pub fn total_ticks(&self) -> u64 {
        self.events.iter().map(|e| e.end_tick).max().unwrap_or(0)
    }

    /// Execution order of (stage, micro-batch) tasks on worker 0. Ties in
    /// start time fall back to stage order, which keeps zero-cost
    /// predecessors ahead of their dependents.
    pub fn task_order(&self) -> Vec<(Stage, usize)> {
        self.events
            .iter()
            .filter(|e| e.worker == 0)
            .map(|e| (e.stage, e.micro_batch))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("worker,stage,micro_batch,start_tick,end_tick\n");
        for e in &self.events {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.worker,
                e.stage.name(),
                e.micro_batch,
                e.start_tick,
                e.end_tick
            );
        }
        out
    }

    /// Mechanical check of the ordering rules: every stage of a micro-batch
    /// starts after its predecessor ends, and no resource runs two
    /// non-empty tasks at once.
    pub fn check_dependencies(&self) -> Result<()> {
        let workers = self.events.iter().map(|e| e.worker + 1).max().unwrap_or(0);
        for w in 0..workers {
            let evs: Vec<&PipelineEvent> = self.events.iter().filter(|e| e.worker == w).collect();
            if evs.len() != Stage::ALL.len() * self.micro_batches {
                return Err(Error::InvalidConfig(format!("worker {w} has {} events", evs.len())));
            }
            let find = |s: Stage, mb: usize| evs.iter().find(|e| e.stage == s && e.micro_batch == mb);
            for e in &evs {
                if e.end_tick < e.start_tick {
                    return Err(Error::InvalidConfig("event ends before it starts".into()));
                }
                if let Some(p) = e.stage.prev() {
                    let dep = find(p, e.micro_batch)
                        .ok_or_else(|| Error::InvalidConfig("missing predecessor event".into()))?;
                    if dep.end_tick > e.start_tick {
                        return Err(Error::InvalidConfig(format!(
                            "{}({}) starts before {}({}) ends",
                            e.stage.name(),
                            e.micro_batch,
                            p.name(),
                            e.micro_batch
                        )));
                    }
                }
            }
            for comm in [false, true] {
                let mut busy: Vec<(u64, u64)> = evs
                    .iter()
                    .filter(|e| e.stage.is_comm() == comm && e.end_tick > e.start_tick)
                    .map(|e| (e.start_tick, e.end_tick))
                    .collect();
                busy.sort_unstable();
                if busy.windows(2).any(|p| p[0].1 > p[1].0) {
                    return Err(Error::InvalidConfig("resource runs two tasks at once".into()));
                }
            }
        }
        Ok(())
    }
}

fn schedule_worker(micro_batches: usize, costs: &TickCosts, mode: PipelineMode) -> Vec<(Stage, usize, u64, u64)> {
    let mut out = Vec::with_capacity(Stage::ALL.len() * micro_batches);
    match mode {
        PipelineMode::Baseline => {
            let mut t = 0;
            for s in Stage::ALL {
                for mb in 0..micro_batches {
                    let end = t + costs.cost(s);
                    out.push((s, mb, t, end));
                    t = end;
                }
            }
        }
        PipelineMode::Overlapped => {
            // next stage to run per micro-batch, and when its predecessor ended
            let mut next = vec![0usize; micro_batches];
            let mut ready_at = vec![0u64; micro_batches];
            let mut free_at = [0u64; 2];
            let mut running: [Option<(usize, u64)>; 2] = [None, None];
            let mut now = 0u64;
            let mut remaining = Stage::ALL.len() * micro_batches;
            while remaining > 0 {
                for slot in running.iter_mut() {
                    if let Some((mb, end)) = *slot {
                        if end <= now {
                            next[mb] += 1;
                            ready_at[mb] = end;
                            *slot = None;
                        }
                    }
                }
                let mut started = false;
                for res in 0..2 {
                    if running[res].is_some() || free_at[res] > now {
                        continue;
                    }
                    // later stages first drains the pipeline; then lower micro-batch
                    let pick = (0..micro_batches)
                        .filter(|&mb| {
                            next[mb] < Stage::ALL.len()
                                && Stage::ALL[next[mb]].is_comm() == (res == 1)
                                && ready_at[mb] <= now
                                && !running.iter().any(|r| matches!(r, Some((m, _)) if *m == mb))
                        })
                        .max_by_key(|&mb| (next[mb], std::cmp::Reverse(mb)));
                    if let Some(mb) = pick {
                        let s = Stage::ALL[next[mb]];
                        let end = now + costs.cost(s);
                        out.push((s, mb, now, end));
                        running[res] = Some((mb, end));
                        free_at[res] = end;
                        remaining -= 1;
                        started = true;
                    }
                }
                let zero_cost_done = running.iter().any(|r| matches!(r, Some((_, e)) if *e <= now));
                if !started && !zero_cost_done {
                    now = running
                        .iter()
                        .filter_map(|r| r.map(|(_, e)| e))
                        .min()
                        .expect("a task is running whenever work remains");
                }
            }
        }
    }
    out
}

/// Builds the event log for every worker and the tick counters.
pub fn pipeline_schedule(
    num_workers: usize,
    micro_batches: usize,
    costs: &TickCosts,
    mode: PipelineMode,
) -> Result<(PipelineSchedule, CommStats)> {
    if micro_batches == 0 {
        return Err(Error::InvalidConfig("micro_batches must be at least 1".into()));
    }
    if num_workers == 0 {
        return Err(Error::InvalidConfig("need at least one worker".into()));
    }
    let mut local = schedule_worker(micro_batches, costs, mode);
    local.sort_by_key(|&(s, mb, start, _)| (start, s, mb));
    let overlap = overlap_ticks(&local);
    let total = local.iter().map(|e| e.3).max().unwrap_or(0);

    let mut events = Vec::with_capacity(local.len() * num_workers);
    let mut stats = CommStats::new(num_workers);
    for w in 0..num_workers {
        events.extend(local.iter().map(|&(stage, micro_batch, start_tick, end_tick)| PipelineEvent {
            worker: w,
            stage,
            micro_batch,
            start_tick,
            end_tick,
        }));
        stats.workers[w].overlap_ticks = overlap;
        stats.workers[w].total_ticks = total;
    }
    Ok((
        PipelineSchedule {
            micro_batches,
            mode,
            events,
        },
        stats,
    ))
}

/// Ticks during which both resources are busy.
fn overlap_ticks(events: &[(Stage, usize, u64, u64)]) -> u64 {
    let busy = |comm: bool| -> Vec<(u64, u64)> {
        events
            .iter()
            .filter(|e| e.0.is_comm() == comm)
            .map(|e| (e.2, e.3))
            .collect()
    };
    let (a, b) = (busy(false), busy(true));
    let mut total = 0;
    for &(s1, e1) in &a {
        for &(s2, e2) in &b {
            let (lo, hi) = (s1.max(s2), e1.min(e2));
            if hi > lo {
                total += hi - lo;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_stage() -> TickCosts {
        TickCosts {
            fe_fwd: 3,
            gather: 3,
            fc_fwd: 0,
            softmax: 0,
            fc_bwd: 0,
            reduce: 0,
            fe_bwd: 0,
        }
    }

    #[test]
    fn single_micro_batch_is_serial() {
        let c = TickCosts::default();
        let (b, sb) = pipeline_schedule(2, 1, &c, PipelineMode::Baseline).unwrap();
        let (o, so) = pipeline_schedule(2, 1, &c, PipelineMode::Overlapped).unwrap();
        assert_eq!(b.events, o.events);
        assert_eq!(sb, so);
        assert_eq!(b.total_ticks(), 19);
        assert_eq!(so.workers[0].overlap_ticks, 0);
    }

    #[test]
    fn two_equal_stages_overlap() {
        let (b, sb) = pipeline_schedule(1, 4, &two_stage(), PipelineMode::Baseline).unwrap();
        let (o, so) = pipeline_schedule(1, 4, &two_stage(), PipelineMode::Overlapped).unwrap();
        assert_eq!(sb.workers[0].total_ticks, 24);
        // fe_fwd(i+1) runs under gather(i): 3 + 4 * 3
        assert_eq!(so.workers[0].total_ticks, 15);
        assert_eq!(so.workers[0].overlap_ticks, 9);
        assert_eq!(sb.workers[0].overlap_ticks, 0);
        b.check_dependencies().unwrap();
        o.check_dependencies().unwrap();
    }

    #[test]
    fn overlapped_never_slower() {
        for mb in 1..6 {
            for c in [TickCosts::default(), TickCosts::uniform(1), two_stage()] {
                let (b, _) = pipeline_schedule(3, mb, &c, PipelineMode::Baseline).unwrap();
                let (o, _) = pipeline_schedule(3, mb, &c, PipelineMode::Overlapped).unwrap();
                o.check_dependencies().unwrap();
                assert!(o.total_ticks() <= b.total_ticks());
                assert_eq!(o.events.len(), 3 * 7 * mb);
            }
        }
    }

    #[test]
    fn checker_catches_violation() {
        let (mut s, _) = pipeline_schedule(1, 2, &TickCosts::uniform(1), PipelineMode::Baseline).unwrap();
        let g = s.events.iter_mut().find(|e| e.stage == Stage::Gather && e.micro_batch == 0).unwrap();
        g.start_tick = 0;
        g.end_tick = 1;
        assert!(s.check_dependencies().is_err());
    }

    #[test]
    fn zero_micro_batches_rejected() {
        assert!(pipeline_schedule(1, 0, &TickCosts::default(), PipelineMode::Overlapped).is_err());
    }

    #[test]
    fn csv_has_one_line_per_event() {
        let (s, _) = pipeline_schedule(2, 2, &TickCosts::default(), PipelineMode::Overlapped).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("worker,stage,micro_batch,start_tick,end_tick\n"));
        assert_eq!(csv.lines().count(), 1 + 28);
        assert!(csv.contains(",fe_fwd,0,0,4"));
    }
}

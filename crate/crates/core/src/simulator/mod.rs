//! Discrete-event simulation of one training iteration.
//!
//! Each data-parallel replica streams `gas` micro-batches through its `pp`
//! stages. A stage computes a micro-batch once it is idle and the input has
//! arrived; on completion it hands the activation to the link towards the
//! next stage and immediately starts its next micro-batch. Links carry one
//! transfer at a time in FIFO order and the receiver blocks until delivery.
//! The iteration ends when the slowest replica drains, followed by the
//! gradient all-reduce barrier costed by [`dpsync_time`].

mod correlation;

pub use correlation::rank_correlation;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cost::{dpsync_time, replica_edge_times, PlanContext};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::types::{ensure_valid, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    ComputeStart,
    ComputeEnd,
    TransferStart,
    TransferEnd,
    SyncEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SimEvent<T> {
    pub time: T,
    pub kind: EventKind,
    pub stage: usize,
    pub replica: usize,
    pub microbatch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SimResult<T> {
    pub iteration_time: T,
    /// Slowest replica's drain time, before gradient synchronisation.
    pub pipeline_time: T,
    pub dpsync_time: T,
    pub per_stage_busy: Vec<T>,
    pub bubble_fraction: T,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_trace: Option<Vec<SimEvent<T>>>,
}

impl<T: Scalar> SimResult<T> {
    /// Writes the trace as JSON lines, one event per line.
    pub fn write_trace<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for ev in self.event_trace.iter().flatten() {
            serde_json::to_writer(&mut out, ev)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Pending completion, popped in (time, stage, micro-batch) order.
#[derive(Debug, Clone, Copy)]
struct Pending<T> {
    time: T,
    stage: usize,
    microbatch: usize,
    kind: EventKind,
}

impl<T: Scalar> PartialEq for Pending<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Pending<T> {}
impl<T: Scalar> PartialOrd for Pending<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Pending<T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .cmp_total(&self.time)
            .then(other.stage.cmp(&self.stage))
            .then(other.microbatch.cmp(&self.microbatch))
            .then(other.kind.cmp(&self.kind))
    }
}

/// Runs one replica's pipeline and returns its drain time.
pub fn simulate_pipeline<T: Scalar>(
    stage_times: &[T],
    edge_times: &[T],
    gas: usize,
    replica: usize,
    trace: Option<&mut Vec<SimEvent<T>>>,
) -> T {
    let pp = stage_times.len();
    assert_eq!(edge_times.len() + 1, pp, "one edge per stage boundary");
    let mut trace = trace;
    let mut log = |time: T, kind: EventKind, stage: usize, microbatch: usize| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(SimEvent {
                time,
                kind,
                stage,
                replica,
                microbatch,
            });
        }
    };

    let mut ready: Vec<VecDeque<usize>> = vec![VecDeque::new(); pp];
    ready[0].extend(0..gas);
    let mut stage_busy = vec![false; pp];
    let mut link_queue: Vec<VecDeque<usize>> = vec![VecDeque::new(); pp.saturating_sub(1)];
    let mut link_busy = vec![false; pp.saturating_sub(1)];
    let mut heap: BinaryHeap<Pending<T>> = BinaryHeap::new();
    let mut finish = T::zero();

    let start_stage = |stage: usize,
                       now: T,
                       ready: &mut Vec<VecDeque<usize>>,
                       busy: &mut Vec<bool>,
                       heap: &mut BinaryHeap<Pending<T>>,
                       log: &mut dyn FnMut(T, EventKind, usize, usize)| {
        if busy[stage] {
            return;
        }
        if let Some(mb) = ready[stage].pop_front() {
            busy[stage] = true;
            log(now, EventKind::ComputeStart, stage, mb);
            heap.push(Pending {
                time: now + stage_times[stage],
                stage,
                microbatch: mb,
                kind: EventKind::ComputeEnd,
            });
        }
    };
    let start_link = |link: usize,
                      now: T,
                      queue: &mut Vec<VecDeque<usize>>,
                      busy: &mut Vec<bool>,
                      heap: &mut BinaryHeap<Pending<T>>,
                      log: &mut dyn FnMut(T, EventKind, usize, usize)| {
        if busy[link] {
            return;
        }
        if let Some(mb) = queue[link].pop_front() {
            busy[link] = true;
            log(now, EventKind::TransferStart, link, mb);
            heap.push(Pending {
                time: now + edge_times[link],
                stage: link,
                microbatch: mb,
                kind: EventKind::TransferEnd,
            });
        }
    };

    start_stage(
        0,
        T::zero(),
        &mut ready,
        &mut stage_busy,
        &mut heap,
        &mut log,
    );
    while let Some(ev) = heap.pop() {
        let now = ev.time;
        log(now, ev.kind, ev.stage, ev.microbatch);
        match ev.kind {
            EventKind::ComputeEnd => {
                stage_busy[ev.stage] = false;
                if ev.stage + 1 < pp {
                    link_queue[ev.stage].push_back(ev.microbatch);
                    start_link(
                        ev.stage,
                        now,
                        &mut link_queue,
                        &mut link_busy,
                        &mut heap,
                        &mut log,
                    );
                } else {
                    finish = finish.max(now);
                }
                start_stage(
                    ev.stage,
                    now,
                    &mut ready,
                    &mut stage_busy,
                    &mut heap,
                    &mut log,
                );
            }
            EventKind::TransferEnd => {
                link_busy[ev.stage] = false;
                ready[ev.stage + 1].push_back(ev.microbatch);
                start_link(
                    ev.stage,
                    now,
                    &mut link_queue,
                    &mut link_busy,
                    &mut heap,
                    &mut log,
                );
                start_stage(
                    ev.stage + 1,
                    now,
                    &mut ready,
                    &mut stage_busy,
                    &mut heap,
                    &mut log,
                );
            }
            _ => unreachable!("only completions are scheduled"),
        }
    }
    finish
}

/// Simulates one iteration of `s`; the profile and fallback come from `ctx`.
pub fn simulate<T: Scalar>(
    s: &Strategy,
    ctx: &PlanContext<'_, T>,
    with_trace: bool,
) -> Result<SimResult<T>> {
    let gas = ensure_valid(s, ctx.model, ctx.cluster, ctx.gbs)?;
    let stage_times = ctx.stage_times(s)?;
    let mut trace = with_trace.then(Vec::new);
    let mut pipeline = T::zero();
    for replica in 0..s.degrees.dp {
        let edges = replica_edge_times(s, ctx.model, ctx.cluster, replica)?;
        let t = simulate_pipeline(&stage_times, &edges, gas, replica, trace.as_mut());
        pipeline = pipeline.max(t);
    }
    let dpsync = dpsync_time(s, ctx.model, ctx.cluster, ctx.cost.bytes_per_param)?;
    let per_stage_busy: Vec<T> = stage_times
        .iter()
        .map(|&t| T::from_count(gas) * t)
        .collect();
    let busy_sum: T = per_stage_busy.iter().copied().sum();
    let bubble_fraction = if pipeline > T::zero() {
        // clamp: event times accumulate rounding that gas * t does not
        (T::one() - busy_sum / (T::from_count(s.degrees.pp) * pipeline))
            .max(T::zero())
            .min(T::one())
    } else {
        T::zero()
    };
    let iteration_time = pipeline + dpsync;
    if let Some(t) = trace.as_mut() {
        t.push(SimEvent {
            time: iteration_time,
            kind: EventKind::SyncEnd,
            stage: 0,
            replica: 0,
            microbatch: 0,
        });
    }
    Ok(SimResult {
        iteration_time,
        pipeline_time: pipeline,
        dpsync_time: dpsync,
        per_stage_busy,
        bubble_fraction,
        event_trace: trace,
    })
}

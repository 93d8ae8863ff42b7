//! Exhaustive strategy search over parallelism degrees and micro-batch sizes,
//! and the Megatron-style heuristic baseline.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{replica_edge_time, CostBreakdown, PlanContext};
use crate::error::{PlanError, Result};
use crate::pipeline_dp::{optimal_assignment, segment_times};
use crate::placement::heuristic_placement;
use crate::scalar::Scalar;
use crate::simulator::simulate;
use crate::types::{LayerAssignment, ModelGraph, ParallelismDegrees, Placement, Strategy};

/// Ascending divisors of `n`.
pub fn divisors(n: usize) -> Vec<usize> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut d = 1;
    while d * d <= n {
        if n.is_multiple_of(d) {
            small.push(d);
            if d * d != n {
                large.push(n / d);
            }
        }
        d += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Every ordered `(pp, dp, tmp)` with `pp * dp * tmp = n`, by ascending pp then dp.
pub fn enumerate_degrees(n: usize) -> Vec<ParallelismDegrees> {
    let mut out = Vec::new();
    for pp in divisors(n) {
        for dp in divisors(n / pp) {
            out.push(ParallelismDegrees::new(pp, dp, n / (pp * dp)));
        }
    }
    out
}

/// Micro-batch sizes compatible with `dp`: the divisors of `gbs / dp`, or none.
pub fn enumerate_mbs(gbs: usize, dp: usize) -> Vec<usize> {
    if dp == 0 || !gbs.is_multiple_of(dp) {
        return Vec::new();
    }
    divisors(gbs / dp)
}

/// Stage sizes differing by at most one, larger stages first.
pub fn uniform_assignment(num_layers: usize, k: usize) -> Result<LayerAssignment> {
    if k == 0 || k > num_layers {
        return Err(PlanError::Infeasible(format!(
            "cannot split {num_layers} layers into {k} stages"
        )));
    }
    let (base, extra) = (num_layers / k, num_layers % k);
    let mut cuts = vec![0];
    for j in 0..k {
        let size = base + usize::from(j < extra);
        cuts.push(cuts[j] + size);
    }
    Ok(LayerAssignment::new(cuts))
}

/// Greedy cuts at the cumulative-parameter quantiles `j * P / k`, each placed
/// at the nearest prefix boundary that keeps every stage non-empty.
pub fn param_balance_assignment<T: Scalar>(
    model: &ModelGraph<T>,
    k: usize,
) -> Result<LayerAssignment> {
    let l = model.num_layers();
    if k == 0 || k > l {
        return Err(PlanError::Infeasible(format!(
            "cannot split {l} layers into {k} stages"
        )));
    }
    let mut prefix = vec![0u128; l + 1];
    for (i, layer) in model.layers.iter().enumerate() {
        prefix[i + 1] = prefix[i] + u128::from(layer.param_count);
    }
    let total = prefix[l];
    let mut cuts = vec![0];
    for j in 1..k {
        let lo = cuts[j - 1] + 1;
        let hi = l - (k - j);
        // compare |prefix[c] - j*P/k| scaled by k to stay in integers
        let target = total * j as u128;
        let best = (lo..=hi)
            .min_by_key(|&c| (prefix[c] * k as u128).abs_diff(target))
            .expect("non-empty range");
        cuts.push(best);
    }
    cuts.push(l);
    Ok(LayerAssignment::new(cuts))
}

/// Runs the layer-assignment DP for fixed degrees, placement and micro-batch size.
///
/// Boundary costs are the worst replica's transfer time for that stage pair.
pub fn assign_layers<T: Scalar>(
    ctx: &PlanContext<'_, T>,
    degrees: ParallelismDegrees,
    placement: Placement,
    mbs: usize,
) -> Result<(Strategy, T)> {
    let gas = gas_for(ctx.gbs, degrees.dp, mbs)?;
    let mut s = Strategy {
        degrees,
        placement,
        mbs,
        assignment: LayerAssignment::new(vec![0, ctx.model.num_layers()]),
    };
    let timer = ctx.layer_timer(&s);
    let seg = segment_times(degrees.tmp, mbs, &timer)?;
    let edge = |boundary: usize, stage: usize| -> Result<T> {
        let mut worst = T::zero();
        for replica in 0..degrees.dp {
            worst = worst.max(replica_edge_time(
                &s,
                ctx.model,
                ctx.cluster,
                replica,
                stage,
                boundary,
            )?);
        }
        Ok(worst)
    };
    let (assignment, cost) = optimal_assignment(&seg, degrees.pp, gas, edge)?;
    s.assignment = assignment;
    Ok((s, cost))
}

fn gas_for(gbs: usize, dp: usize, mbs: usize) -> Result<usize> {
    let per = dp * mbs;
    if per == 0 || !gbs.is_multiple_of(per) {
        return Err(PlanError::Invalid(format!(
            "gbs={gbs} is not divisible by dp*mbs={per}"
        )));
    }
    Ok(gbs / per)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CandidateRecord<T> {
    pub rank: usize,
    pub strategy: Strategy,
    pub estimated: CostBreakdown<T>,
    pub simulated: Option<T>,
}

/// A `(degrees, mbs)` combination that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedCandidate {
    pub degrees: ParallelismDegrees,
    pub mbs: usize,
    /// [`PlanError::kind`] of the failure.
    pub kind: String,
    pub reason: String,
}

fn record_order<T: Scalar>(
    a: &(Strategy, CostBreakdown<T>),
    b: &(Strategy, CostBreakdown<T>),
) -> Ordering {
    let key = |s: &Strategy| (s.degrees.pp, s.degrees.dp, s.degrees.tmp, s.mbs);
    a.1.total
        .cmp_total(&b.1.total)
        .then_with(|| key(&a.0).cmp(&key(&b.0)))
        .then_with(|| a.0.assignment.cmp(&b.0.assignment))
        .then_with(|| {
            a.0.placement
                .rank_to_device
                .cmp(&b.0.placement.rank_to_device)
        })
}

/// Sorts by estimated total (ties by pp, dp, tmp, mbs) and numbers ranks from 1.
pub fn rank_records<T: Scalar>(
    mut evaluated: Vec<(Strategy, CostBreakdown<T>)>,
) -> Vec<CandidateRecord<T>> {
    evaluated.sort_by(record_order);
    evaluated
        .into_iter()
        .enumerate()
        .map(|(i, (strategy, estimated))| CandidateRecord {
            rank: i + 1,
            strategy,
            estimated,
            simulated: None,
        })
        .collect()
}

/// Simulates the first `budget` records and returns the index of the
/// fastest simulated one.
pub fn run_trials<T: Scalar>(
    ctx: &PlanContext<'_, T>,
    records: &mut [CandidateRecord<T>],
    budget: usize,
) -> Option<usize> {
    let n = budget.min(records.len());
    records[..n].par_iter_mut().for_each(|r| {
        r.simulated = simulate(&r.strategy, ctx, false)
            .ok()
            .map(|s| s.iteration_time);
    });
    records[..n]
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.simulated.map(|t| (i, t)))
        .min_by(|a, b| a.1.cmp_total(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanConfig {
    /// Number of top-ranked candidates run through the simulator.
    pub budget: usize,
    /// Worker threads for candidate evaluation; `None` uses available parallelism.
    pub workers: Option<usize>,
    /// Optional ceiling on parameters held by any single device.
    pub max_params_per_device: Option<u64>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            budget: 10,
            workers: None,
            max_params_per_device: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PlanOutcome<T> {
    pub candidates: Vec<CandidateRecord<T>>,
    pub failures: Vec<FailedCandidate>,
    /// Index into `candidates` of the best simulated strategy.
    pub best: Option<usize>,
}

pub(crate) fn params_per_device<T: Scalar>(model: &ModelGraph<T>, s: &Strategy) -> u64 {
    s.assignment
        .stage_ranges()
        .map(|r| model.params_in(r).div_ceil(s.degrees.tmp as u64))
        .max()
        .unwrap_or(0)
}

pub(crate) fn check_ceiling<T: Scalar>(
    ctx: &PlanContext<'_, T>,
    s: &Strategy,
    ceiling: Option<u64>,
) -> Result<()> {
    match ceiling {
        Some(max) if params_per_device(ctx.model, s) > max => Err(PlanError::Infeasible(format!(
            "{} parameters per device exceeds the ceiling of {max}",
            params_per_device(ctx.model, s)
        ))),
        _ => Ok(()),
    }
}

/// Runs `f` inside a pool of `workers` threads, or the global pool when `None`.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

/// Enumerate, assign, estimate, rank, then simulate the top `budget`.
pub fn plan<T: Scalar>(ctx: &PlanContext<'_, T>, cfg: &PlanConfig) -> PlanOutcome<T> {
    let mut jobs = Vec::new();
    for degrees in enumerate_degrees(ctx.cluster.num_devices()) {
        for mbs in enumerate_mbs(ctx.gbs, degrees.dp) {
            jobs.push((degrees, mbs));
        }
    }
    let results: Vec<Result<(Strategy, CostBreakdown<T>)>> = with_workers(cfg.workers, || {
        jobs.par_iter()
            .map(|&(degrees, mbs)| {
                let placement = heuristic_placement(degrees, ctx.cluster).placement;
                let (s, _) = assign_layers(ctx, degrees, placement, mbs)?;
                check_ceiling(ctx, &s, cfg.max_params_per_device)?;
                let est = ctx.estimate(&s)?;
                Ok((s, est))
            })
            .collect()
    });

    let mut evaluated = Vec::new();
    let mut failures = Vec::new();
    for ((degrees, mbs), r) in jobs.into_iter().zip(results) {
        match r {
            Ok(v) => evaluated.push(v),
            Err(e) => failures.push(FailedCandidate {
                degrees,
                mbs,
                kind: e.kind().into(),
                reason: e.to_string(),
            }),
        }
    }
    let mut candidates = rank_records(evaluated);
    let best = with_workers(cfg.workers, || run_trials(ctx, &mut candidates, cfg.budget));
    PlanOutcome {
        candidates,
        failures,
        best,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BalanceMode {
    LayerBalance,
    ParamBalance,
}

fn balanced_assignment<T: Scalar>(
    model: &ModelGraph<T>,
    k: usize,
    mode: BalanceMode,
) -> Result<LayerAssignment> {
    match mode {
        BalanceMode::LayerBalance => uniform_assignment(model.num_layers(), k),
        BalanceMode::ParamBalance => param_balance_assignment(model, k),
    }
}

/// Degrees allowed by the baseline, in preference order: `tmp` no larger than
/// the smallest node, then smallest `tmp * pp`, ties toward smaller `tmp`.
pub fn megatron_degree_order<T: Scalar>(ctx: &PlanContext<'_, T>) -> Vec<ParallelismDegrees> {
    let max_tmp = ctx.cluster.min_node_size();
    let mut degrees: Vec<ParallelismDegrees> = enumerate_degrees(ctx.cluster.num_devices())
        .into_iter()
        .filter(|d| d.tmp <= max_tmp && d.pp <= ctx.model.num_layers())
        .collect();
    degrees.sort_by_key(|d| (d.tmp * d.pp, d.tmp, d.pp));
    degrees
}

/// The heuristic baseline: for each micro-batch size, the first admissible
/// degrees in [`megatron_degree_order`], heuristic placement, and a layer- or
/// parameter-balanced assignment.
pub fn megatron_baseline<T: Scalar>(
    ctx: &PlanContext<'_, T>,
    mode: BalanceMode,
    max_params_per_device: Option<u64>,
) -> Vec<CandidateRecord<T>> {
    let order = megatron_degree_order(ctx);
    let mut evaluated = Vec::new();
    for mbs in crate::optimizer::divisors(ctx.gbs) {
        for &degrees in &order {
            if !enumerate_mbs(ctx.gbs, degrees.dp).contains(&mbs) {
                continue;
            }
            let Ok(assignment) = balanced_assignment(ctx.model, degrees.pp, mode) else {
                continue;
            };
            let s = Strategy {
                degrees,
                placement: heuristic_placement(degrees, ctx.cluster).placement,
                mbs,
                assignment,
            };
            if check_ceiling(ctx, &s, max_params_per_device).is_err() {
                continue;
            }
            if let Ok(est) = ctx.estimate(&s) {
                evaluated.push((s, est));
            }
            break;
        }
    }
    rank_records(evaluated)
}

//! Simulated annealing over degrees, micro-batch size and domino placements.
//!
//! Each step perturbs either `tmp` (keeping `dp`) or `dp` (keeping `tmp`),
//! redraws the micro-batch size, samples a fresh tiling of the device mesh
//! and solves the layer assignment exactly. Moves are accepted with
//! probability `exp(min(cost - next, 0) / t)` under geometric cooling.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::PlanContext;
use crate::error::{PlanError, Result};
use crate::optimizer::{
    assign_layers, check_ceiling, divisors, enumerate_degrees, enumerate_mbs,
    megatron_degree_order, rank_records, run_trials, CandidateRecord,
};
use crate::placement::domino::{device_grid, sample_domino_tiling, DeviceGrid};
use crate::placement::heuristic::heuristic_placement;
use crate::scalar::Scalar;
use crate::types::{ParallelismDegrees, Strategy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Number of recorded strategies returned (and simulated).
    pub budget: usize,
    pub t0: f64,
    pub cooling: f64,
    pub t_min: f64,
    /// Record every evaluated neighbour, not only accepted ones.
    pub record_all: bool,
    /// Neighbour draws per iteration before the step is skipped.
    pub max_retries: usize,
    /// Optional ceiling on parameters held by any single device.
    pub max_params_per_device: Option<u64>,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            seed: 0,
            budget: 10,
            t0: 1.0,
            cooling: 0.97,
            t_min: 1e-3,
            record_all: false,
            max_retries: 32,
            max_params_per_device: None,
        }
    }
}

/// `exp(min(cost - next, 0) / t)`; always 1 for an improvement.
pub fn acceptance_probability(cost: f64, next: f64, t: f64) -> f64 {
    ((cost - next).min(0.0) / t).exp()
}

#[derive(Debug, Clone)]
pub struct AnnealState<T> {
    pub current: Strategy,
    pub current_cost: T,
    pub temperature: f64,
    /// Distinct recorded strategies with their estimated totals, in record order.
    pub best_record: Vec<(Strategy, T)>,
    seen: HashSet<Strategy>,
}

impl<T: Scalar> AnnealState<T> {
    fn new(current: Strategy, current_cost: T, temperature: f64) -> Self {
        let mut state = Self {
            current,
            current_cost,
            temperature,
            best_record: Vec::new(),
            seen: HashSet::new(),
        };
        state.record(state.current.clone(), current_cost);
        state
    }

    fn record(&mut self, s: Strategy, cost: T) {
        if self.seen.insert(s.clone()) {
            self.best_record.push((s, cost));
        }
    }

    pub fn best_cost(&self) -> T {
        self.best_record
            .iter()
            .map(|r| r.1)
            .fold(T::infinity(), T::min)
    }
}

/// One line of the audit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AnnealStep<T> {
    pub iteration: usize,
    pub temperature: f64,
    pub degrees: Option<ParallelismDegrees>,
    pub mbs: Option<usize>,
    pub proposed_cost: Option<T>,
    pub accepted: bool,
    pub current_cost: T,
    pub best_cost: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AnnealOutcome<T> {
    pub candidates: Vec<CandidateRecord<T>>,
    /// Index into `candidates` of the best simulated strategy.
    pub best: Option<usize>,
    pub initial_cost: T,
    pub steps: Vec<AnnealStep<T>>,
}

impl<T: Scalar> AnnealOutcome<T> {
    /// Running minimum of recorded cost after each iteration.
    pub fn best_trace(&self) -> Vec<T> {
        self.steps.iter().map(|s| s.best_cost).collect()
    }

    pub fn write_trace<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut out, step)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn initial_strategy<T: Scalar>(
    ctx: &PlanContext<'_, T>,
    ceiling: Option<u64>,
) -> Result<(Strategy, T)> {
    // baseline degrees first, then anything else the cluster admits
    let mut order = megatron_degree_order(ctx);
    order.extend(
        enumerate_degrees(ctx.cluster.num_devices())
            .into_iter()
            .filter(|d| d.pp <= ctx.model.num_layers()),
    );
    let mut last = None;
    for degrees in order {
        let Some(&mbs) = enumerate_mbs(ctx.gbs, degrees.dp).first() else {
            continue;
        };
        let placement = heuristic_placement(degrees, ctx.cluster).placement;
        match assign_layers(ctx, degrees, placement, mbs).and_then(|(s, _)| {
            check_ceiling(ctx, &s, ceiling)?;
            let cost = ctx.estimate(&s)?.total;
            Ok((s, cost))
        }) {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| PlanError::Infeasible("no admissible starting degrees".into())))
}

/// Divisor-based resampling of one degree; the product with the other two stays `|D|`.
fn propose_degrees<T: Scalar>(
    ctx: &PlanContext<'_, T>,
    current: ParallelismDegrees,
    rng: &mut ChaCha8Rng,
) -> Option<ParallelismDegrees> {
    let n = ctx.cluster.num_devices();
    let layers = ctx.model.num_layers();
    let resample_tmp = rng.gen_bool(0.5);
    let options: Vec<ParallelismDegrees> = if resample_tmp {
        divisors(n / current.dp)
            .into_iter()
            .map(|tmp| ParallelismDegrees::new(n / (current.dp * tmp), current.dp, tmp))
            .collect()
    } else {
        divisors(n / current.tmp)
            .into_iter()
            .map(|dp| ParallelismDegrees::new(n / (dp * current.tmp), dp, current.tmp))
            .collect()
    };
    let options: Vec<_> = options
        .into_iter()
        .filter(|d| d.pp <= layers && !enumerate_mbs(ctx.gbs, d.dp).is_empty())
        .collect();
    options.choose(rng).copied()
}

fn propose<T: Scalar>(
    ctx: &PlanContext<'_, T>,
    grid: &DeviceGrid,
    current: ParallelismDegrees,
    ceiling: Option<u64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Strategy, T)> {
    let degrees = propose_degrees(ctx, current, rng)
        .ok_or_else(|| PlanError::Infeasible("no admissible degrees".into()))?;
    let mbs = *enumerate_mbs(ctx.gbs, degrees.dp)
        .choose(rng)
        .expect("filtered non-empty");
    let tiling = sample_domino_tiling(degrees, grid.rows, grid.cols, rng)?;
    let (s, _) = assign_layers(ctx, degrees, tiling.to_placement(grid), mbs)?;
    check_ceiling(ctx, &s, ceiling)?;
    let cost = ctx.estimate(&s)?.total;
    Ok((s, cost))
}

/// Runs the annealing chain and returns the top `budget` recorded strategies,
/// each simulated. Deterministic for a fixed seed.
pub fn anneal<T: Scalar>(ctx: &PlanContext<'_, T>, cfg: &AnnealConfig) -> Result<AnnealOutcome<T>> {
    if cfg.iterations == 0 {
        return Err(PlanError::Invalid("iterations must be >= 1".into()));
    }
    if !(cfg.t0 > 0.0 && cfg.t_min > 0.0 && cfg.cooling > 0.0 && cfg.cooling <= 1.0) {
        return Err(PlanError::Invalid(
            "temperature schedule must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grid = device_grid(ctx.cluster);
    let (start, initial_cost) = initial_strategy(ctx, cfg.max_params_per_device)?;
    let mut state = AnnealState::new(start, initial_cost, cfg.t0);
    let mut steps = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let proposal = (0..cfg.max_retries.max(1)).find_map(|_| {
            propose(
                ctx,
                &grid,
                state.current.degrees,
                cfg.max_params_per_device,
                &mut rng,
            )
            .ok()
        });
        let mut step = AnnealStep {
            iteration,
            temperature: state.temperature,
            degrees: None,
            mbs: None,
            proposed_cost: None,
            accepted: false,
            current_cost: state.current_cost,
            best_cost: state.current_cost,
        };
        if let Some((next, next_cost)) = proposal {
            step.degrees = Some(next.degrees);
            step.mbs = Some(next.mbs);
            step.proposed_cost = Some(next_cost);
            let cost = state.current_cost.to_f64().unwrap_or(f64::INFINITY);
            let p = acceptance_probability(
                cost,
                next_cost.to_f64().unwrap_or(f64::INFINITY),
                state.temperature,
            );
            step.accepted = rng.gen::<f64>() < p;
            if step.accepted || cfg.record_all {
                state.record(next.clone(), next_cost);
            }
            if step.accepted {
                state.current = next;
                state.current_cost = next_cost;
            }
        }
        state.temperature = (state.temperature * cfg.cooling).max(cfg.t_min);
        step.current_cost = state.current_cost;
        step.best_cost = state.best_cost();
        steps.push(step);
    }

    let mut evaluated = Vec::with_capacity(state.best_record.len());
    for (s, _) in &state.best_record {
        evaluated.push((s.clone(), ctx.estimate(s)?));
    }
    let mut candidates = rank_records(evaluated);
    candidates.truncate(cfg.budget);
    let best = run_trials(ctx, &mut candidates, cfg.budget);
    Ok(AnnealOutcome {
        candidates,
        best,
        initial_cost,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Cluster, LayerSpec, ModelGraph, ProfileTable};

    #[test]
    fn improvement_always_accepted() {
        assert_eq!(acceptance_probability(2.0, 1.0, 0.5), 1.0);
        assert_eq!(acceptance_probability(2.0, 2.0, 0.5), 1.0);
    }

    #[test]
    fn ln2_above_current_is_a_coin_flip() {
        let t = 0.37;
        let p = acceptance_probability(1.0, 1.0 + t * std::f64::consts::LN_2, t);
        assert!((p - 0.5).abs() < 1e-12, "{p}");
    }

    fn toy() -> (ModelGraph<f64>, Cluster<f64>, ProfileTable<f64>) {
        let layers: Vec<LayerSpec<f64>> = (0..8)
            .map(|id| LayerSpec {
                id,
                kind: "block".into(),
                param_count: 1000,
                flops_per_sample: None,
            })
            .collect();
        let model = ModelGraph::new(layers, vec![1e6; 7]).unwrap();
        let cluster = Cluster::two_level(&[2, 2], "gpu", 1e10, 1e9).unwrap();
        let mut profile = ProfileTable::new();
        for layer in 0..8 {
            for tmp in [1, 2, 4] {
                for mbs in [1, 2, 4, 8] {
                    profile
                        .insert(layer, tmp, mbs, 0.01 * mbs as f64 / tmp as f64)
                        .unwrap();
                }
            }
        }
        (model, cluster, profile)
    }

    #[test]
    fn best_never_increases_and_is_reproducible() {
        let (m, c, p) = toy();
        let ctx = PlanContext::new(&m, &c, &p, 8);
        let cfg = AnnealConfig {
            iterations: 60,
            seed: 7,
            budget: 5,
            ..Default::default()
        };
        let a = anneal(&ctx, &cfg).unwrap();
        let trace = a.best_trace();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(*trace.last().unwrap() <= a.initial_cost);
        assert!(a.candidates.len() <= 5);
        let b = anneal(&ctx, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_iterations_rejected() {
        let (m, c, p) = toy();
        let ctx = PlanContext::new(&m, &c, &p, 8);
        assert!(anneal(
            &ctx,
            &AnnealConfig {
                iterations: 0,
                ..Default::default()
            }
        )
        .is_err());
    }
}

//! Analytic iteration-time estimator.
//!
//! The estimate decomposes into the slowest data-parallel pipeline plus the
//! slowest per-device gradient all-reduce:
//!
//! ```text
//! T     = max_r T_pp(r) + max_d T_sync(d)
//! T_pp  = (gas - 1) * max_i t_i + sum_i e_i + sum_i t_i
//! T_ar  = 2 (n - 1) M / (n B)
//! ```
//!
//! Bandwidth-only: there is no latency term and no contention between
//! concurrent collectives.

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::scalar::Scalar;
use crate::types::{ensure_valid, Cluster, LayerSpec, ModelGraph, ProfileTable, Strategy};

/// Ring all-reduce time for `n` workers exchanging `message` bytes at `bandwidth` bytes/s.
pub fn allreduce_time<T: Scalar>(n: usize, message: T, bandwidth: T) -> Result<T> {
    check_bandwidth(bandwidth)?;
    if n <= 1 || bandwidth.is_infinite() {
        return Ok(T::zero());
    }
    let n_t = T::from_count(n);
    Ok(T::lit(2.0) * T::from_count(n - 1) * message / (n_t * bandwidth))
}

/// Point-to-point transfer time `v / b`; zero for the infinite self-bandwidth.
pub fn p2p_time<T: Scalar>(volume: T, bandwidth: T) -> Result<T> {
    check_bandwidth(bandwidth)?;
    if bandwidth.is_infinite() {
        return Ok(T::zero());
    }
    Ok(volume / bandwidth)
}

fn check_bandwidth<T: Scalar>(b: T) -> Result<()> {
    if b > T::zero() {
        Ok(())
    } else {
        Err(PlanError::InvalidBandwidth(b.to_f64().unwrap_or(f64::NAN)))
    }
}

/// Single-pipeline time for per-stage times `t` and per-boundary times `e`.
pub fn pipeline_time<T: Scalar>(stage_times: &[T], edge_times: &[T], gas: usize) -> Result<T> {
    if stage_times.is_empty() {
        return Err(PlanError::Invalid(
            "pipeline needs at least one stage".into(),
        ));
    }
    if edge_times.len() + 1 != stage_times.len() {
        return Err(PlanError::LengthMismatch {
            left: edge_times.len() + 1,
            right: stage_times.len(),
        });
    }
    if gas == 0 {
        return Err(PlanError::Invalid("gas must be >= 1".into()));
    }
    let max_t = stage_times.iter().copied().fold(T::neg_infinity(), T::max);
    let sum_e: T = edge_times.iter().copied().sum();
    let sum_t: T = stage_times.iter().copied().sum();
    Ok(T::from_count(gas - 1) * max_t + sum_e + sum_t)
}

/// A set of devices taking part in one collective.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGroup<T> {
    pub members: Vec<usize>,
    pub message_size: T,
    /// Minimum pairwise bandwidth over the members; `+inf` for a singleton.
    pub effective_bandwidth: T,
}

impl<T: Scalar> CommGroup<T> {
    pub fn new(members: Vec<usize>, message_size: T, cluster: &Cluster<T>) -> Self {
        let effective_bandwidth = cluster.min_bandwidth(&members);
        Self {
            members,
            message_size,
            effective_bandwidth,
        }
    }

    /// A group of `n` devices with uniform bandwidth, not tied to a cluster.
    pub fn uniform(n: usize, message_size: T, bandwidth: T) -> Self {
        let effective_bandwidth = if n > 1 { bandwidth } else { T::infinity() };
        Self {
            members: (0..n).collect(),
            message_size,
            effective_bandwidth,
        }
    }

    pub fn allreduce_time(&self) -> Result<T> {
        allreduce_time(
            self.members.len(),
            self.message_size,
            self.effective_bandwidth,
        )
    }
}

/// Bytes leaving `layer` per sample; the last layer reuses its input volume.
pub fn layer_activation_bytes<T: Scalar>(model: &ModelGraph<T>, layer: usize) -> T {
    let v = &model.activation_volumes;
    if layer < v.len() {
        v[layer]
    } else {
        v.last().copied().unwrap_or_else(T::zero)
    }
}

/// FLOP-count estimate of one layer's per-micro-batch time at a TMP degree.
///
/// `comm` describes the tensor-parallel group; its message size should be the
/// micro-batch's activation bytes. Only used when the profile has no entry.
pub fn analytic_layer_time<T: Scalar>(
    layer: &LayerSpec<T>,
    tmp: usize,
    mbs: usize,
    device_flops: T,
    comm: &CommGroup<T>,
) -> Result<T> {
    let flops = layer.flops_per_sample.ok_or(PlanError::ProfileMiss {
        layer: layer.id,
        tmp,
        mbs,
    })?;
    if device_flops.is_nan() || device_flops <= T::zero() {
        return Err(PlanError::Invalid("device_flops must be > 0".into()));
    }
    let compute = T::from_count(mbs) * flops / (T::from_count(tmp) * device_flops);
    let comm_time = allreduce_time(tmp, comm.message_size, comm.effective_bandwidth)?;
    Ok(compute + comm_time)
}

/// Profile table filled from [`analytic_layer_time`] for every layer and
/// `(tmp, mbs)` pair, with TMP all-reduces at a uniform `bandwidth`.
pub fn synthetic_profile<T: Scalar>(
    model: &ModelGraph<T>,
    tmps: &[usize],
    mbss: &[usize],
    device_flops: T,
    bandwidth: T,
) -> Result<ProfileTable<T>> {
    let mut table = ProfileTable::new();
    for (i, layer) in model.layers.iter().enumerate() {
        for &tmp in tmps {
            for &mbs in mbss {
                if tmp == 0 || mbs == 0 {
                    return Err(PlanError::Invalid("tmp and mbs must be >= 1".into()));
                }
                let message = T::from_count(mbs) * layer_activation_bytes(model, i);
                let comm = CommGroup::uniform(tmp, message, bandwidth);
                table.insert(
                    i,
                    tmp,
                    mbs,
                    analytic_layer_time(layer, tmp, mbs, device_flops, &comm)?,
                )?;
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FallbackConfig<T> {
    /// Sustained floating-point rate of one device, FLOP/s.
    pub device_flops: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CostConfig<T> {
    pub bytes_per_param: T,
    /// When set, profile misses are filled in by [`analytic_layer_time`].
    pub fallback: Option<FallbackConfig<T>>,
}

impl<T: Scalar> Default for CostConfig<T> {
    fn default() -> Self {
        Self {
            bytes_per_param: T::lit(2.0),
            fallback: None,
        }
    }
}

/// Resolves per-layer times from the profile table, with the optional
/// analytic fallback evaluated against a fixed TMP-group bandwidth.
#[derive(Debug, Clone, Copy)]
pub struct LayerTimer<'a, T> {
    model: &'a ModelGraph<T>,
    profile: &'a ProfileTable<T>,
    fallback: Option<FallbackConfig<T>>,
    tmp_bandwidth: T,
}

impl<'a, T: Scalar> LayerTimer<'a, T> {
    pub fn new(
        model: &'a ModelGraph<T>,
        profile: &'a ProfileTable<T>,
        fallback: Option<FallbackConfig<T>>,
        tmp_bandwidth: T,
    ) -> Self {
        Self {
            model,
            profile,
            fallback,
            tmp_bandwidth,
        }
    }

    pub fn model(&self) -> &'a ModelGraph<T> {
        self.model
    }

    pub fn layer_time(&self, layer: usize, tmp: usize, mbs: usize) -> Result<T> {
        if let Some(t) = self.profile.get(layer, tmp, mbs) {
            return Ok(t);
        }
        match self.fallback {
            Some(fb) => {
                let message = T::from_count(mbs) * layer_activation_bytes(self.model, layer);
                let comm = CommGroup::uniform(tmp, message, self.tmp_bandwidth);
                analytic_layer_time(&self.model.layers[layer], tmp, mbs, fb.device_flops, &comm)
            }
            None => Err(PlanError::ProfileMiss { layer, tmp, mbs }),
        }
    }
}

/// Sum of layer times over a stage's contiguous layer range.
pub fn stage_time<T: Scalar>(
    stage_layers: std::ops::Range<usize>,
    tmp: usize,
    mbs: usize,
    timer: &LayerTimer<'_, T>,
) -> Result<T> {
    if stage_layers.is_empty() {
        return Err(PlanError::Invalid(
            "stage must own at least one layer".into(),
        ));
    }
    stage_layers.map(|l| timer.layer_time(l, tmp, mbs)).sum()
}

/// Slowest TMP group bandwidth across the whole placement.
pub fn tmp_bandwidth<T: Scalar>(s: &Strategy, cluster: &Cluster<T>) -> T {
    let d = s.degrees;
    let mut min = T::infinity();
    for stage in 0..d.pp {
        for replica in 0..d.dp {
            min = min.min(cluster.min_bandwidth(&s.placement.tmp_group(&d, stage, replica)));
        }
    }
    min
}

/// Boundary time between `stage` and `stage + 1` for one replica: the
/// activation of the boundary layer over the slowest corresponding shard pair.
pub fn replica_edge_time<T: Scalar>(
    s: &Strategy,
    model: &ModelGraph<T>,
    cluster: &Cluster<T>,
    replica: usize,
    stage: usize,
    boundary: usize,
) -> Result<T> {
    let d = s.degrees;
    let volume = model.activation_volumes[boundary - 1] * T::from_count(s.mbs);
    let mut worst = T::zero();
    for shard in 0..d.tmp {
        let a = s.placement.device(&d, stage, replica, shard);
        let b = s.placement.device(&d, stage + 1, replica, shard);
        worst = worst.max(p2p_time(volume, cluster.bandwidth(a, b))?);
    }
    Ok(worst)
}

/// Per-replica edge times for the strategy's own assignment.
pub fn replica_edge_times<T: Scalar>(
    s: &Strategy,
    model: &ModelGraph<T>,
    cluster: &Cluster<T>,
    replica: usize,
) -> Result<Vec<T>> {
    s.assignment
        .boundaries()
        .iter()
        .enumerate()
        .map(|(stage, &boundary)| replica_edge_time(s, model, cluster, replica, stage, boundary))
        .collect()
}

/// Gradient synchronisation: the slowest device's data-parallel all-reduce.
pub fn dpsync_time<T: Scalar>(
    s: &Strategy,
    model: &ModelGraph<T>,
    cluster: &Cluster<T>,
    bytes_per_param: T,
) -> Result<T> {
    let d = s.degrees;
    if d.dp <= 1 {
        return Ok(T::zero());
    }
    let mut worst = T::zero();
    for (stage, range) in s.assignment.stage_ranges().enumerate() {
        let params = T::lit(model.params_in(range) as f64);
        let message = params * bytes_per_param / T::from_count(d.tmp);
        for shard in 0..d.tmp {
            let group = CommGroup::new(s.placement.dp_group(&d, stage, shard), message, cluster);
            worst = worst.max(group.allreduce_time()?);
        }
    }
    Ok(worst)
}

/// Estimated iteration time with every intermediate term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CostBreakdown<T> {
    pub total: T,
    pub pipeline_time: T,
    pub dpsync_time: T,
    pub gas: usize,
    pub per_stage_times: Vec<T>,
    /// Edge times of the critical (slowest) replica.
    pub per_edge_times: Vec<T>,
    pub critical_replica: usize,
    pub replica_pipeline_times: Vec<T>,
}

impl<T: Scalar> CostBreakdown<T> {
    /// Recomputes the pipeline term from the stored stage and edge times.
    pub fn recomputed_pipeline_time(&self) -> Result<T> {
        pipeline_time(&self.per_stage_times, &self.per_edge_times, self.gas)
    }
}

/// Everything the estimator needs besides the strategy itself.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a, T> {
    pub model: &'a ModelGraph<T>,
    pub cluster: &'a Cluster<T>,
    pub profile: &'a ProfileTable<T>,
    pub gbs: usize,
    pub cost: CostConfig<T>,
}

impl<'a, T: Scalar> PlanContext<'a, T> {
    pub fn new(
        model: &'a ModelGraph<T>,
        cluster: &'a Cluster<T>,
        profile: &'a ProfileTable<T>,
        gbs: usize,
    ) -> Self {
        Self {
            model,
            cluster,
            profile,
            gbs,
            cost: CostConfig::default(),
        }
    }

    pub fn with_cost(mut self, cost: CostConfig<T>) -> Self {
        self.cost = cost;
        self
    }

    pub fn layer_timer(&self, s: &Strategy) -> LayerTimer<'a, T> {
        let bw = if self.cost.fallback.is_some() {
            tmp_bandwidth(s, self.cluster)
        } else {
            T::infinity()
        };
        LayerTimer::new(self.model, self.profile, self.cost.fallback, bw)
    }

    pub fn stage_times(&self, s: &Strategy) -> Result<Vec<T>> {
        let timer = self.layer_timer(s);
        s.assignment
            .stage_ranges()
            .map(|r| stage_time(r, s.degrees.tmp, s.mbs, &timer))
            .collect()
    }

    pub fn estimate(&self, s: &Strategy) -> Result<CostBreakdown<T>> {
        estimate(
            s,
            self.model,
            self.cluster,
            self.profile,
            self.gbs,
            &self.cost,
        )
    }
}

/// Full cost-model evaluation of a strategy.
pub fn estimate<T: Scalar>(
    s: &Strategy,
    model: &ModelGraph<T>,
    cluster: &Cluster<T>,
    profile: &ProfileTable<T>,
    gbs: usize,
    cfg: &CostConfig<T>,
) -> Result<CostBreakdown<T>> {
    let gas = ensure_valid(s, model, cluster, gbs)?;
    let ctx = PlanContext {
        model,
        cluster,
        profile,
        gbs,
        cost: *cfg,
    };
    let per_stage_times = ctx.stage_times(s)?;

    let mut replica_pipeline_times = Vec::with_capacity(s.degrees.dp);
    let mut critical: Option<(usize, T, Vec<T>)> = None;
    for replica in 0..s.degrees.dp {
        let edges = replica_edge_times(s, model, cluster, replica)?;
        let t = pipeline_time(&per_stage_times, &edges, gas)?;
        replica_pipeline_times.push(t);
        if critical.as_ref().is_none_or(|(_, best, _)| t > *best) {
            critical = Some((replica, t, edges));
        }
    }
    let (critical_replica, pipeline, per_edge_times) = critical.expect("dp >= 1");
    let dpsync = dpsync_time(s, model, cluster, cfg.bytes_per_param)?;
    Ok(CostBreakdown {
        total: pipeline + dpsync,
        pipeline_time: pipeline,
        dpsync_time: dpsync,
        gas,
        per_stage_times,
        per_edge_times,
        critical_replica,
        replica_pipeline_times,
    })
}

//! Optimal pipeline layer assignment.
//!
//! Minimises `(gas - 1) * max_j t_j + sum e + sum t` over contiguous cuts of a
//! layer chain into `k` non-empty stages. The max term is handled with a
//! tolerance `m` ranging over every achievable stage time: the table holds
//! the best cost of `(gas - 1) * max(0, max_j t_j - m) + sum e + sum t` for a
//! prefix of `i` layers split into `j` stages, and the answer is the `m = 0`
//! cell at `(L, k)`. Extending a solution by a last stage of time `t2` reads
//! the prefix cell at tolerance `max(t2, m)`, which is exact because
//! `max(0, t1 - max(t2, m)) + max(0, t2 - m) == max(0, max(t1, t2) - m)`
//! (see [`claim_identity`]).
//!
//! Stages are indexed `1..=k` in the table; `k = 1` is the base case.
//! Runtime is `O(k L^4)`, memory `O(k L^3)` (costs and backpointers only).

use crate::cost::{pipeline_time, LayerTimer};
use crate::error::{PlanError, Result};
use crate::scalar::{pos, Scalar};
use crate::types::LayerAssignment;

/// Default layer cap for [`brute_force_assignment`].
pub const BRUTE_FORCE_CAP: usize = 14;

/// Prefix sums of per-layer times; `segment(a, b)` is the time of layers `a..b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentTimes<T> {
    prefix: Vec<T>,
}

impl<T: Scalar> SegmentTimes<T> {
    pub fn from_layer_times(times: &[T]) -> Self {
        let mut prefix = Vec::with_capacity(times.len() + 1);
        let mut acc = T::zero();
        prefix.push(acc);
        for &t in times {
            acc = acc + t;
            prefix.push(acc);
        }
        Self { prefix }
    }

    pub fn num_layers(&self) -> usize {
        self.prefix.len() - 1
    }

    #[inline]
    pub fn segment(&self, a: usize, b: usize) -> T {
        if b <= a {
            T::zero()
        } else {
            self.prefix[b] - self.prefix[a]
        }
    }
}

/// Per-layer times of the whole chain at one `(tmp, mbs)` setting.
pub fn segment_times<T: Scalar>(
    tmp: usize,
    mbs: usize,
    timer: &LayerTimer<'_, T>,
) -> Result<SegmentTimes<T>> {
    let times = (0..timer.model().num_layers())
        .map(|l| timer.layer_time(l, tmp, mbs))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentTimes::from_layer_times(&times))
}

/// Sorted, deduplicated set `{0} ∪ {segment(a, b)}` with the rank of every
/// segment precomputed, so `max(t2, m)` is an index max, not a float lookup.
#[derive(Debug, Clone)]
pub struct ToleranceDomain<T> {
    values: Vec<T>,
    seg_rank: Vec<u32>,
    stride: usize,
}

impl<T: Scalar> ToleranceDomain<T> {
    pub fn new(seg: &SegmentTimes<T>) -> Self {
        let l = seg.num_layers();
        let stride = l + 1;
        let mut values = Vec::with_capacity(1 + l * (l + 1) / 2);
        values.push(T::zero());
        for a in 0..l {
            for b in (a + 1)..=l {
                values.push(seg.segment(a, b));
            }
        }
        values.sort_by(|x, y| x.cmp_total(y));
        values.dedup();
        let mut seg_rank = vec![0u32; stride * stride];
        for a in 0..l {
            for b in (a + 1)..=l {
                let v = seg.segment(a, b);
                let r = values
                    .binary_search_by(|x| x.cmp_total(&v))
                    .expect("segment value in domain");
                seg_rank[a * stride + b] = r as u32;
            }
        }
        Self {
            values,
            seg_rank,
            stride,
        }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rank of `segment(a, b)` in [`values`](Self::values).
    #[inline]
    pub fn rank_of_segment(&self, a: usize, b: usize) -> usize {
        self.seg_rank[a * self.stride + b] as usize
    }

    /// Rank of zero; zero is the smallest member since layer times are non-negative.
    pub fn zero_rank(&self) -> usize {
        self.values
            .iter()
            .position(|v| *v == T::zero())
            .expect("domain contains 0")
    }
}

/// `(left, right)` of the tolerance identity; equal for all non-negative inputs.
pub fn claim_identity<T: Scalar>(t1: T, t2: T, m: T) -> (T, T) {
    let left = pos(t1 - t2.max(m)) + pos(t2 - m);
    let right = pos(t1.max(t2) - m);
    (left, right)
}

fn edge_table<T, F>(l: usize, k: usize, mut edge: F) -> Result<Vec<Vec<T>>>
where
    T: Scalar,
    F: FnMut(usize, usize) -> Result<T>,
{
    // edges[sender_stage][boundary]
    let mut table = vec![vec![T::zero(); l + 1]; k.saturating_sub(1)];
    for (sender, row) in table.iter_mut().enumerate() {
        for (boundary, cell) in row.iter_mut().enumerate().take(l).skip(1) {
            *cell = edge(boundary, sender)?;
        }
    }
    Ok(table)
}

fn check_shape(l: usize, k: usize, gas: usize) -> Result<()> {
    if k == 0 {
        return Err(PlanError::Invalid("stage count must be >= 1".into()));
    }
    if k > l {
        return Err(PlanError::Infeasible(format!(
            "{k} stages over {l} layers leaves a stage empty"
        )));
    }
    if gas == 0 {
        return Err(PlanError::Invalid("gas must be >= 1".into()));
    }
    Ok(())
}

/// Optimal contiguous assignment of the chain into `k` stages.
///
/// `edge(boundary, stage)` gives the transfer time when layer `boundary` is
/// the first layer of stage `stage + 1` (0-based), so placement-dependent
/// boundaries are supported. Ties prefer the earliest last cut.
pub fn optimal_assignment<T, F>(
    seg: &SegmentTimes<T>,
    k: usize,
    gas: usize,
    edge: F,
) -> Result<(LayerAssignment, T)>
where
    T: Scalar,
    F: FnMut(usize, usize) -> Result<T>,
{
    let l = seg.num_layers();
    check_shape(l, k, gas)?;
    let edges = edge_table(l, k, edge)?;
    let domain = ToleranceDomain::new(seg);
    let nm = domain.len();
    let width = (l + 1) * nm;
    let g1 = T::from_count(gas - 1);
    let zero_m = domain.zero_rank();

    let mut cost = vec![T::infinity(); k * width];
    let mut back = vec![u32::MAX; k * width];
    let at = |j: usize, i: usize, m: usize| (j - 1) * width + i * nm + m;

    // base case: one stage holding the first i layers
    for i in 1..=(l - (k - 1)) {
        let t1 = seg.segment(0, i);
        for (mi, &m) in domain.values().iter().enumerate() {
            cost[at(1, i, mi)] = g1 * pos(t1 - m) + t1;
            back[at(1, i, mi)] = 0;
        }
    }

    for j in 2..=k {
        let last = j == k;
        let i_lo = if last { l } else { j };
        let i_hi = l - (k - j);
        let edge_row = &edges[j - 2];
        for i in i_lo..=i_hi {
            let m_range = if last { zero_m..zero_m + 1 } else { 0..nm };
            for mi in m_range {
                let m = domain.values()[mi];
                let mut best = T::infinity();
                let mut best_cut = u32::MAX;
                for cut in (j - 1)..i {
                    let t2 = seg.segment(cut, i);
                    let lookup = domain.rank_of_segment(cut, i).max(mi);
                    let prev = cost[at(j - 1, cut, lookup)];
                    let g = prev + g1 * pos(t2 - m) + t2 + edge_row[cut];
                    if g < best {
                        best = g;
                        best_cut = cut as u32;
                    }
                }
                cost[at(j, i, mi)] = best;
                back[at(j, i, mi)] = best_cut;
            }
        }
    }

    let total = cost[at(k, l, zero_m)];
    let mut cuts = vec![l];
    let (mut i, mut mi) = (l, zero_m);
    for j in (2..=k).rev() {
        let cut = back[at(j, i, mi)] as usize;
        mi = domain.rank_of_segment(cut, i).max(mi);
        i = cut;
        cuts.push(cut);
    }
    cuts.push(0);
    cuts.reverse();
    Ok((LayerAssignment::new(cuts), total))
}

/// Direct evaluation of the pipeline objective for an assignment.
pub fn evaluate_assignment<T, F>(
    seg: &SegmentTimes<T>,
    assignment: &LayerAssignment,
    gas: usize,
    mut edge: F,
) -> Result<T>
where
    T: Scalar,
    F: FnMut(usize, usize) -> Result<T>,
{
    let stage_times: Vec<T> = assignment
        .stage_ranges()
        .map(|r| seg.segment(r.start, r.end))
        .collect();
    let edge_times = assignment
        .boundaries()
        .iter()
        .enumerate()
        .map(|(stage, &b)| edge(b, stage))
        .collect::<Result<Vec<_>>>()?;
    pipeline_time(&stage_times, &edge_times, gas)
}

/// Exhaustive search over all `C(L-1, k-1)` cut sets. Refuses chains longer than `cap`.
pub fn brute_force_assignment<T, F>(
    seg: &SegmentTimes<T>,
    k: usize,
    gas: usize,
    edge: F,
    cap: usize,
) -> Result<(LayerAssignment, T)>
where
    T: Scalar,
    F: FnMut(usize, usize) -> Result<T>,
{
    let l = seg.num_layers();
    if l > cap {
        return Err(PlanError::BruteForceCap { layers: l, cap });
    }
    check_shape(l, k, gas)?;
    let edges = edge_table(l, k, edge)?;
    let lookup = |b: usize, stage: usize| Ok(edges[stage][b]);

    // interior cuts as the lexicographically first combination of 1..L
    let mut inner: Vec<usize> = (1..k).collect();
    let mut best: Option<(LayerAssignment, T)> = None;
    loop {
        let mut cuts = Vec::with_capacity(k + 1);
        cuts.push(0);
        cuts.extend_from_slice(&inner);
        cuts.push(l);
        let a = LayerAssignment::new(cuts);
        let c = evaluate_assignment(seg, &a, gas, lookup)?;
        if best.as_ref().is_none_or(|(_, b)| c < *b) {
            best = Some((a, c));
        }
        // next combination
        let r = inner.len();
        let mut pos_i = r;
        while pos_i > 0 && inner[pos_i - 1] == l - 1 - (r - pos_i) {
            pos_i -= 1;
        }
        if pos_i == 0 {
            break;
        }
        inner[pos_i - 1] += 1;
        for q in pos_i..r {
            inner[q] = inner[q - 1] + 1;
        }
    }
    Ok(best.expect("at least one assignment"))
}

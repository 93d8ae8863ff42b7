//! Shared domain model: layer chains, clusters, profile tables and strategies,
//! plus loading and saving of the JSON file formats.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LayerSpec<T> {
    pub id: usize,
    pub kind: String,
    pub param_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops_per_sample: Option<T>,
}

/// A model as an ordered chain of layers.
///
/// `activation_volumes[i]` is the number of bytes per sample flowing from
/// layer `i` to layer `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelGraph<T> {
    pub layers: Vec<LayerSpec<T>>,
    pub activation_volumes: Vec<T>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new(layers: Vec<LayerSpec<T>>, activation_volumes: Vec<T>) -> Result<Self> {
        let model = Self {
            layers,
            activation_volumes,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.layers.len();
        if l == 0 {
            return Err(PlanError::Invalid(
                "model must have at least one layer (L >= 1)".into(),
            ));
        }
        if self.activation_volumes.len() != l - 1 {
            return Err(PlanError::Invalid(format!(
                "activation_volumes must have exactly L-1 = {} entries, found {}",
                l - 1,
                self.activation_volumes.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.id != i {
                return Err(PlanError::Invalid(format!(
                    "layer ids must be contiguous 0..L-1: position {i} has id {}",
                    layer.id
                )));
            }
            if let Some(f) = layer.flops_per_sample {
                if f < T::zero() || !f.is_finite() {
                    return Err(PlanError::Invalid(format!(
                        "layer {i}: flops_per_sample must be >= 0"
                    )));
                }
            }
        }
        for (i, v) in self.activation_volumes.iter().enumerate() {
            if *v < T::zero() || !v.is_finite() {
                return Err(PlanError::Invalid(format!(
                    "activation_volumes[{i}] must be a finite value >= 0, found {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params_in(&self, range: Range<usize>) -> u64 {
        self.layers[range].iter().map(|l| l.param_count).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.params_in(0..self.layers.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: usize,
    pub node_id: usize,
    pub device_type: String,
}

/// Devices with node membership and a symmetric bandwidth matrix in bytes/second.
///
/// The diagonal is `+inf`: a transfer from a device to itself is free. In
/// `cluster.json` the diagonal may be written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", try_from = "ClusterFile", into = "ClusterFile")]
pub struct Cluster<T> {
    devices: Vec<DeviceSpec>,
    bandwidth: Vec<Vec<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClusterFile {
    devices: Vec<DeviceSpec>,
    bandwidth: Vec<Vec<Option<f64>>>,
}

impl<T: Scalar> TryFrom<ClusterFile> for Cluster<T> {
    type Error = PlanError;

    fn try_from(file: ClusterFile) -> Result<Self> {
        let n = file.devices.len();
        if file.bandwidth.len() != n {
            return Err(PlanError::Invalid(format!(
                "bandwidth matrix has {} rows but there are {n} devices",
                file.bandwidth.len()
            )));
        }
        let mut bandwidth = vec![vec![T::infinity(); n]; n];
        for (i, row) in file.bandwidth.iter().enumerate() {
            if row.len() != n {
                return Err(PlanError::Invalid(format!(
                    "bandwidth row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, b) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                match b {
                    Some(b) => bandwidth[i][j] = T::lit(*b),
                    None => {
                        return Err(PlanError::Invalid(format!(
                            "bandwidth ({i},{j}) is null; only the diagonal may be omitted"
                        )))
                    }
                }
            }
        }
        Cluster::new(file.devices, bandwidth)
    }
}

impl<T: Scalar> From<Cluster<T>> for ClusterFile {
    fn from(c: Cluster<T>) -> Self {
        let bandwidth = c
            .bandwidth
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, b)| if i == j { None } else { b.to_f64() })
                    .collect()
            })
            .collect();
        ClusterFile {
            devices: c.devices,
            bandwidth,
        }
    }
}

impl<T: Scalar> Cluster<T> {
    /// Builds a cluster; the diagonal of `bandwidth` is ignored and set to `+inf`.
    pub fn new(devices: Vec<DeviceSpec>, mut bandwidth: Vec<Vec<T>>) -> Result<Self> {
        let n = devices.len();
        if n == 0 {
            return Err(PlanError::Invalid(
                "cluster must have at least one device".into(),
            ));
        }
        for (i, d) in devices.iter().enumerate() {
            if d.id != i {
                return Err(PlanError::Invalid(format!(
                    "device ids must be contiguous 0..|D|-1: position {i} has id {}",
                    d.id
                )));
            }
        }
        if bandwidth.len() != n || bandwidth.iter().any(|r| r.len() != n) {
            return Err(PlanError::Invalid(format!(
                "bandwidth matrix must be {n}x{n}"
            )));
        }
        for (i, row) in bandwidth.iter_mut().enumerate() {
            row[i] = T::infinity();
        }
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (bandwidth[i][j], bandwidth[j][i]);
                if a != b {
                    return Err(PlanError::Invalid(format!(
                        "bandwidth matrix not symmetric at ({i},{j}): {a} != {b}"
                    )));
                }
                if a <= T::zero() || !a.is_finite() {
                    return Err(PlanError::Invalid(format!(
                        "bandwidth ({i},{j}) must be finite and > 0, found {a}"
                    )));
                }
            }
        }
        Ok(Self { devices, bandwidth })
    }

    /// Uniform bandwidth inside a node and between nodes. `node_sizes` lists
    /// the device count of each node in order.
    pub fn two_level(node_sizes: &[usize], device_type: &str, intra: T, inter: T) -> Result<Self> {
        let devices: Vec<DeviceSpec> = node_sizes
            .iter()
            .enumerate()
            .flat_map(|(node, &size)| std::iter::repeat_n(node, size))
            .enumerate()
            .map(|(id, node_id)| DeviceSpec {
                id,
                node_id,
                device_type: device_type.to_string(),
            })
            .collect();
        let n = devices.len();
        let bandwidth = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if devices[i].node_id == devices[j].node_id {
                            intra
                        } else {
                            inter
                        }
                    })
                    .collect()
            })
            .collect();
        Self::new(devices, bandwidth)
    }

    pub fn devices(&self) -> &[DeviceSpec] {
        &self.devices
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    #[inline]
    pub fn bandwidth(&self, a: usize, b: usize) -> T {
        self.bandwidth[a][b]
    }

    pub fn node_of(&self, device: usize) -> usize {
        self.devices[device].node_id
    }

    /// Devices grouped by node, nodes in ascending `node_id` order.
    pub fn nodes(&self) -> Vec<Vec<usize>> {
        let mut by_node: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for d in &self.devices {
            by_node.entry(d.node_id).or_default().push(d.id);
        }
        by_node.into_values().collect()
    }

    pub fn min_node_size(&self) -> usize {
        self.nodes().iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Minimum pairwise bandwidth inside `members`; `+inf` for fewer than two members.
    pub fn min_bandwidth(&self, members: &[usize]) -> T {
        let mut min = T::infinity();
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                if a != b {
                    min = min.min(self.bandwidth[a][b]);
                }
            }
        }
        min
    }

    /// Returns a copy with every off-diagonal bandwidth multiplied by `factor`.
    pub fn scale_bandwidth(&self, factor: T) -> Self {
        let bandwidth = self
            .bandwidth
            .iter()
            .map(|row| row.iter().map(|&b| b * factor).collect())
            .collect();
        Self {
            devices: self.devices.clone(),
            bandwidth,
        }
    }
}

/// Per-micro-batch forward+backward time of each layer, keyed by
/// `(layer, tmp, mbs)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(
    bound = "T: Scalar",
    try_from = "ProfileFile<T>",
    into = "ProfileFile<T>"
)]
pub struct ProfileTable<T> {
    entries: BTreeMap<(usize, usize, usize), T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ProfileFile<T> {
    entries: Vec<ProfileEntry<T>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct ProfileEntry<T> {
    layer: usize,
    tmp: usize,
    mbs: usize,
    seconds: T,
}

impl<T: Scalar> TryFrom<ProfileFile<T>> for ProfileTable<T> {
    type Error = PlanError;

    fn try_from(file: ProfileFile<T>) -> Result<Self> {
        let mut table = ProfileTable::new();
        for e in file.entries {
            table.insert(e.layer, e.tmp, e.mbs, e.seconds)?;
        }
        Ok(table)
    }
}

impl<T: Scalar> From<ProfileTable<T>> for ProfileFile<T> {
    fn from(t: ProfileTable<T>) -> Self {
        let entries = t
            .entries
            .into_iter()
            .map(|((layer, tmp, mbs), seconds)| ProfileEntry {
                layer,
                tmp,
                mbs,
                seconds,
            })
            .collect();
        ProfileFile { entries }
    }
}

impl<T: Scalar> ProfileTable<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, layer: usize, tmp: usize, mbs: usize, seconds: T) -> Result<()> {
        if seconds < T::zero() || !seconds.is_finite() {
            return Err(PlanError::Invalid(format!(
                "profile time for (layer={layer}, tmp={tmp}, mbs={mbs}) must be finite and >= 0"
            )));
        }
        self.entries.insert((layer, tmp, mbs), seconds);
        Ok(())
    }

    pub fn get(&self, layer: usize, tmp: usize, mbs: usize) -> Option<T> {
        self.entries.get(&(layer, tmp, mbs)).copied()
    }

    pub fn lookup(&self, layer: usize, tmp: usize, mbs: usize) -> Result<T> {
        self.get(layer, tmp, mbs)
            .ok_or(PlanError::ProfileMiss { layer, tmp, mbs })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_layer(&mut self, layer: usize) {
        self.entries.retain(|&(l, _, _), _| l != layer);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelismDegrees {
    pub pp: usize,
    pub dp: usize,
    pub tmp: usize,
}

impl ParallelismDegrees {
    pub const fn new(pp: usize, dp: usize, tmp: usize) -> Self {
        Self { pp, dp, tmp }
    }

    pub const fn world_size(&self) -> usize {
        self.pp * self.dp * self.tmp
    }

    /// Index of a virtual rank: shard varies fastest, then replica, then stage.
    #[inline]
    pub const fn rank_index(&self, stage: usize, replica: usize, shard: usize) -> usize {
        (stage * self.dp + replica) * self.tmp + shard
    }
}

impl fmt::Display for ParallelismDegrees {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(pp={}, dp={}, tmp={})", self.pp, self.dp, self.tmp)
    }
}

/// Mapping from virtual rank to device, indexed by
/// [`ParallelismDegrees::rank_index`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Placement {
    pub rank_to_device: Vec<usize>,
}

impl Placement {
    pub fn new(rank_to_device: Vec<usize>) -> Self {
        Self { rank_to_device }
    }

    #[inline]
    pub fn device(
        &self,
        d: &ParallelismDegrees,
        stage: usize,
        replica: usize,
        shard: usize,
    ) -> usize {
        self.rank_to_device[d.rank_index(stage, replica, shard)]
    }

    /// The `tmp` devices sharing a stage and replica.
    pub fn tmp_group(&self, d: &ParallelismDegrees, stage: usize, replica: usize) -> Vec<usize> {
        (0..d.tmp)
            .map(|s| self.device(d, stage, replica, s))
            .collect()
    }

    /// The `dp` devices sharing a stage and shard.
    pub fn dp_group(&self, d: &ParallelismDegrees, stage: usize, shard: usize) -> Vec<usize> {
        (0..d.dp).map(|r| self.device(d, stage, r, shard)).collect()
    }

    /// True iff every device in `0..num_devices` appears exactly once.
    pub fn is_bijective(&self, num_devices: usize) -> bool {
        if self.rank_to_device.len() != num_devices {
            return false;
        }
        let mut seen = vec![false; num_devices];
        for &d in &self.rank_to_device {
            if d >= num_devices || seen[d] {
                return false;
            }
            seen[d] = true;
        }
        true
    }
}

/// Stage boundaries `[0 = s_0 < s_1 < ... < s_pp = L]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerAssignment {
    pub cuts: Vec<usize>,
}

impl LayerAssignment {
    pub fn new(cuts: Vec<usize>) -> Self {
        Self { cuts }
    }

    pub fn num_stages(&self) -> usize {
        self.cuts.len().saturating_sub(1)
    }

    pub fn stage_range(&self, stage: usize) -> Range<usize> {
        self.cuts[stage]..self.cuts[stage + 1]
    }

    pub fn stage_ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.cuts.windows(2).map(|w| w[0]..w[1])
    }

    /// Interior boundaries: the first layer of stages `1..pp`.
    pub fn boundaries(&self) -> &[usize] {
        if self.cuts.len() < 2 {
            &[]
        } else {
            &self.cuts[1..self.cuts.len() - 1]
        }
    }

    pub fn check(&self, num_layers: usize) -> std::result::Result<(), String> {
        if self.cuts.len() < 2 {
            return Err("assignment needs at least two cut boundaries".into());
        }
        if self.cuts[0] != 0 {
            return Err(format!("first cut must be 0, found {}", self.cuts[0]));
        }
        if *self.cuts.last().unwrap() != num_layers {
            return Err(format!(
                "last cut must equal L = {num_layers}, found {}",
                self.cuts.last().unwrap()
            ));
        }
        if let Some(w) = self.cuts.windows(2).find(|w| w[0] >= w[1]) {
            return Err(format!(
                "cuts must be strictly increasing (empty stage at {}..{})",
                w[0], w[1]
            ));
        }
        Ok(())
    }
}

/// The full plan: degrees, placement, micro-batch size and layer assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Strategy {
    pub degrees: ParallelismDegrees,
    pub placement: Placement,
    pub mbs: usize,
    pub assignment: LayerAssignment,
}

impl Strategy {
    /// Gradient accumulation steps, `gbs / (dp * mbs)`, if integral and >= 1.
    pub fn gas(&self, gbs: usize) -> Option<usize> {
        let per = self.degrees.dp.checked_mul(self.mbs)?;
        if per == 0 || !gbs.is_multiple_of(per) || gbs / per == 0 {
            None
        } else {
            Some(gbs / per)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroDegree(ParallelismDegrees),
    DegreeProduct {
        degrees: ParallelismDegrees,
        devices: usize,
    },
    PlacementSize {
        expected: usize,
        found: usize,
    },
    PlacementNotBijective,
    ZeroMicroBatch,
    BatchDivisibility {
        gbs: usize,
        dp: usize,
        mbs: usize,
    },
    StageCount {
        expected: usize,
        found: usize,
    },
    Assignment(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroDegree(d) => write!(f, "degrees {d} must all be >= 1"),
            Violation::DegreeProduct { degrees, devices } => write!(
                f,
                "pp x dp x tmp = {} does not equal |D| = {devices}",
                degrees.world_size()
            ),
            Violation::PlacementSize { expected, found } => {
                write!(f, "placement maps {found} ranks, expected {expected}")
            }
            Violation::PlacementNotBijective => {
                write!(f, "placement is not a bijection onto the devices")
            }
            Violation::ZeroMicroBatch => write!(f, "micro-batch size must be >= 1"),
            Violation::BatchDivisibility { gbs, dp, mbs } => write!(
                f,
                "gbs / dp = {gbs}/{dp} is not an integral multiple of mbs = {mbs}"
            ),
            Violation::StageCount { expected, found } => {
                write!(f, "assignment has {found} stages, expected pp = {expected}")
            }
            Violation::Assignment(msg) => write!(f, "layer assignment: {msg}"),
        }
    }
}

/// Checks every strategy invariant; an empty list means the strategy is valid.
pub fn validate_strategy<T: Scalar>(
    s: &Strategy,
    model: &ModelGraph<T>,
    cluster: &Cluster<T>,
    gbs: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let d = s.degrees;
    let n = cluster.num_devices();
    if d.pp == 0 || d.dp == 0 || d.tmp == 0 {
        out.push(Violation::ZeroDegree(d));
    }
    if d.world_size() != n {
        out.push(Violation::DegreeProduct {
            degrees: d,
            devices: n,
        });
    }
    if s.placement.rank_to_device.len() != n {
        out.push(Violation::PlacementSize {
            expected: n,
            found: s.placement.rank_to_device.len(),
        });
    } else if !s.placement.is_bijective(n) {
        out.push(Violation::PlacementNotBijective);
    }
    if s.mbs == 0 {
        out.push(Violation::ZeroMicroBatch);
    } else if d.dp > 0 && s.gas(gbs).is_none() {
        out.push(Violation::BatchDivisibility {
            gbs,
            dp: d.dp,
            mbs: s.mbs,
        });
    }
    if s.assignment.num_stages() != d.pp {
        out.push(Violation::StageCount {
            expected: d.pp,
            found: s.assignment.num_stages(),
        });
    }
    if let Err(msg) = s.assignment.check(model.num_layers()) {
        out.push(Violation::Assignment(msg));
    }
    out
}

/// Errors out with every violation joined, or returns gas.
pub fn ensure_valid<T: Scalar>(
    s: &Strategy,
    model: &ModelGraph<T>,
    cluster: &Cluster<T>,
    gbs: usize,
) -> Result<usize> {
    let v = validate_strategy(s, model, cluster, gbs);
    if v.is_empty() {
        Ok(s.gas(gbs).expect("validated"))
    } else {
        let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
        Err(PlanError::Invalid(msgs.join("; ")))
    }
}

pub fn load_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let text = fs::read_to_string(path).map_err(|source| PlanError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_json(path, &text)
}

pub fn parse_json<V: DeserializeOwned>(path: &Path, text: &str) -> Result<V> {
    serde_json::from_str(text).map_err(|e| PlanError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn save_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|source| PlanError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelGraph<T>> {
    let model: ModelGraph<T> = load_json(path)?;
    model.validate()?;
    Ok(model)
}

pub fn load_cluster<T: Scalar>(path: &Path) -> Result<Cluster<T>> {
    load_json(path)
}

pub fn load_profile<T: Scalar>(path: &Path) -> Result<ProfileTable<T>> {
    load_json(path)
}

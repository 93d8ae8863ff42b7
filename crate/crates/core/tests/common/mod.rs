#![allow(dead_code)]

use std::path::PathBuf;

use parplan::optimizer::divisors;
use parplan::types::{
    load_cluster, load_model, load_profile, Cluster, LayerSpec, ModelGraph, ProfileTable,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
pub struct Instance {
    pub model: ModelGraph<f64>,
    pub cluster: Cluster<f64>,
    pub profile: ProfileTable<f64>,
    pub gbs: usize,
}

pub fn model_from(params: &[u64], flops: &[f64], volumes: &[f64]) -> ModelGraph<f64> {
    let layers = params
        .iter()
        .zip(flops)
        .enumerate()
        .map(|(id, (&p, &f))| LayerSpec {
            id,
            kind: "layer".into(),
            param_count: p,
            flops_per_sample: Some(f),
        })
        .collect();
    ModelGraph::new(layers, volumes.to_vec()).unwrap()
}

/// Profile entries `base[layer] * mbs / tmp` for every divisor pair.
pub fn linear_profile(base: &[f64], n: usize, gbs: usize) -> ProfileTable<f64> {
    let mut p = ProfileTable::new();
    for (layer, &b) in base.iter().enumerate() {
        for tmp in divisors(n) {
            for mbs in divisors(gbs) {
                p.insert(layer, tmp, mbs, b * mbs as f64 / tmp as f64)
                    .unwrap();
            }
        }
    }
    p
}

prop_compose! {
    /// Small random planning instance: up to 3 nodes of 1, 2 or 4 devices.
    pub fn instance()(
        layers in 2usize..9,
        node_sizes in prop::collection::vec(prop::sample::select(vec![1usize, 2, 4]), 1..4),
        intra in 1e9f64..1e11,
        inter_frac in 0.05f64..1.0,
        gbs in prop::sample::select(vec![4usize, 8, 12, 16]),
    )(
        params in prop::collection::vec(1u64..10_000_000, layers),
        base in prop::collection::vec(1e-3f64..1e-1, layers),
        volumes in prop::collection::vec(1e5f64..1e8, layers - 1),
        node_sizes in Just(node_sizes),
        intra in Just(intra),
        inter in Just(intra * inter_frac),
        gbs in Just(gbs),
    ) -> Instance {
        let model = model_from(&params, &vec![1e9; params.len()], &volumes);
        let cluster = Cluster::two_level(&node_sizes, "gpu", intra, inter).unwrap();
        let profile = linear_profile(&base, cluster.num_devices(), gbs);
        Instance { model, cluster, profile, gbs }
    }
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

pub struct Scenario {
    pub name: &'static str,
    pub model: ModelGraph<f64>,
    pub cluster: Cluster<f64>,
    pub profile: ProfileTable<f64>,
    pub gbs: usize,
}

pub fn scenario(name: &'static str) -> Scenario {
    let dir = configs_dir().join(name);
    let gbs = if name == "hetero_model" { 64 } else { 32 };
    Scenario {
        name,
        model: load_model(&dir.join("model.json")).unwrap(),
        cluster: load_cluster(&dir.join("cluster.json")).unwrap(),
        profile: load_profile(&dir.join("profile.json")).unwrap(),
        gbs,
    }
}

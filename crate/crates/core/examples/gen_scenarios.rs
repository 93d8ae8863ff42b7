//! Regenerates the sample configurations under `configs/`.
//!
//! `cargo run --example gen_scenarios [OUT_DIR]`

use std::path::{Path, PathBuf};

use parplan::cost::synthetic_profile;
use parplan::types::{save_json, Cluster, DeviceSpec, LayerSpec, ModelGraph};

const GBPS: f64 = 1e9 / 8.0;
const FP16: f64 = 2.0;
const T4_FLOPS: f64 = 8e12;
const V100_FLOPS: f64 = 30e12;

fn layer(id: usize, kind: &str, params: u64, fwd_flops: f64) -> LayerSpec<f64> {
    // forward + backward
    LayerSpec {
        id,
        kind: kind.into(),
        param_count: params,
        flops_per_sample: Some(3.0 * fwd_flops),
    }
}

fn block_params(h: u64) -> u64 {
    12 * h * h + 13 * h
}

fn block_fwd_flops(h: f64, s: f64) -> f64 {
    24.0 * s * h * h + 4.0 * s * s * h
}

/// GPT-2 medium (H=1024, 24 blocks, 1024 tokens) as a 30-layer chain.
fn gpt2() -> ModelGraph<f64> {
    let (h, s, vocab) = (1024u64, 1024u64, 50257u64);
    let (hf, sf, vf) = (h as f64, s as f64, vocab as f64);
    let hidden = sf * hf * FP16;
    let mut layers = vec![
        layer(0, "token-embedding", vocab * h, sf * hf),
        layer(1, "position-embedding", s * h, sf * hf),
        layer(2, "embedding-dropout", 0, sf * hf),
    ];
    for i in 0..24 {
        layers.push(layer(
            3 + i,
            "transformer",
            block_params(h),
            block_fwd_flops(hf, sf),
        ));
    }
    layers.push(layer(27, "final-layernorm", 2 * h, 5.0 * sf * hf));
    layers.push(layer(28, "lm-head", 0, 2.0 * sf * hf * vf));
    layers.push(layer(29, "loss", 0, 3.0 * sf * vf));
    let mut volumes = vec![hidden; 28];
    volumes.push(sf * vf * FP16);
    ModelGraph::new(layers, volumes).expect("valid model")
}

/// Generator whose first 12 blocks are wide over few tokens and last 12 are
/// narrow over many tokens.
fn transgan() -> ModelGraph<f64> {
    let (wide_h, wide_s) = (1024.0, 256.0);
    let (narrow_h, narrow_s) = (16.0, 4096.0);
    let mut layers = vec![layer(
        0,
        "latent-projection",
        256 * 1024 * 256 / 4,
        2.0 * 256.0 * wide_s * wide_h,
    )];
    let mut volumes = vec![wide_s * wide_h * FP16];
    for i in 0..12 {
        layers.push(layer(
            1 + i,
            "wide-transformer",
            block_params(1024),
            block_fwd_flops(wide_h, wide_s),
        ));
        volumes.push(wide_s * wide_h * FP16);
    }
    layers.push(layer(
        13,
        "upsample",
        1024 * 16 + 16,
        2.0 * narrow_s * wide_h * narrow_h / 16.0,
    ));
    volumes.push(narrow_s * narrow_h * FP16);
    for i in 0..12 {
        layers.push(layer(
            14 + i,
            "narrow-transformer",
            block_params(16),
            block_fwd_flops(narrow_h, narrow_s),
        ));
        volumes.push(narrow_s * narrow_h * FP16);
    }
    layers.push(layer(
        26,
        "to-rgb",
        16 * 3 + 3,
        2.0 * narrow_s * narrow_h * 3.0,
    ));
    ModelGraph::new(layers, volumes).expect("valid model")
}

/// Nodes of four devices; `nodes` gives each node's device type and intra-node Gbps.
fn cluster(nodes: &[(&str, f64)], inter_gbps: f64) -> Cluster<f64> {
    let devices: Vec<DeviceSpec> = nodes
        .iter()
        .enumerate()
        .flat_map(|(node_id, (ty, _))| (0..4).map(move |_| (node_id, ty.to_string())))
        .enumerate()
        .map(|(id, (node_id, device_type))| DeviceSpec {
            id,
            node_id,
            device_type,
        })
        .collect();
    let n = devices.len();
    let bandwidth = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (a, b) = (devices[i].node_id, devices[j].node_id);
                    if a == b {
                        nodes[a].1 * GBPS
                    } else {
                        inter_gbps * GBPS
                    }
                })
                .collect()
        })
        .collect();
    Cluster::new(devices, bandwidth).expect("valid cluster")
}

fn write(
    dir: &Path,
    model: &ModelGraph<f64>,
    cluster: &Cluster<f64>,
    flops: f64,
    tmp_gbps: f64,
    max_mbs: usize,
) {
    std::fs::create_dir_all(dir).expect("create scenario dir");
    let tmps = [1, 2, 4, 8, 16];
    let mbss: Vec<usize> = (0..)
        .map(|p| 1 << p)
        .take_while(|&m| m <= max_mbs)
        .collect();
    let profile = synthetic_profile(model, &tmps, &mbss, flops, tmp_gbps * GBPS).expect("profile");
    save_json(&dir.join("model.json"), model).expect("write model");
    save_json(&dir.join("cluster.json"), cluster).expect("write cluster");
    save_json(&dir.join("profile.json"), &profile).expect("write profile");
    println!(
        "{}: {} layers, {} devices, {} profile entries",
        dir.display(),
        model.num_layers(),
        cluster.num_devices(),
        profile.len()
    );
}

fn main() {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("configs"));

    let homogeneous = cluster(&[("T4", 50.0); 4], 50.0);
    write(
        &out.join("homogeneous"),
        &gpt2(),
        &homogeneous,
        T4_FLOPS,
        50.0,
        32,
    );

    // the slowest device type sets the pace of a synchronous step
    let mixed = cluster(
        &[
            ("V100", 170.0),
            ("V100", 170.0),
            ("V100", 170.0),
            ("T4", 50.0),
        ],
        10.0,
    );
    write(
        &out.join("hetero_cluster"),
        &gpt2(),
        &mixed,
        T4_FLOPS,
        50.0,
        32,
    );

    let v100 = cluster(&[("V100", 170.0); 4], 10.0);
    write(
        &out.join("hetero_model"),
        &transgan(),
        &v100,
        V100_FLOPS,
        170.0,
        64,
    );
}

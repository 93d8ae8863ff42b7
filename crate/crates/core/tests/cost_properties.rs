mod common;

use common::{instance, Instance};
use parplan::cost::{allreduce_time, pipeline_time, replica_edge_times, PlanContext};
use parplan::optimizer::{plan, PlanConfig};
use parplan::types::{parse_json, Placement, ProfileTable};
use proptest::prelude::*;
use std::path::Path;

fn round_trip<V: serde::Serialize + serde::de::DeserializeOwned>(v: &V) -> V {
    let text = serde_json::to_string_pretty(v).unwrap();
    parse_json(Path::new("mem.json"), &text).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn files_round_trip(inst in instance()) {
        prop_assert_eq!(round_trip(&inst.model), inst.model.clone());
        prop_assert_eq!(round_trip(&inst.cluster), inst.cluster.clone());
        let back: ProfileTable<f64> = round_trip(&inst.profile);
        prop_assert_eq!(back, inst.profile);
    }

    #[test]
    fn emitted_candidates_are_valid(inst in instance()) {
        let Instance { model, cluster, profile, gbs } = &inst;
        let ctx = PlanContext::new(model, cluster, profile, *gbs);
        let out = plan(&ctx, &PlanConfig { budget: 2, workers: Some(1), max_params_per_device: None });
        prop_assert!(!out.candidates.is_empty());
        for (i, c) in out.candidates.iter().enumerate() {
            let s = &c.strategy;
            prop_assert!(parplan::types::validate_strategy(s, model, cluster, *gbs).is_empty());
            prop_assert_eq!(c.estimated.gas * s.mbs * s.degrees.dp, *gbs);
            prop_assert_eq!(c.rank, i + 1);
            prop_assert_eq!(c.estimated.total, c.estimated.pipeline_time + c.estimated.dpsync_time);
        }
        prop_assert!(out.candidates.windows(2).all(|w| w[0].estimated.total <= w[1].estimated.total));
    }

    #[test]
    fn duplicate_device_rejected(n in 2usize..64, a in 0usize..64, b in 0usize..64) {
        let (a, b) = (a % n, b % n);
        prop_assume!(a != b);
        let mut perm: Vec<usize> = (0..n).collect();
        prop_assert!(Placement::new(perm.clone()).is_bijective(n));
        perm[a] = perm[b];
        prop_assert!(!Placement::new(perm).is_bijective(n));
    }

    #[test]
    fn allreduce_laws(n in 1usize..64, m in 1.0f64..1e10, b in 1e6f64..1e12, dm in 0.0f64..1e9, db in 0.0f64..1e11) {
        prop_assert_eq!(allreduce_time(1, m, b).unwrap(), 0.0);
        let t = allreduce_time(n, m, b).unwrap();
        prop_assert!(allreduce_time(n, m + dm, b).unwrap() >= t);
        prop_assert!(allreduce_time(n, m, b + db).unwrap() <= t);
        prop_assert!(t < 2.0 * m / b);
        prop_assert!(allreduce_time(n + 1, m, b).unwrap() >= t);
    }

    #[test]
    fn pipeline_single_microbatch_is_a_sum(
        t in prop::collection::vec(0.0f64..10.0, 1..12),
        e_seed in prop::collection::vec(0.0f64..10.0, 11),
    ) {
        let e = &e_seed[..t.len() - 1];
        let direct: f64 = e.iter().sum::<f64>() + t.iter().sum::<f64>();
        prop_assert_eq!(pipeline_time(&t, e, 1).unwrap(), direct);
    }

    #[test]
    fn pipeline_monotone(
        t in prop::collection::vec(0.0f64..10.0, 2..8),
        e_seed in prop::collection::vec(0.0f64..10.0, 7),
        gas in 1usize..16,
        i in 0usize..8,
        bump in 0.0f64..5.0,
    ) {
        let e = e_seed[..t.len() - 1].to_vec();
        let base = pipeline_time(&t, &e, gas).unwrap();
        let mut t2 = t.clone();
        t2[i % t.len()] += bump;
        prop_assert!(pipeline_time(&t2, &e, gas).unwrap() >= base);
        let mut e2 = e.clone();
        e2[i % e.len()] += bump;
        prop_assert!(pipeline_time(&t, &e2, gas).unwrap() >= base);
        prop_assert!(pipeline_time(&t, &e, gas + 1).unwrap() >= base);
    }

    #[test]
    fn estimate_is_pure_and_scales_with_bandwidth(inst in instance(), alpha in 0.1f64..10.0) {
        let Instance { model, cluster, profile, gbs } = &inst;
        let ctx = PlanContext::new(model, cluster, profile, *gbs);
        let out = plan(&ctx, &PlanConfig { budget: 0, workers: Some(1), max_params_per_device: None });
        let scaled = cluster.scale_bandwidth(alpha);
        let sctx = PlanContext::new(model, &scaled, profile, *gbs);
        for c in out.candidates.iter().take(8) {
            let s = &c.strategy;
            let a = ctx.estimate(s).unwrap();
            prop_assert_eq!(&a, &ctx.estimate(s).unwrap());
            let b = sctx.estimate(s).unwrap();
            prop_assert_eq!(&a.per_stage_times, &b.per_stage_times);
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-300);
            prop_assert!(close(b.dpsync_time * alpha, a.dpsync_time));
            for r in 0..s.degrees.dp {
                let ea = replica_edge_times(s, model, cluster, r).unwrap();
                let eb = replica_edge_times(s, model, &scaled, r).unwrap();
                for (x, y) in ea.iter().zip(&eb) {
                    prop_assert!(close(y * alpha, *x), "{} vs {}", y * alpha, x);
                }
            }
        }
    }
}

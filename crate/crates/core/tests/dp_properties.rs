use parplan::pipeline_dp::{
    brute_force_assignment, claim_identity, evaluate_assignment, optimal_assignment, SegmentTimes,
    BRUTE_FORCE_CAP,
};
use parplan::Result;
use proptest::prelude::*;

/// Layer times, a `[sender_stage][boundary]` edge table, stage count and gas.
fn dp_instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, usize, usize)> {
    (1usize..=10).prop_flat_map(|l| {
        (
            prop::collection::vec(0.01f64..5.0, l),
            prop::collection::vec(prop::collection::vec(0.0f64..3.0, l + 1), 4),
            1usize..=l.min(4),
            prop::sample::select(vec![1usize, 2, 8]),
        )
    })
}

fn edge_fn(table: &[Vec<f64>]) -> impl FnMut(usize, usize) -> Result<f64> + '_ {
    move |boundary, stage| Ok(table[stage][boundary])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dp_matches_brute_force((times, edges, k, gas) in dp_instance()) {
        let seg = SegmentTimes::from_layer_times(&times);
        let (_, dp) = optimal_assignment(&seg, k, gas, edge_fn(&edges)).unwrap();
        let (_, bf) = brute_force_assignment(&seg, k, gas, edge_fn(&edges), BRUTE_FORCE_CAP).unwrap();
        prop_assert!((dp - bf).abs() <= 1e-9 * bf.abs().max(1.0), "dp={dp} bf={bf}");
    }

    #[test]
    fn dp_cost_is_the_pipeline_time_of_its_cuts((times, edges, k, gas) in dp_instance()) {
        let seg = SegmentTimes::from_layer_times(&times);
        let (a, cost) = optimal_assignment(&seg, k, gas, edge_fn(&edges)).unwrap();
        prop_assert!(a.check(times.len()).is_ok());
        prop_assert_eq!(a.num_stages(), k);
        let direct = evaluate_assignment(&seg, &a, gas, edge_fn(&edges)).unwrap();
        prop_assert!((cost - direct).abs() <= 1e-9 * direct.max(1.0), "dp={cost} direct={direct}");
    }

    #[test]
    fn slower_layer_never_helps((times, edges, k, gas) in dp_instance(), i in 0usize..10, bump in 0.0f64..3.0) {
        let seg = SegmentTimes::from_layer_times(&times);
        let (_, before) = optimal_assignment(&seg, k, gas, edge_fn(&edges)).unwrap();
        let mut slower = times.clone();
        let n = slower.len();
        slower[i % n] += bump;
        let seg2 = SegmentTimes::from_layer_times(&slower);
        let (_, after) = optimal_assignment(&seg2, k, gas, edge_fn(&edges)).unwrap();
        prop_assert!(after >= before - 1e-9 * before.max(1.0));
    }

    #[test]
    fn claim_identity_holds(t1 in 0.0f64..100.0, t2 in 0.0f64..100.0, m in 0.0f64..100.0) {
        let (l, r) = claim_identity(t1, t2, m);
        prop_assert!((l - r).abs() <= 1e-12, "{l} != {r}");
    }
}

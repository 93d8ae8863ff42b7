use crate::scalar::Scalar;
use crate::types::{Cluster, ParallelismDegrees, Placement};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeuristicPlacement {
    pub placement: Placement,
    /// Set when some TMP group could not be packed into a single node.
    pub warning: Option<String>,
}

/// Megatron-style placement: TMP groups are packed inside nodes first, then
/// consecutive DP replicas share the node, then pipeline stages.
///
/// Groups are taken in rank order (stage-major, then replica). Each group is
/// drawn from the current node while it has room, otherwise from the first
/// node with enough free devices. If no node can hold a whole group the
/// remaining free devices are used in node order and a warning is set.
pub fn heuristic_placement<T: Scalar>(
    degrees: ParallelismDegrees,
    cluster: &Cluster<T>,
) -> HeuristicPlacement {
    let d = degrees;
    let mut free: Vec<std::collections::VecDeque<usize>> =
        cluster.nodes().into_iter().map(Into::into).collect();
    let mut rank_to_device = vec![usize::MAX; d.world_size()];
    let mut cursor = 0;
    let mut spilled = Vec::new();

    for stage in 0..d.pp {
        for replica in 0..d.dp {
            let node = if free[cursor].len() >= d.tmp {
                Some(cursor)
            } else {
                free.iter().position(|f| f.len() >= d.tmp)
            };
            let group: Vec<usize> = match node {
                Some(n) => {
                    cursor = n;
                    free[n].drain(..d.tmp).collect()
                }
                None => {
                    spilled.push((stage, replica));
                    let mut g = Vec::with_capacity(d.tmp);
                    for f in free.iter_mut() {
                        while g.len() < d.tmp {
                            match f.pop_front() {
                                Some(dev) => g.push(dev),
                                None => break,
                            }
                        }
                    }
                    g
                }
            };
            for (shard, dev) in group.into_iter().enumerate() {
                rank_to_device[d.rank_index(stage, replica, shard)] = dev;
            }
        }
    }

    let warning = (!spilled.is_empty()).then(|| {
        format!(
            "tmp={} could not be packed within a node for {} group(s); they span nodes",
            d.tmp,
            spilled.len()
        )
    });
    HeuristicPlacement {
        placement: Placement::new(rank_to_device),
        warning,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes_of(c: &Cluster<f64>, devs: &[usize]) -> Vec<usize> {
        devs.iter().map(|&d| c.node_of(d)).collect()
    }

    #[test]
    fn single_node_tmp_only() {
        let c = Cluster::<f64>::two_level(&[4], "a", 1.0, 1.0).unwrap();
        let h = heuristic_placement(ParallelismDegrees::new(1, 1, 4), &c);
        assert!(h.placement.is_bijective(4));
        assert!(h.warning.is_none());
    }

    #[test]
    fn each_stage_fills_a_node() {
        let c = Cluster::<f64>::two_level(&[4, 4, 4, 4], "a", 2.0, 1.0).unwrap();
        let d = ParallelismDegrees::new(4, 1, 4);
        let h = heuristic_placement(d, &c);
        assert!(h.placement.is_bijective(16));
        let mut used_nodes = Vec::new();
        for stage in 0..4 {
            let nodes = nodes_of(&c, &h.placement.tmp_group(&d, stage, 0));
            assert!(nodes.iter().all(|&n| n == nodes[0]));
            used_nodes.push(nodes[0]);
        }
        used_nodes.sort();
        assert_eq!(used_nodes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dp_pairs_share_node_before_stages() {
        let c = Cluster::<f64>::two_level(&[2, 2], "a", 2.0, 1.0).unwrap();
        let d = ParallelismDegrees::new(2, 2, 1);
        let h = heuristic_placement(d, &c);
        for stage in 0..2 {
            let nodes = nodes_of(&c, &h.placement.dp_group(&d, stage, 0));
            assert_eq!(
                nodes[0], nodes[1],
                "dp group of stage {stage} split across nodes"
            );
        }
    }

    #[test]
    fn oversized_tmp_spans_nodes_with_warning() {
        let c = Cluster::<f64>::two_level(&[2, 2], "a", 2.0, 1.0).unwrap();
        let h = heuristic_placement(ParallelismDegrees::new(1, 1, 4), &c);
        assert!(h.placement.is_bijective(4));
        assert!(h.warning.is_some());
    }

    #[test]
    fn uneven_nodes_still_bijective() {
        let c = Cluster::<f64>::two_level(&[3, 3, 2], "a", 2.0, 1.0).unwrap();
        for (pp, dp, tmp) in [(4, 1, 2), (2, 2, 2), (1, 8, 1), (8, 1, 1), (1, 1, 8)] {
            let h = heuristic_placement(ParallelismDegrees::new(pp, dp, tmp), &c);
            assert!(h.placement.is_bijective(8), "({pp},{dp},{tmp})");
        }
    }
}

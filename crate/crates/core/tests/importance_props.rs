mod common;

use proptest::prelude::*;

use slim_core::graph::NodeId;
use slim_core::importance::{betweenness_all, dense_ranks, rank_and_fuse, FusionConfig, SignalSet};

fn table() -> impl Strategy<Value = Vec<SignalSet>> {
    prop::collection::vec((1usize..8, 0u8..8, -6i8..7, -3i8..7), 1..10).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (deg, bet, ds, dc))| SignalSet {
                node: NodeId::new(format!("n{i:02}")),
                s_deg: deg,
                s_bet: bet as f64 * 0.5,
                delta_score: ds as f64 * 0.03,
                delta_cost: dc as f64 * 1e-4,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn increasing_transforms_leave_ranks_unchanged(signals in table(), size in 10usize..20) {
        let w = FusionConfig::default();
        let base = rank_and_fuse(&signals, size, &w).unwrap();
        let mut shifted = signals.clone();
        for s in &mut shifted {
            s.s_deg += 3;
            s.s_bet = 2.0 * s.s_bet + 1.0;
            s.delta_score = s.delta_score.exp();
            s.delta_cost = 1e3 * s.delta_cost - 0.5;
        }
        prop_assert_eq!(rank_and_fuse(&shifted, size, &w).unwrap(), base);
    }

    #[test]
    fn single_weight_orders_by_that_metric(signals in table()) {
        let only_shap = FusionConfig { w_deg: 0.0, w_bet: 0.0, w_shap: 1.0, w_cost: 0.0 };
        let t = rank_and_fuse(&signals, signals.len(), &only_shap).unwrap();
        let mut want: Vec<&SignalSet> = signals.iter().collect();
        want.sort_by(|a, b| a.delta_score.total_cmp(&b.delta_score).then(a.node.cmp(&b.node)));
        let want: Vec<NodeId> = want.into_iter().map(|s| s.node.clone()).collect();
        prop_assert_eq!(t.order(), want);
    }

    #[test]
    fn fused_scores_are_bounded_and_sorted(signals in table(), size in 1usize..30) {
        let w = FusionConfig::default();
        let t = rank_and_fuse(&signals, size, &w).unwrap();
        let kappa = size.max(10) as f64;
        prop_assert_eq!(t.kappa, kappa);
        let top = (w.w_deg + w.w_bet + w.w_shap + w.w_cost) / (kappa + 1.0);
        for pair in t.rows.windows(2) {
            prop_assert!(pair[0].fused > pair[1].fused || (pair[0].fused == pair[1].fused && pair[0].node < pair[1].node));
        }
        for r in &t.rows {
            prop_assert!(r.fused > 0.0 && r.fused <= top + 1e-15);
        }
    }

    #[test]
    fn dominating_ranks_fuse_higher(signals in table()) {
        let t = rank_and_fuse(&signals, signals.len(), &FusionConfig::default()).unwrap();
        for a in &t.rows {
            for b in &t.rows {
                let ra = [a.r_deg, a.r_bet, a.r_shap, a.r_cost];
                let rb = [b.r_deg, b.r_bet, b.r_shap, b.r_cost];
                if ra.iter().zip(&rb).all(|(x, y)| x <= y) && ra != rb {
                    prop_assert!(a.fused > b.fused);
                }
            }
        }
    }

    #[test]
    fn dense_ranks_are_contiguous(values in prop::collection::vec(-5i8..5, 1..20)) {
        let xs: Vec<f64> = values.iter().map(|v| *v as f64).collect();
        let r = dense_ranks(&xs, false);
        let distinct: std::collections::BTreeSet<i8> = values.iter().copied().collect();
        prop_assert_eq!(*r.iter().max().unwrap(), distinct.len());
        for (i, a) in xs.iter().enumerate() {
            for (j, b) in xs.iter().enumerate() {
                prop_assert_eq!(a < b, r[i] < r[j]);
            }
        }
        let down = dense_ranks(&xs, true);
        for (u, d) in r.iter().zip(&down) {
            prop_assert_eq!(u + d, distinct.len() + 1);
        }
    }

    #[test]
    fn betweenness_is_zero_at_sources_and_sinks(seed in any::<u64>(), m in 0usize..8) {
        let g = common::workflow(&mut common::rng(seed), m, 0.3);
        let bet = betweenness_all(&g);
        for n in g.nodes() {
            if g.in_degree(&n.id) == 0 || g.out_degree(&n.id) == 0 {
                prop_assert_eq!(bet[&n.id], 0.0);
            }
            prop_assert!(bet[&n.id] >= 0.0);
        }
    }
}

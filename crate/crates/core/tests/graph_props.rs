mod common;

use proptest::prelude::*;

use slim_core::graph::{remove_node_with_patch, substitute_model, ModelId, WorkflowGraph};

fn case(seed: u64, m: usize, extra: f64) -> WorkflowGraph {
    common::workflow(&mut common::rng(seed), m, extra)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn generated_workflows_are_valid(seed in any::<u64>(), m in 0usize..9, extra in 0.0f64..0.6) {
        let g = case(seed, m, extra);
        prop_assert!(g.validate().is_ok(), "{}", g.validate());
    }

    #[test]
    fn surgery_preserves_reachability_among_survivors(seed in any::<u64>(), m in 1usize..9, extra in 0.0f64..0.6, pick in any::<prop::sample::Index>()) {
        let g = case(seed, m, extra);
        let removable = g.unprotected_ids();
        let v = &removable[pick.index(removable.len())];
        let before = g.clone();
        let h = remove_node_with_patch(&g, v).unwrap();

        prop_assert_eq!(&g, &before);
        prop_assert_eq!(h.len(), g.len() - 1);
        prop_assert!(!h.contains(v));
        prop_assert!(h.validate().is_ok(), "{}", h.validate());
        prop_assert!(h.edges().iter().all(|e| e.source != e.target));
        for a in h.nodes() {
            for b in h.nodes() {
                prop_assert_eq!(g.reaches(&a.id, &b.id), h.reaches(&a.id, &b.id), "{} -> {}", a.id, b.id);
            }
        }
    }

    #[test]
    fn surgery_commutes_with_substitution(seed in any::<u64>(), m in 2usize..9, extra in 0.0f64..0.6, i in any::<prop::sample::Index>(), j in any::<prop::sample::Index>()) {
        let g = case(seed, m, extra);
        let ids = g.unprotected_ids();
        let v = &ids[i.index(ids.len())];
        let u = &ids[j.index(ids.len())];
        prop_assume!(u != v);
        let lo = ModelId::from("lo");
        let pricing = common::pricing();
        let a = substitute_model(&remove_node_with_patch(&g, v).unwrap(), u, &lo, &pricing).unwrap();
        let b = remove_node_with_patch(&substitute_model(&g, u, &lo, &pricing).unwrap(), v).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn substitution_keeps_topology(seed in any::<u64>(), m in 1usize..9, pick in any::<prop::sample::Index>()) {
        let g = case(seed, m, 0.3);
        let ids = g.unprotected_ids();
        let v = &ids[pick.index(ids.len())];
        let h = substitute_model(&g, v, &ModelId::from("lo"), &common::pricing()).unwrap();
        prop_assert_eq!(h.edges(), g.edges());
        prop_assert_eq!(h.len(), g.len());
        prop_assert_eq!(&h.node(v).unwrap().model, &ModelId::from("lo"));
    }

    #[test]
    fn topo_order_respects_edges(seed in any::<u64>(), m in 0usize..9, extra in 0.0f64..0.6) {
        let g = case(seed, m, extra);
        let order = g.topo_order().unwrap();
        prop_assert_eq!(order.len(), g.len());
        let pos = |id| order.iter().position(|x| x == id).unwrap();
        for e in g.edges() {
            prop_assert!(pos(&e.source) < pos(&e.target));
        }
    }

    #[test]
    fn document_round_trip(seed in any::<u64>(), m in 0usize..9, extra in 0.0f64..0.6) {
        let g = case(seed, m, extra);
        let back = WorkflowGraph::from_document(&g.to_document()).unwrap();
        prop_assert_eq!(back.digest(), g.digest());
        prop_assert_eq!(back, g);
    }

    #[test]
    fn repeated_surgery_shrinks_to_protected_core(seed in any::<u64>(), m in 1usize..9, extra in 0.0f64..0.6) {
        let mut g = case(seed, m, extra);
        let mut seen = std::collections::BTreeSet::from([g.digest()]);
        while let Some(v) = g.unprotected_ids().first().cloned() {
            let n = g.len();
            g = remove_node_with_patch(&g, &v).unwrap();
            prop_assert_eq!(g.len(), n - 1);
            prop_assert!(g.validate().is_ok());
            prop_assert!(seen.insert(g.digest()));
        }
        prop_assert_eq!(g.len(), 2);
        prop_assert!(g.reaches(&"in".into(), &"out".into()));
    }
}

#[test]
fn protected_nodes_cannot_be_removed() {
    let g = case(1, 3, 0.2);
    assert!(remove_node_with_patch(&g, &"in".into()).is_err());
    assert!(remove_node_with_patch(&g, &"out".into()).is_err());
    assert!(substitute_model(&g, &"out".into(), &ModelId::from("lo"), &common::pricing()).is_err());
    assert!(remove_node_with_patch(&g, &"nope".into()).is_err());
}

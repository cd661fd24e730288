use proptest::prelude::*;

use qplan_core::datagen::{default_ranges, lhs_configs, ConfigRange, Scale};
use qplan_core::catalog::Unit;
use qplan_core::linearize::{delinearize, linearize, TokenSequence};
use qplan_core::plan::{parse_plan_value, PlanNode, PlanTree};
use qplan_core::smatch::{smatch_exact, smatch_hillclimb};
use qplan_core::OperatorTriple;

const POOL: [(&str, &str, &str); 8] = [
    ("Scan", "Seq", "NIL"),
    ("Scan", "Index", "NIL"),
    ("Scan", "Heap", "Bitmap"),
    ("Join", "Hash", "NIL"),
    ("Loop", "NIL", "Nested"),
    ("Sort", "NIL", "NIL"),
    ("Aggregate", "Hash", "NIL"),
    ("Hash", "NIL", "NIL"),
];

fn arb_node(max_depth: u32) -> impl Strategy<Value = PlanNode> {
    let leaf = (0..POOL.len()).prop_map(|i| {
        let (a, b, c) = POOL[i];
        PlanNode::with_triple(OperatorTriple::new(a, b, c), vec![])
    });
    leaf.prop_recursive(max_depth, 24, 3, |inner| {
        ((0..POOL.len()), prop::collection::vec(inner, 1..3)).prop_map(|(i, children)| {
            let (a, b, c) = POOL[i];
            PlanNode::with_triple(OperatorTriple::new(a, b, c), children)
        })
    })
}

fn arb_tree() -> impl Strategy<Value = PlanTree> {
    arb_node(4).prop_map(|n| PlanTree::new(n, None))
}

fn small_tree() -> impl Strategy<Value = PlanTree> {
    arb_node(3).prop_filter("at most 7 nodes", |n| n.subtree_size() <= 7).prop_map(|n| PlanTree::new(n, None))
}

proptest! {
    #[test]
    fn linearization_is_balanced_and_invertible(t in arb_tree()) {
        let seq = linearize(&t).unwrap();
        prop_assert!(seq.is_balanced());
        prop_assert!(seq.len() <= 3 * t.node_count);
        let back = delinearize(&seq).unwrap();
        prop_assert_eq!(back.normalized(), t.normalized());
        prop_assert_eq!(TokenSequence::parse(&seq.render()).unwrap(), seq);
    }

    #[test]
    fn canonical_form_round_trips(t in arb_tree()) {
        let back = parse_plan_value(t.to_canonical_value()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn smatch_is_bounded_by_the_exact_optimum(a in small_tree(), b in small_tree(), seed in any::<u64>()) {
        let exact = smatch_exact(&a, &b).unwrap();
        let hc = smatch_hillclimb(&a, &b, 2, seed);
        prop_assert!(hc.score <= exact.score + 1e-12);
        prop_assert!((0.0..=1.0).contains(&hc.score));
        prop_assert!((smatch_exact(&b, &a).unwrap().score - exact.score).abs() < 1e-12);
        prop_assert_eq!(smatch_hillclimb(&a, &a, 1, seed).score, 1.0);
    }

    #[test]
    fn lhs_stratifies_every_dimension(n in 1usize..80, seed in any::<u64>(), lo in 0.1f64..10.0, span in 0.5f64..1000.0, log in any::<bool>()) {
        let mut ranges = default_ranges();
        ranges.push(ConfigRange::new("custom", Unit::Number, lo, lo + span, if log { Scale::Log } else { Scale::Linear }));
        let configs = lhs_configs(n, &ranges, seed).unwrap();
        for r in &ranges {
            let mut strata: Vec<usize> = configs.iter().map(|c| r.stratum_of(c.get(&r.name), n)).collect();
            strata.sort_unstable();
            prop_assert_eq!(strata, (0..n).collect::<Vec<_>>());
        }
    }
}

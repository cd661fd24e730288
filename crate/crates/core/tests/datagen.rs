use qplan_core::catalog::DbConfig;
use qplan_core::datagen::{
    build_pair_dataset, domain_shift, gen_plans, lhs_configs, OperatorWeights, ShiftParams, SyntheticSpec,
};
use qplan_core::plan::{parse_plan_document, PlanTree};

#[test]
fn one_node_seq_scan_matches_closed_form() {
    let doc = r#"{"Node Type": "Seq Scan", "Relation Name": "t", "Actual Rows": 1000,
        "Rows Removed by Filter": 9000, "Shared Hit Blocks": 30, "Shared Read Blocks": 70,
        "Plan Rows": 1100, "Plan Width": 16}"#;
    let mut root = parse_plan_document(doc).unwrap().root;
    let spec = SyntheticSpec::tpch_like(0);
    qplan_core::datagen::label_tree(&mut root, &DbConfig::defaults(), &spec.oracle);
    // overhead 0.05 + 30 hit pages * 0.002 + 70 read pages * 0.2 + 10000 tuples * 0.0005
    let own = 0.05 + 0.06 + 14.0 + 5.0;
    assert!((root.labels.total_time.unwrap() - own).abs() < 1e-12);
    assert!((root.labels.startup_time.unwrap() - 0.1 * own).abs() < 1e-12);
    // 100 pages * 1 + 1100 planned rows * cpu_tuple_cost 0.01
    assert!((root.labels.total_cost.unwrap() - 111.0).abs() < 1e-12);
}

#[test]
fn generated_single_scans_match_closed_form() {
    let mut spec = SyntheticSpec::tpch_like(21);
    spec.min_relations = 1;
    spec.max_relations = 1;
    spec.weights = OperatorWeights {
        seq_scan: 1.0,
        index_scan: 0.0,
        index_only_scan: 0.0,
        bitmap_scan: 0.0,
        p_gather: 0.0,
        p_aggregate: 0.0,
        p_sort: 0.0,
        p_limit: 0.0,
        ..OperatorWeights::default()
    };
    for p in gen_plans(&spec, 25).unwrap() {
        let n = &p.tree.root;
        assert_eq!(p.tree.node_count, 1);
        let get = |k: &str| n.properties[k].as_f64().unwrap();
        let rel = spec.relations.iter().find(|r| r.name == n.properties["Relation Name"]).unwrap();
        let sb = p.config.get("shared_buffers");
        let pages = rel.pages;
        let hit = (pages * sb / (sb + 8192.0 * pages)).round();
        assert_eq!(get("Shared Hit Blocks"), hit);
        assert_eq!(get("Shared Read Blocks"), pages - hit);
        let expected = 0.05 + hit * 0.002 + (pages - hit) * 0.2 + rel.tuples * 0.0005;
        let got = n.labels.total_time.unwrap();
        assert!((got - expected).abs() < 1e-9 * expected, "{got} vs {expected}");
    }
}

fn log_mean_and_var(trees: &[PlanTree]) -> (f64, f64) {
    let xs: Vec<f64> = trees.iter().map(|t| t.root.labels.total_time.unwrap().ln()).collect();
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

#[test]
fn shifted_label_mean_moves_by_the_configured_factor() {
    let source = SyntheticSpec::tpch_like(100);
    let shift = ShiftParams {
        coeff_scale: 1.5,
        seed_offset: 0x5eed,
        ..ShiftParams::none()
    };
    let target = domain_shift(&source, &shift);
    let a: Vec<PlanTree> = gen_plans(&source, 1000).unwrap().into_iter().map(|p| p.tree).collect();
    let b: Vec<PlanTree> = gen_plans(&target, 1000).unwrap().into_iter().map(|p| p.tree).collect();
    let (ma, va) = log_mean_and_var(&a);
    let (mb, vb) = log_mean_and_var(&b);
    let se = (va / 1000.0 + vb / 1000.0).sqrt();
    let offset = mb - ma;
    assert!((offset - 1.5f64.ln()).abs() < 3.0 * se, "offset {offset}, se {se}");

    // Same seed, coefficients only: every label scales exactly.
    let same = domain_shift(&source, &ShiftParams { coeff_scale: 2.0, ..ShiftParams::none() });
    let base = gen_plans(&source, 50).unwrap();
    let c = gen_plans(&same, 50).unwrap();
    for (x, y) in base.iter().zip(&c) {
        let (tx, ty) = (x.labels().total_time.unwrap(), y.labels().total_time.unwrap());
        assert!((ty - 2.0 * tx).abs() < 1e-9 * ty);
    }
}

#[test]
fn pair_dataset_contract() {
    let spec = SyntheticSpec::tpch_like(8);
    let plans: Vec<PlanTree> = gen_plans(&spec, 60).unwrap().into_iter().map(|p| p.tree).collect();
    let ds = build_pair_dataset(&plans, 220, 4, 2).unwrap();
    assert_eq!((ds.splits.train.len(), ds.splits.dev.len(), ds.splits.test.len()), (200, 10, 10));
    assert!(ds.pairs.iter().all(|p| (0.0..=1.0).contains(&p.score)));
    let identity: Vec<_> = ds.pairs.iter().filter(|p| p.a == p.b).collect();
    assert_eq!(identity.len(), 2);
    assert!(identity.iter().all(|p| p.score == 1.0));
    let mut all: Vec<usize> = ds.splits.train.iter().chain(&ds.splits.dev).chain(&ds.splits.test).copied().collect();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 220);
    assert_eq!(ds.summary.count, 220);
    assert_eq!(build_pair_dataset(&plans, 220, 4, 2).unwrap(), ds);
    assert!(build_pair_dataset(&plans[..1], 10, 0, 2).is_err());
}

#[test]
fn lhs_configs_keep_unsampled_defaults() {
    let configs = lhs_configs(8, &qplan_core::datagen::default_ranges(), 1).unwrap();
    for c in configs {
        assert_eq!(c.get("cpu_tuple_cost"), 0.01);
        assert_eq!(c.get("join_collapse_limit"), 8.0);
    }
}

//! Performance-encoder rows, embeddings, training and checkpoints.

mod common;

use common::{tiny_perf_config, tiny_perf_set};
use proptest::prelude::*;
use qplan_core::catalog::DbConfig;
use qplan_core::datagen::{gen_plans, SyntheticSpec};
use qplan_core::plan::{extract_node_features, parse_plan_document, FeatureSchema, OperatorGroup};
use qplan_models::perf::*;
use qplan_models::ModelError;

fn corpus_rows(n: usize, seed: u64) -> Vec<FeatureBundle> {
    let spec = SyntheticSpec::tpch_like(seed);
    let catalog = spec.catalog();
    let schema = FeatureSchema::default();
    gen_plans(&spec, n)
        .unwrap()
        .iter()
        .flat_map(|p| build_training_rows(&p.tree, &catalog, &p.config, &schema).unwrap())
        .collect()
}

fn default_set(schema: &FeatureSchema) -> PerfEncoderSet {
    PerfEncoderSet {
        models: OperatorGroup::MODELED
            .iter()
            .map(|&g| PerfModel::new(g, PerfEncoderConfig::default(), Architecture::MultiColumn, schema, 7).unwrap())
            .collect(),
    }
}

const SCAN_ONLY: &str = r#"{"Plan": {"Node Type": "Seq Scan", "Relation Name": "orders", "Alias": "o",
    "Plan Rows": 1500, "Plan Width": 40, "Actual Rows": 1490, "Actual Loops": 1,
    "Total Cost": 35.5, "Startup Cost": 0.0, "Actual Total Time": 2.5, "Actual Startup Time": 0.01,
    "Shared Read Blocks": 20, "Shared Hit Blocks": 5}}"#;

#[test]
fn performance_vector_has_four_slots_with_zeros_for_absent_groups() {
    let schema = FeatureSchema::default();
    let set = default_set(&schema);
    let spec = SyntheticSpec::tpch_like(1);
    let catalog = spec.catalog();
    let tree = parse_plan_document(SCAN_ONLY).unwrap();
    let config = DbConfig::defaults();
    let c = perf_embed_plan(&tree, &catalog, &config, &schema, &set).unwrap();
    assert_eq!(c.len(), 1200);
    assert!(c[..300].iter().any(|v| *v != 0.0));
    assert!(c[300..].iter().all(|v| *v == 0.0));
    assert!(c.iter().all(|v| v.is_finite()));
    assert_eq!(perf_embed_plan(&tree, &catalog, &config, &schema, &set).unwrap(), c);

    for plan in gen_plans(&spec, 10).unwrap() {
        let c = perf_embed_plan(&plan.tree, &catalog, &plan.config, &schema, &set).unwrap();
        assert_eq!(c.len(), 1200);
        for (k, g) in OperatorGroup::MODELED.iter().enumerate() {
            let present = plan.tree.nodes().iter().any(|n| n.group() == *g);
            let slot = &c[300 * k..300 * (k + 1)];
            assert_eq!(slot.iter().any(|v| *v != 0.0), present, "{}", g.name());
        }
    }
}

#[test]
fn missing_group_model_is_reported() {
    let schema = FeatureSchema::default();
    let mut set = tiny_perf_set(&schema, 1);
    set.models.remove(2);
    let tree = parse_plan_document(SCAN_ONLY).unwrap();
    let catalog = SyntheticSpec::tpch_like(1).catalog();
    let err = perf_embed_plan(&tree, &catalog, &DbConfig::defaults(), &schema, &set).unwrap_err();
    assert!(matches!(err, ModelError::MissingCheckpoint(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cumulative_rows_are_exact_sums(seed in 0u64..500) {
        let spec = SyntheticSpec::tpch_like(seed);
        let catalog = spec.catalog();
        let schema = FeatureSchema::default();
        for plan in gen_plans(&spec, 4).unwrap() {
            let rows = build_training_rows(&plan.tree, &catalog, &plan.config, &schema).unwrap();
            prop_assert_eq!(&rows, &build_training_rows(&plan.tree, &catalog, &plan.config, &schema).unwrap());
            let nodes = plan.tree.nodes();
            for g in OperatorGroup::MODELED {
                let members: Vec<_> = nodes.iter().filter(|n| n.group() == g).collect();
                let per_node: Vec<&FeatureBundle> = rows.iter().filter(|r| r.group == g && !r.is_cumulative).collect();
                let cumulative: Vec<&FeatureBundle> = rows.iter().filter(|r| r.group == g && r.is_cumulative).collect();
                prop_assert_eq!(per_node.len(), members.len());
                prop_assert_eq!(cumulative.len(), usize::from(!members.is_empty()));
                if let Some(cum) = cumulative.first() {
                    let mut expect = vec![0.0; schema.width];
                    for n in &members {
                        for (e, x) in expect.iter_mut().zip(extract_node_features(n, &schema).unwrap()) {
                            *e += x;
                        }
                    }
                    prop_assert_eq!(&cum.f_node, &expect);
                    let time: f64 = members.iter().map(|n| n.labels.total_time.unwrap()).sum();
                    prop_assert!((cum.labels.total_time.unwrap() - time).abs() <= 1e-9 * time.max(1.0));
                }
                for r in rows.iter().filter(|r| r.group == g) {
                    prop_assert_eq!(r.f_db.clone(), plan.config.feature_vector());
                }
            }
        }
    }
}

#[test]
fn heads_share_one_embedding() {
    let schema = FeatureSchema::default();
    let rows = corpus_rows(20, 4);
    let scans: Vec<&FeatureBundle> = rows.iter().filter(|r| r.group == OperatorGroup::Scan).take(5).collect();
    let model = PerfModel::new(OperatorGroup::Scan, tiny_perf_config(), Architecture::MultiColumn, &schema, 3).unwrap();
    let (emb, out) = model.forward_raw(&scans).unwrap();
    assert_eq!(emb.shape(), [5, 6]);
    assert_eq!(out.shape(), [5, 3]);
    // Each head is an affine map of the same embedding row.
    for (j, head) in model.net.heads.iter().enumerate() {
        let w = model.store.value(head.w);
        let b = model.store.value(head.b.unwrap()).data()[0];
        for i in 0..5 {
            let expect: f64 = emb.row(i).iter().zip(w.data()).map(|(e, w)| e * w).sum::<f64>() + b;
            assert!((out.get(i, j) - expect).abs() < 1e-12);
        }
    }
    let (e1, p1) = model.perf_forward(scans[0]).unwrap();
    assert_eq!(e1, emb.row(0).to_vec());
    assert!(p1.iter().all(|v| v.is_finite()));
}

#[test]
fn wrong_group_or_width_is_rejected() {
    let schema = FeatureSchema::default();
    let rows = corpus_rows(10, 5);
    let model = PerfModel::new(OperatorGroup::Join, tiny_perf_config(), Architecture::MultiColumn, &schema, 3).unwrap();
    let scan = rows.iter().find(|r| r.group == OperatorGroup::Scan).unwrap();
    assert!(matches!(model.perf_forward(scan), Err(ModelError::SchemaMismatch(_))));
    let mut join = rows.iter().find(|r| r.group == OperatorGroup::Join).unwrap().clone();
    join.f_db.push(1.0);
    assert!(matches!(model.perf_forward(&join), Err(ModelError::SchemaMismatch(_))));
}

#[test]
fn each_group_memorizes_fifty_rows() {
    let schema = FeatureSchema::default();
    let rows = corpus_rows(80, 6);
    let config = PerfEncoderConfig {
        node_hidden: vec![64, 64],
        meta_hidden: vec![16, 16],
        db_hidden: vec![16, 16],
        merge_dim: 64,
        embedding_dim: 32,
        ..PerfEncoderConfig::default()
    };
    let opts = PerfTrainOptions {
        max_epochs: 3000,
        patience: 3000,
        min_delta: 0.0,
        batch_size: 50,
        lr: 3e-3,
        ..PerfTrainOptions::default()
    };
    for g in OperatorGroup::MODELED {
        let mine: Vec<&FeatureBundle> = rows.iter().filter(|r| r.group == g).take(50).collect();
        assert_eq!(mine.len(), 50, "{}", g.name());
        let mut model = PerfModel::new(g, config.clone(), Architecture::MultiColumn, &schema, 1).unwrap();
        let report = train_group(&mut model, &mine, &[], &mine, &opts, true).unwrap();
        let (mae, _) = evaluate_rows(&model, &mine).unwrap();
        for j in 0..3 {
            let labels: Vec<f64> = mine.iter().filter_map(|r| r.labels.as_array()[j]).collect();
            let range = labels.iter().cloned().fold(f64::MIN, f64::max) - labels.iter().cloned().fold(f64::MAX, f64::min);
            assert!(mae[j] < 0.01 * range, "{} {}: mae {} range {range}", g.name(), LABEL_NAMES[j], mae[j]);
        }
        assert!(report.best_so_far.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn joint_training_reports_and_curves() {
    let schema = FeatureSchema::default();
    let rows = corpus_rows(60, 7);
    let opts = PerfTrainOptions {
        max_epochs: 15,
        patience: 5,
        ..PerfTrainOptions::default()
    };
    let (set, reports) = train_all(&rows, &tiny_perf_config(), Architecture::MultiColumn, &schema, &opts).unwrap();
    set.check_complete().unwrap();
    assert_eq!(reports.len(), 4);
    for r in &reports {
        let n = rows.iter().filter(|x| x.group == r.group).count();
        assert_eq!(r.n_train + r.n_val + r.n_test, n);
        assert!(r.n_train >= 7 * n / 10);
        assert!(r.best_so_far.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.val_curve.len(), r.epochs_run);
        assert!(r.test_mae.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn empty_group_is_skipped() {
    let schema = FeatureSchema::default();
    let rows: Vec<FeatureBundle> = corpus_rows(30, 8).into_iter().filter(|r| r.group != OperatorGroup::Sort).collect();
    let opts = PerfTrainOptions {
        max_epochs: 2,
        ..PerfTrainOptions::default()
    };
    let (set, reports) = train_all(&rows, &tiny_perf_config(), Architecture::MultiColumn, &schema, &opts).unwrap();
    assert_eq!(reports.len(), 3);
    assert!(set.get(OperatorGroup::Sort).is_none());
    assert!(matches!(set.check_complete(), Err(ModelError::MissingCheckpoint(_))));
}

#[test]
fn single_column_budget_and_comparison_table() {
    let config = PerfEncoderConfig::default();
    let multi = param_count(&config, Architecture::MultiColumn) as f64;
    let single = param_count(&config, matched_single_column(&config)) as f64;
    assert!((multi - single).abs() / multi <= 0.10);

    let schema = FeatureSchema::default();
    let small = tiny_perf_config();
    let m = PerfModel::new(OperatorGroup::Sort, small.clone(), matched_single_column(&small), &schema, 1).unwrap();
    assert_eq!(m.param_count(), param_count(&small, matched_single_column(&small)));
    let rows = corpus_rows(40, 9);
    let opts = PerfTrainOptions {
        max_epochs: 2,
        ..PerfTrainOptions::default()
    };
    let table = compare_architectures(&rows, &small, &schema, &opts).unwrap();
    assert_eq!(table.len(), 8);
    for g in OperatorGroup::MODELED {
        let archs: Vec<&str> = table.iter().filter(|r| r.group == g).map(|r| r.arch.as_str()).collect();
        assert_eq!(archs, ["multi-column", "single-column"]);
    }
    assert_eq!(comparison_csv(&table).lines().count(), 9);
}

#[test]
fn finetune_table_shape_and_pretrained_normalizer() {
    let schema = FeatureSchema::default();
    let set = tiny_perf_set(&schema, 4);
    let rows = corpus_rows(40, 10);
    let opts = PerfTrainOptions {
        max_epochs: 2,
        ..PerfTrainOptions::default()
    };
    let table = finetune_table(&set, &rows, &[0.1, 0.3, 1.0], &schema, &opts).unwrap();
    assert_eq!(table.len(), 4 * 3 * 2);
    assert_eq!(finetune_csv(&table).lines().count(), 25);
    let scan = set.get(OperatorGroup::Scan).unwrap();
    let (tuned, _) = finetune_perf(scan, &rows, 0.3, &opts).unwrap();
    assert_eq!(tuned.norm, scan.norm);
    assert_ne!(tuned.store, scan.store);
    assert!(finetune_perf(scan, &rows, 0.0, &opts).is_err());
}

#[test]
fn checkpoint_directory_round_trip() {
    let schema = FeatureSchema::default();
    let set = tiny_perf_set(&schema, 5);
    let dir = tempfile::tempdir().unwrap();
    let files = set.save_dir(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let loaded = PerfEncoderSet::load_dir(dir.path(), &schema).unwrap();
    assert_eq!(loaded, set);
    std::fs::remove_file(dir.path().join("join.qpck")).unwrap();
    assert!(matches!(PerfEncoderSet::load_dir(dir.path(), &schema), Err(ModelError::MissingCheckpoint(_))));
}

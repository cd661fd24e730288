//! Latency regression and template/cluster classification.

mod common;

use common::Fixture;
use proptest::prelude::*;
use qplan_core::datagen::gen_classification_corpus;
use qplan_models::downstream::*;
use qplan_models::ModelError;
use qplan_nn::checkpoint::sha256_hex;
use qplan_nn::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sample(rng: &mut ChaCha8Rng, sd: usize, pd: usize, sw: usize, template: usize, map: &ClusterMap) -> DownstreamSample {
    let mut v = |n: usize, scale: f64| (0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<_>>();
    DownstreamSample {
        structure: v(sd, 1.0),
        perf: v(pd, 1.0),
        settings: v(sw, 100.0).into_iter().map(f64::abs).collect(),
        template: Some(template),
        cluster: Some(map.cluster_of[template]),
        latency_ms: Some(1.0),
        plan_id: None,
        source: None,
    }
}

fn paper_sized_map() -> ClusterMap {
    ClusterMap::new((0..113).map(|t| t % 33).collect()).unwrap()
}

fn encoder_hash(fx: &Fixture) -> String {
    let mut bytes = fx.structure.to_bytes();
    for m in &fx.perf.models {
        bytes.extend(m.to_bytes());
    }
    sha256_hex(&bytes)
}

#[test]
fn distributions_sum_to_one_and_clusters_sum_members() {
    let map = paper_sized_map();
    let config = ClassifierConfig {
        hidden: vec![16, 16],
        structure_dim: 8,
        perf_dim: 12,
        ..ClassifierConfig::default()
    };
    let model = QueryClassifier::new(config, map.clone(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<DownstreamSample> = (0..20).map(|i| random_sample(&mut rng, 8, 12, 3, i, &map)).collect();
    let refs: Vec<&DownstreamSample> = batch.iter().collect();
    for out in model.classify_batch(&refs).unwrap() {
        assert_eq!(out.templates.len(), 113);
        assert_eq!(out.clusters.len(), 33);
        assert!((out.templates.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((out.clusters.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for c in 0..33 {
            let expect = map.members(c).iter().fold(0.0, |acc, &t| acc + out.templates[t]);
            assert_eq!(out.clusters[c], expect);
        }
    }
}

#[test]
fn four_template_cluster_scores_add_up() {
    // Templates 10..14 share cluster 10; the rest are singletons.
    let cluster_of: Vec<usize> = (0..20).map(|t| if (10..14).contains(&t) { 10 } else if t > 13 { t - 3 } else { t }).collect();
    let map = ClusterMap::new(cluster_of).unwrap();
    assert_eq!(map.members(10), vec![10, 11, 12, 13]);
    let scores: Vec<f64> = (0..20).map(|t| (t as f64 + 1.0) / 210.0).collect();
    let clusters = cluster_scores(&scores, &map);
    assert_eq!(clusters[10], scores[10] + scores[11] + scores[12] + scores[13]);
    assert!((clusters.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn classifier_loss_gradient() {
    let map = ClusterMap::new(vec![0, 0, 1, 2, 2, 2]).unwrap();
    let config = ClassifierConfig {
        hidden: vec![5],
        lambda: 0.7,
        ablation: Ablation::Both,
        structure_dim: 3,
        perf_dim: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let net = ClassifierNet::new(&mut store, "cls", &config, 6, &mut rng).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let mut rt = |r: usize, c: usize| Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let inputs = [rt(4, 3), rt(4, 4)];
    let labels = [0, 3, 5, 2];
    let clusters: Vec<usize> = labels.iter().map(|&t| map.cluster_of[t]).collect();
    let report = grad_check(&store, &inputs, GradCheckOptions::default(), |t, s, x| {
        let (logits, _) = net.logits(t, s, Some(x[0]), Some(x[1]), true);
        let ce = t.cross_entropy(logits, &labels);
        let p = t.softmax_rows(logits, None);
        let cp = t.group_sum_cols(p, &map.cluster_of, map.n_clusters);
        let nll = t.nll(cp, &clusters);
        let nll = t.scale(nll, config.lambda);
        t.add(ce, nll)
    });
    assert!(report.passes(1e-4), "{report:?}");
}

#[test]
fn loss_matches_direct_computation() {
    let map = ClusterMap::new(vec![0, 1, 1]).unwrap();
    let config = ClassifierConfig {
        hidden: vec![4],
        lambda: 0.5,
        ablation: Ablation::StructureOnly,
        structure_dim: 2,
        perf_dim: 5,
    };
    let model = QueryClassifier::new(config, map.clone(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<DownstreamSample> = (0..3).map(|t| random_sample(&mut rng, 2, 5, 3, t, &map)).collect();
    let refs: Vec<&DownstreamSample> = batch.iter().collect();
    let mut tape = Tape::new();
    let (loss, _) = model.loss(&mut tape, &refs).unwrap();
    // Oracle: rebuild the training-mode logits and apply the definitions.
    let mut t2 = Tape::new();
    let s = t2.constant(Tensor::new(3, 2, batch.iter().flat_map(|b| b.structure.clone()).collect()).unwrap());
    let (logits, _) = model.net.logits(&mut t2, &model.store, Some(s), None, true);
    let logits = t2.value(logits).clone();
    let mut expect = 0.0;
    for i in 0..3 {
        let row = logits.row(i);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = row.iter().map(|v| v.exp() / z).collect();
        let cluster_p = if map.cluster_of[i] == 0 { p[0] } else { p[1] + p[2] };
        expect += -p[i].ln() - 0.5 * cluster_p.ln();
    }
    expect /= 3.0;
    assert!((tape.value(loss).item() - expect).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn latency_is_non_negative(seed in 0u64..1000, scale in 0.1f64..1e4) {
        let config = LatencyModelConfig {
            reshape_dim: 4,
            hidden: vec![8, 8],
            ablation: Ablation::Both,
            structure_dim: 5,
            perf_dim: 6,
            settings_width: 3,
        };
        let model = LatencyModel::new(config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = ClusterMap::new(vec![0]).unwrap();
        let mut s = random_sample(&mut rng, 5, 6, 3, 0, &map);
        for v in s.structure.iter_mut().chain(s.perf.iter_mut()) {
            *v *= scale;
        }
        let y = model.predict_latency(&s).unwrap();
        prop_assert!(y >= 0.0, "{y}");
    }
}

#[test]
fn settings_are_raw_then_log_scaled() {
    assert_eq!(settings_features(&[0.0, 9.0]), vec![0.0, 9.0, 0.0, 10f64.ln()]);
}

fn small_latency() -> LatencyModelConfig {
    LatencyModelConfig {
        reshape_dim: 8,
        hidden: vec![16, 16],
        ..LatencyModelConfig::default()
    }
}

fn short() -> DownstreamTrainOptions {
    DownstreamTrainOptions {
        epochs: 6,
        batch_size: 8,
        seed: 3,
        ..DownstreamTrainOptions::default()
    }
}

#[test]
fn fixed_features_leave_encoders_untouched() {
    let fx = Fixture::new();
    let before = encoder_hash(&fx);
    let enc = fx.encoders();
    let plans = fx.latency_plans(3, 10);
    let samples = enc.samples(&plans, false).unwrap();
    let (model, report) = train_latency(&samples, &small_latency(), &short(), None).unwrap();
    assert_eq!(model.encoder_mode(), EncoderMode::FixedFeatures);
    assert_eq!(report.templates.len(), 3);
    assert_eq!(encoder_hash(&fx), before);
    assert_eq!(enc.samples(&plans, false).unwrap(), samples);
}

#[test]
fn per_template_report_is_bit_reproducible() {
    let fx = Fixture::new();
    let samples = fx.encoders().samples(&fx.latency_plans(4, 10), false).unwrap();
    let (_, a) = train_latency(&samples, &small_latency(), &short(), None).unwrap();
    let (_, b) = train_latency(&samples, &small_latency(), &short(), None).unwrap();
    assert_eq!(template_csv(&a.templates), template_csv(&b.templates));
    assert_eq!(a, b);
    let csv = template_csv(&a.templates);
    assert!(csv.starts_with("template,"));
    assert_eq!(csv.lines().count(), 5);
    for row in &a.templates {
        assert!(row.p5 <= row.median && row.median <= row.p95);
        assert!(row.n_test > 0 && row.mae.is_finite() && row.baseline_mae.is_finite());
    }
}

#[test]
fn latency_checkpoint_round_trip() {
    let fx = Fixture::new();
    let samples = fx.encoders().samples(&fx.latency_plans(2, 10), false).unwrap();
    let (model, _) = train_latency(&samples, &small_latency(), &short(), None).unwrap();
    let loaded = LatencyModel::from_bytes(&model.to_bytes()).unwrap();
    let refs: Vec<&DownstreamSample> = samples.iter().collect();
    assert_eq!(model.predict(&refs).unwrap(), loaded.predict(&refs).unwrap());
    let mut wrong = samples[0].clone();
    wrong.settings.pop();
    assert!(matches!(model.predict_latency(&wrong), Err(ModelError::SchemaMismatch(_))));
}

#[test]
fn finetune_mode_trains_a_private_copy_of_the_encoders() {
    let fx = Fixture::new();
    let before = encoder_hash(&fx);
    let enc = fx.encoders();
    let samples = enc.samples(&fx.latency_plans(2, 10), true).unwrap();
    let (model, report) = train_latency(&samples, &small_latency(), &short(), Some(&enc)).unwrap();
    assert_eq!(model.encoder_mode(), EncoderMode::Finetune);
    assert!(report.train_curve.iter().all(|v| v.is_finite()));
    assert_eq!(encoder_hash(&fx), before);
    let stack = model.stack.as_ref().expect("encoders copied into the model");
    let copied = model.store.value(stack.structure.tables[0].table);
    assert_ne!(copied, fx.structure.store.value(fx.structure.encoder.tables[0].table));
    let loaded = LatencyModel::from_bytes(&model.to_bytes()).unwrap();
    assert_eq!(loaded.encoder_mode(), EncoderMode::Finetune);
    let refs: Vec<&DownstreamSample> = samples.iter().collect();
    let preds = model.predict(&refs).unwrap();
    assert!(preds.iter().all(|&p| p >= 0.0));
    assert_eq!(loaded.predict(&refs).unwrap(), preds);
}

#[test]
fn classifier_trains_and_round_trips() {
    let fx = Fixture::new();
    let before = encoder_hash(&fx);
    let plans = gen_classification_corpus(&fx.spec, 3, 2, 12, 0.1).unwrap();
    let samples = fx.encoders().samples(&plans, false).unwrap();
    let map = ClusterMap::from_samples(&samples).unwrap();
    assert_eq!((map.n_templates(), map.n_clusters), (6, 3));
    let config = ClassifierConfig {
        hidden: vec![16],
        ..ClassifierConfig::default()
    };
    let opts = DownstreamTrainOptions {
        epochs: 10,
        batch_size: 8,
        ..DownstreamTrainOptions::default()
    };
    let (model, report) = train_classifier(&samples, &map, &config, 1.0, &opts, None).unwrap();
    for acc in [report.dev_template_acc, report.test_template_acc, report.test_cluster_acc] {
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(report.test_cluster_acc >= report.test_template_acc);
    assert_eq!(encoder_hash(&fx), before);
    let loaded = QueryClassifier::from_bytes(&model.to_bytes()).unwrap();
    assert_eq!(loaded.classify_query(&samples[0]).unwrap(), model.classify_query(&samples[0]).unwrap());
    assert_eq!(ClusterMap::from_json(&map.to_json()).unwrap(), map);

    let mut bad = samples.clone();
    bad[0].template = Some(17);
    assert!(matches!(train_classifier(&bad, &map, &config, 1.0, &opts, None), Err(ModelError::UnknownLabel(17))));

    let table = accuracy_table(&samples, &map, &config, &Ablation::ALL, &[0.3, 1.0], &opts).unwrap();
    assert_eq!(table.len(), 6);
    assert_eq!(accuracy_csv(&table).lines().count(), 7);
}

#[test]
fn classifier_finetune_mode() {
    let fx = Fixture::new();
    let enc = fx.encoders();
    let plans = gen_classification_corpus(&fx.spec, 2, 2, 8, 0.1).unwrap();
    let samples = enc.samples(&plans, true).unwrap();
    let map = ClusterMap::from_samples(&samples).unwrap();
    let config = ClassifierConfig {
        hidden: vec![8],
        ..ClassifierConfig::default()
    };
    let opts = DownstreamTrainOptions {
        epochs: 3,
        batch_size: 8,
        ..DownstreamTrainOptions::default()
    };
    let (model, _) = train_classifier(&samples, &map, &config, 1.0, &opts, Some(&enc)).unwrap();
    assert!(model.stack.is_some());
    let out = model.classify_query(&samples[1]).unwrap();
    assert!((out.clusters.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

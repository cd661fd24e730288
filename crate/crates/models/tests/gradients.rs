//! Finite-difference checks of the model stacks at 64-bit.

use qplan_core::linearize::Vocabulary;
use qplan_core::plan::parse_plan_document;
use qplan_models::downstream::{Ablation, LatencyModelConfig, LatencyNet};
use qplan_models::perf::{Architecture, PerfEncoderConfig, PerfNet};
use qplan_models::structure::{MatchingHead, StructureEncoderConfig, StructureModel};
use qplan_nn::{grad_check, GradCheckOptions, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

/// Moves zero-initialized biases off ReLU kinks, where central differences
/// are undefined.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matching_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let head = MatchingHead::new(&mut store, "head", 5, &mut rng);
    let vi = rand_tensor(4, 5, &mut rng);
    let vj = rand_tensor(4, 5, &mut rng);
    let target = Tensor::new(4, 1, vec![0.1, 0.9, 0.5, 0.3]).unwrap();
    let report = grad_check(&store, &[vi, vj], GradCheckOptions::default(), |t, s, x| {
        let y = head.forward(t, s, x[0], x[1]);
        t.mse(y, &target, None)
    });
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn full_ppsr_stack() {
    let config = StructureEncoderConfig {
        d_model: 8,
        heads: 2,
        layers: 2,
        d_ff: 12,
        max_sequence_length: 32,
        dropout: 0.0,
        level_dims: [4, 2, 2],
    };
    let model = StructureModel::new(config, Vocabulary::default(), 4).unwrap();
    let a = parse_plan_document(
        r#"{"Node Type": "Hash Join", "Plans": [{"Node Type": "Seq Scan"}, {"Node Type": "Hash", "Plans": [{"Node Type": "Index Scan"}]}]}"#,
    )
    .unwrap();
    let b = parse_plan_document(r#"{"Node Type": "Sort", "Plans": [{"Node Type": "Seq Scan"}]}"#).unwrap();
    let (ia, ib) = (model.ids(&a).unwrap(), model.ids(&b).unwrap());
    let target = Tensor::new(1, 1, vec![0.4]).unwrap();
    let report = grad_check(&model.store, &[], GradCheckOptions::default(), |t, s, _| {
        let va = model.encoder.encode(t, s, &ia, None).unwrap();
        let vb = model.encoder.encode(t, s, &ib, None).unwrap();
        let y = model.head.forward(t, s, va, vb);
        t.mse(y, &target, None)
    });
    assert!(report.checked > 500);
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn three_column_stack() {
    let config = PerfEncoderConfig {
        node_width: 6,
        meta_width: 4,
        db_width: 3,
        node_hidden: vec![5, 4],
        meta_hidden: vec![3, 3],
        db_hidden: vec![3, 2],
        merge_dim: 6,
        embedding_dim: 7,
        ..PerfEncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let net = PerfNet::new(&mut store, "perf", &config, Architecture::MultiColumn, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let inputs = [rand_tensor(3, 6, &mut rng), rand_tensor(3, 4, &mut rng), rand_tensor(3, 3, &mut rng)];
    let target = rand_tensor(3, 3, &mut rng);
    let mask = Tensor::new(3, 3, vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    let report = grad_check(&store, &inputs, GradCheckOptions::default(), |t, s, x| {
        let e = net.embedding(t, s, x[0], x[1], x[2]);
        let y = net.heads(t, s, e);
        t.mse(y, &target, Some(&mask))
    });
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn single_column_stack() {
    let config = PerfEncoderConfig {
        node_width: 4,
        meta_width: 3,
        db_width: 2,
        merge_dim: 5,
        embedding_dim: 4,
        ..PerfEncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let net = PerfNet::new(&mut store, "perf", &config, Architecture::SingleColumn { hidden: 6 }, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let inputs = [rand_tensor(2, 4, &mut rng), rand_tensor(2, 3, &mut rng), rand_tensor(2, 2, &mut rng)];
    let target = rand_tensor(2, 3, &mut rng);
    let report = grad_check(&store, &inputs, GradCheckOptions::default(), |t, s, x| {
        let e = net.embedding(t, s, x[0], x[1], x[2]);
        let y = net.heads(t, s, e);
        t.mse(y, &target, None)
    });
    assert!(report.passes(TOL), "{report:?}");
}

#[test]
fn latency_head() {
    for ablation in Ablation::ALL {
        let config = LatencyModelConfig {
            reshape_dim: 4,
            hidden: vec![6, 5],
            ablation,
            structure_dim: 5,
            perf_dim: 8,
            settings_width: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let net = LatencyNet::new(&mut store, "lat", &config, &mut rng).unwrap();
        jitter(&mut store, &mut rng);
        let inputs = [rand_tensor(3, 5, &mut rng), rand_tensor(3, 8, &mut rng), rand_tensor(3, 6, &mut rng)];
        let target = Tensor::new(3, 1, vec![0.5, 2.0, 1.2]).unwrap();
        let report = grad_check(&store, &inputs, GradCheckOptions::default(), |t, s, x| {
            let sv = ablation.uses_structure().then_some(x[0]);
            let cv = ablation.uses_perf().then_some(x[1]);
            let y = net.forward(t, s, sv, cv, x[2]);
            t.mse(y, &target, None)
        });
        assert!(report.passes(TOL), "{}: {report:?}", ablation.name());
    }
}

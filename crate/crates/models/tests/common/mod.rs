//! Small untrained encoders and a synthetic workload shared by the suites.

#![allow(dead_code)]

use qplan_core::catalog::Catalog;
use qplan_core::datagen::{GeneratedPlan, SyntheticSpec};
use qplan_core::linearize::Vocabulary;
use qplan_core::plan::{FeatureSchema, OperatorGroup};
use qplan_models::perf::{Architecture, PerfEncoderConfig, PerfEncoderSet, PerfModel};
use qplan_models::structure::{StructureEncoderConfig, StructureModel};

pub fn tiny_structure(seed: u64) -> StructureModel {
    let config = StructureEncoderConfig {
        d_model: 16,
        heads: 2,
        layers: 1,
        d_ff: 16,
        max_sequence_length: 512,
        dropout: 0.0,
        level_dims: [8, 4, 4],
    };
    StructureModel::new(config, Vocabulary::default(), seed).unwrap()
}

pub fn tiny_perf_config() -> PerfEncoderConfig {
    PerfEncoderConfig {
        node_hidden: vec![8, 8],
        meta_hidden: vec![4, 4],
        db_hidden: vec![4, 4],
        merge_dim: 8,
        embedding_dim: 6,
        ..PerfEncoderConfig::default()
    }
}

pub fn tiny_perf_set(schema: &FeatureSchema, seed: u64) -> PerfEncoderSet {
    PerfEncoderSet {
        models: OperatorGroup::MODELED
            .iter()
            .map(|&g| PerfModel::new(g, tiny_perf_config(), Architecture::MultiColumn, schema, seed ^ g as u64).unwrap())
            .collect(),
    }
}

pub struct Fixture {
    pub spec: SyntheticSpec,
    pub catalog: Catalog,
    pub schema: FeatureSchema,
    pub structure: StructureModel,
    pub perf: PerfEncoderSet,
}

impl Fixture {
    pub fn new() -> Self {
        let spec = SyntheticSpec::tpch_like(3);
        let schema = FeatureSchema::default();
        Self {
            catalog: spec.catalog(),
            structure: tiny_structure(1),
            perf: tiny_perf_set(&schema, 2),
            spec,
            schema,
        }
    }

    pub fn encoders(&self) -> qplan_models::downstream::Encoders<'_> {
        qplan_models::downstream::Encoders {
            structure: &self.structure,
            perf: &self.perf,
            catalog: &self.catalog,
            schema: &self.schema,
        }
    }

    pub fn latency_plans(&self, templates: usize, configs: usize) -> Vec<GeneratedPlan> {
        qplan_core::datagen::gen_latency_corpus(&self.spec, templates, configs).unwrap()
    }
}

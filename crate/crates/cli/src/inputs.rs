//! Loaders for the file formats the commands consume.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use qplan_core::catalog::{Catalog, DbConfig};
use qplan_core::datagen::{read_corpus, CorpusHeader, GeneratedPlan, ScoredPair, Split, Splits};
use qplan_core::plan::{parse_plan_document, parse_plan_jsonl, FeatureSchema, PlanTree};
use qplan_core::OperatorGroup;
use qplan_models::downstream::{ClusterMap, DownstreamSample, Encoders};
use qplan_models::perf::{PerfEncoderSet, PerfModel};
use qplan_models::structure::StructureModel;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::context::Ctx;
use crate::error::CliError;

fn is_corpus(text: &str) -> bool {
    text.lines()
        .find(|l| !l.trim().is_empty())
        .and_then(|l| serde_json::from_str::<Value>(l).ok())
        .is_some_and(|v| v.get("header").is_some())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "plan".to_owned(), |s| s.to_string_lossy().into_owned())
}

/// Plans of a corpus, a JSONL file or a single plan document, with ids.
/// Ids are corpus ids, then source ids, then `<file stem>-<line>`.
pub fn load_plans(ctx: &mut Ctx, path: &Path) -> Result<Vec<(String, PlanTree)>, CliError> {
    let text = ctx.read_text(path)?;
    if is_corpus(&text) {
        let (_, plans) = read_corpus(&text)?;
        return Ok(plans.into_iter().map(|p| (p.id, p.tree)).collect());
    }
    if let Ok(tree) = parse_plan_document(&text) {
        let id = tree.source_id.clone().unwrap_or_else(|| stem(path));
        return Ok(vec![(id, tree)]);
    }
    let trees = parse_plan_jsonl(&text)?;
    Ok(trees
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t.source_id.clone().unwrap_or_else(|| format!("{}-{i}", stem(path))), t))
        .collect())
}

/// The single plan of a plan document.
pub fn load_one_plan(ctx: &mut Ctx, path: &Path) -> Result<PlanTree, CliError> {
    let mut plans = load_plans(ctx, path)?;
    match plans.len() {
        1 => Ok(plans.remove(0).1),
        n => Err(CliError::data(format!("{}: expected one plan, found {n}", path.display()))),
    }
}

pub fn load_corpus(ctx: &mut Ctx, path: &Path) -> Result<(CorpusHeader, Vec<GeneratedPlan>), CliError> {
    let text = ctx.read_text(path)?;
    Ok(read_corpus(&text)?)
}

/// Id to position, rejecting duplicates.
pub fn id_index<'a>(ids: impl Iterator<Item = &'a str>) -> Result<HashMap<&'a str, usize>, CliError> {
    let mut index = HashMap::new();
    for (i, id) in ids.enumerate() {
        if index.insert(id, i).is_some() {
            return Err(CliError::data(format!("duplicate plan id {id:?}")));
        }
    }
    Ok(index)
}

pub fn load_catalog(ctx: &mut Ctx, path: Option<&Path>, header: Option<&CorpusHeader>) -> Result<Catalog, CliError> {
    match (path, header) {
        (Some(p), _) => Ok(Catalog::from_jsonl(&ctx.read_text(p)?)?),
        (None, Some(h)) => Ok(h.spec.catalog()),
        (None, None) => Ok(Catalog::default()),
    }
}

pub fn load_schema(ctx: &mut Ctx, path: Option<&Path>) -> Result<FeatureSchema, CliError> {
    let Some(path) = path else {
        return Ok(FeatureSchema::default());
    };
    let schema = FeatureSchema::from_json(&ctx.read_text(path)?)?;
    schema.validate().map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(schema)
}

pub fn load_db_config(ctx: &mut Ctx, path: Option<&Path>) -> Result<DbConfig, CliError> {
    match path {
        Some(p) => Ok(DbConfig::from_kv(&ctx.read_text(p)?)?),
        None => Ok(DbConfig::defaults()),
    }
}

pub fn load_structure(ctx: &mut Ctx, path: &Path) -> Result<StructureModel, CliError> {
    Ok(StructureModel::from_bytes(&ctx.read_checkpoint(path)?)?)
}

/// File name of a group's checkpoint inside a performance-encoder directory.
pub fn perf_file(group: OperatorGroup) -> String {
    format!("{}.qpck", group.name().to_lowercase())
}

pub fn load_perf_set(ctx: &mut Ctx, dir: &Path, schema: &FeatureSchema) -> Result<PerfEncoderSet, CliError> {
    let mut models = Vec::new();
    for g in OperatorGroup::MODELED {
        let bytes = ctx.read_checkpoint(&dir.join(perf_file(g)))?;
        models.push(PerfModel::from_bytes(&bytes, schema)?);
    }
    let set = PerfEncoderSet { models };
    set.check_complete()?;
    Ok(set)
}

/// One row of a plan-pair dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub plan_a: String,
    pub plan_b: String,
    pub smatch: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSplits {
    pub train: Vec<ScoredPair>,
    pub dev: Vec<ScoredPair>,
    pub test: Vec<ScoredPair>,
}

/// Reads pairs against plan positions. Rows without a split are divided
/// 20:1:1 with `seed`.
pub fn load_pairs(ctx: &mut Ctx, path: &Path, index: &HashMap<&str, usize>, seed: u64) -> Result<PairSplits, CliError> {
    let text = ctx.read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: PairRow = serde_json::from_str(line).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let pos = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| CliError::data(format!("{} line {}: unknown plan {id:?}", path.display(), i + 1)))
        };
        let pair = ScoredPair {
            a: pos(&row.plan_a)?,
            b: pos(&row.plan_b)?,
            score: row.smatch,
        };
        rows.push((pair, row.split));
    }
    if rows.is_empty() {
        return Err(CliError::data(format!("{}: no pairs", path.display())));
    }
    let mut out = PairSplits::default();
    let fallback = rows.iter().all(|(_, s)| s.is_none()).then(|| {
        let s = Splits::by_ratio(rows.len(), [20, 1, 1], seed);
        let mut of = vec![Split::Train; rows.len()];
        for &i in &s.dev {
            of[i] = Split::Dev;
        }
        for &i in &s.test {
            of[i] = Split::Test;
        }
        of
    });
    for (i, (pair, split)) in rows.into_iter().enumerate() {
        let split = split.or_else(|| fallback.as_ref().map(|f| f[i])).unwrap_or(Split::Train);
        match split {
            Split::Train => out.train.push(pair),
            Split::Dev => out.dev.push(pair),
            Split::Test => out.test.push(pair),
        }
    }
    Ok(out)
}

/// One row of a latency dataset. Relative paths are resolved against the
/// dataset file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub plan_file: PathBuf,
    #[serde(default)]
    pub catalog_file: Option<PathBuf>,
    #[serde(default)]
    pub config_file: Option<PathBuf>,
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub template: Option<usize>,
}

/// One row of a classification label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub plan_file: PathBuf,
    pub template_id: usize,
    #[serde(default)]
    pub catalog_file: Option<PathBuf>,
    #[serde(default)]
    pub config_file: Option<PathBuf>,
}

/// Plans with their configurations and the catalog each was planned against.
#[derive(Debug, Clone, Default)]
pub struct Workload {
    pub plans: Vec<GeneratedPlan>,
    pub catalogs: Vec<Catalog>,
    pub catalog_of: Vec<usize>,
}

/// Where a downstream command takes its plans from; exactly one of
/// `corpus`, `dataset`, `labels` and `plan` is set.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sources<'a> {
    pub corpus: Option<&'a Path>,
    pub dataset: Option<&'a Path>,
    pub labels: Option<&'a Path>,
    pub plan: Option<&'a Path>,
    pub db_config: Option<&'a Path>,
    pub catalog: Option<&'a Path>,
    pub cluster_map: Option<&'a Path>,
}

fn read_rows<T: for<'de> Deserialize<'de>>(ctx: &mut Ctx, path: &Path) -> Result<Vec<T>, CliError> {
    let text = ctx.read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

struct FileWorkload<'c> {
    ctx: &'c mut Ctx,
    base: PathBuf,
    default_catalog: Option<PathBuf>,
    catalog_paths: Vec<Option<PathBuf>>,
    out: Workload,
}

impl FileWorkload<'_> {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn push(&mut self, plan_file: &Path, catalog: Option<&Path>, config: Option<&Path>, template: Option<usize>, latency_ms: Option<f64>) -> Result<(), CliError> {
        let plan_path = self.resolve(plan_file);
        let tree = load_one_plan(self.ctx, &plan_path)?;
        let config = load_db_config(self.ctx, config.map(|c| self.resolve(c)).as_deref())?;
        let cat_path = catalog.map(|c| self.resolve(c)).or_else(|| self.default_catalog.clone());
        let k = match self.catalog_paths.iter().position(|p| *p == cat_path) {
            Some(k) => k,
            None => {
                let cat = load_catalog(self.ctx, cat_path.as_deref(), None)?;
                self.catalog_paths.push(cat_path);
                self.out.catalogs.push(cat);
                self.out.catalogs.len() - 1
            }
        };
        self.out.plans.push(GeneratedPlan {
            id: plan_file.display().to_string(),
            config,
            tree,
            template,
            cluster: None,
            latency_ms,
        });
        self.out.catalog_of.push(k);
        Ok(())
    }
}

/// Loads the plans named by `src`, and the cluster map when one is given.
pub fn load_workload(ctx: &mut Ctx, src: &Sources) -> Result<(Workload, Option<ClusterMap>), CliError> {
    let given = [src.corpus, src.dataset, src.labels, src.plan].iter().filter(|p| p.is_some()).count();
    if given != 1 {
        return Err(CliError::usage("give exactly one of --corpus, --dataset, --labels, --plan"));
    }
    let map = match src.cluster_map {
        Some(p) => Some(ClusterMap::from_json(&ctx.read_text(p)?)?),
        None => None,
    };
    let mut wl = if let Some(path) = src.corpus {
        let (header, plans) = load_corpus(ctx, path)?;
        let catalog = load_catalog(ctx, src.catalog, Some(&header))?;
        Workload {
            catalog_of: vec![0; plans.len()],
            plans,
            catalogs: vec![catalog],
        }
    } else if let Some(path) = src.plan {
        let tree = load_one_plan(ctx, path)?;
        let config = load_db_config(ctx, src.db_config)?;
        let catalog = load_catalog(ctx, src.catalog, None)?;
        Workload {
            plans: vec![GeneratedPlan {
                id: tree.source_id.clone().unwrap_or_else(|| stem(path)),
                config,
                tree,
                template: None,
                cluster: None,
                latency_ms: None,
            }],
            catalogs: vec![catalog],
            catalog_of: vec![0],
        }
    } else {
        let path = src.dataset.or(src.labels).expect("one source given");
        let mut fw = FileWorkload {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            default_catalog: src.catalog.map(Path::to_path_buf),
            catalog_paths: Vec::new(),
            out: Workload::default(),
            ctx,
        };
        if src.dataset.is_some() {
            for r in read_rows::<LatencyRow>(fw.ctx, path)? {
                fw.push(&r.plan_file, r.catalog_file.as_deref(), r.config_file.as_deref(), r.template, r.latency_ms)?;
            }
        } else {
            for r in read_rows::<LabelRow>(fw.ctx, path)? {
                fw.push(&r.plan_file, r.catalog_file.as_deref(), r.config_file.as_deref(), Some(r.template_id), None)?;
            }
        }
        fw.out
    };
    if wl.plans.is_empty() {
        return Err(CliError::data("no plans"));
    }
    if let Some(map) = &map {
        for p in &mut wl.plans {
            if let Some(t) = p.template {
                let c = map
                    .cluster_of
                    .get(t)
                    .ok_or_else(|| CliError::data(format!("template {t} missing from the cluster map")))?;
                p.cluster = Some(*c);
            }
        }
    }
    Ok((wl, map))
}

impl Workload {
    /// Embeds every plan with the encoders, using each plan's own catalog.
    pub fn samples(
        &self,
        structure: &StructureModel,
        perf: &PerfEncoderSet,
        schema: &FeatureSchema,
        keep_source: bool,
    ) -> Result<Vec<DownstreamSample>, CliError> {
        let mut out = Vec::with_capacity(self.plans.len());
        for (p, &k) in self.plans.iter().zip(&self.catalog_of) {
            let enc = Encoders {
                structure,
                perf,
                catalog: &self.catalogs[k],
                schema,
            };
            out.extend(enc.samples(std::slice::from_ref(p), keep_source)?);
        }
        Ok(out)
    }
}

//! Declarative run files and the staged pipeline driver.
//!
//! Every stage keeps its outputs under `output_dir` and reuses them when its
//! inputs are unchanged, so a rerun with the same config only re-renders
//! the report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{build_task_dataset_with_ratio, CorpusStore, PaperRecord, QualityMetric, TaskDataset, DEFAULT_SPLIT_RATIO};
use crate::featurize::{
    featurize_summaries, file_stem_for, FeatureCache, MockSae, PaperFeatureVector, PlantedFeature, ReferenceSaeBackend,
    ReferenceSaeWeights, SaeBackend, SaeConfig, ToyEmbeddingModel,
};
use crate::interpret::{build_report, findings_for, ProbeResult, ReportBundle, UrlTemplates};
use crate::journal::AnnotationJournal;
use crate::probe::{
    evaluate, run_baseline, select_max_leaf_nodes, train_tree, AccuracyGrid, BaselineBackend, EvalRecord, LabeledVector,
    MajorityBaseline, OracleBaseline, TreeConfig, TreeProbe,
};
use crate::summarize::{
    summarize_papers, CacheStats, GenerationBackend, HttpGenerationBackend, MockGenerator, PromptConfig, SummarizeOptions,
    SummaryCache, SummaryRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Bin,
    Summarize,
    Featurize,
    Train,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Self::Ingest, Self::Bin, Self::Summarize, Self::Featurize, Self::Train, Self::Evaluate, Self::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ingest => "ingest",
            Self::Bin => "bin",
            Self::Summarize => "summarize",
            Self::Featurize => "featurize",
            Self::Train => "train",
            Self::Evaluate => "evaluate",
            Self::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BoxError,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Self::Stage { stage, .. } => Some(*stage),
            Self::Config(_) => None,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn at<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, source: e.into() }
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::Config(message.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Mock,
    Http,
    /// Registered in code under the generator's name.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    #[serde(default = "PromptConfig::instruction_tuned")]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub max_concurrency: Option<usize>,
    /// Mock only: prefix output with the echoed prompt.
    #[serde(default)]
    pub echo_prompt: bool,
    #[serde(default)]
    pub sentences: Option<usize>,
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaeKind {
    Mock,
    /// JumpReLU weights from a tensor container over a toy embedding model.
    Reference,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeSpec {
    pub kind: SaeKind,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub layer_index: Option<u32>,
    #[serde(default)]
    pub feature_count: Option<usize>,
    #[serde(default)]
    pub sae_id: Option<String>,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub active_per_token: Option<usize>,
    #[serde(default)]
    pub planted: Vec<PlantedFeature>,
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub embedding_seed: Option<u64>,
}

impl SaeSpec {
    fn declared_config(&self, name: &str) -> Result<Option<SaeConfig>> {
        match (&self.model_id, self.layer_index, self.feature_count, &self.sae_id) {
            (Some(m), Some(l), Some(f), Some(s)) => SaeConfig::new(m.clone(), l, f, s.clone())
                .map(Some)
                .map_err(|e| config_err(format!("sae `{name}`: {e}"))),
            (None, None, None, None) => Ok(None),
            _ => Err(config_err(format!(
                "sae `{name}`: model_id, layer_index, feature_count and sae_id must be given together"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettingSpec {
    pub id: String,
    pub generator: String,
    pub sae: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_candidates")]
    pub candidate_leaf_values: Vec<usize>,
    #[serde(default = "default_reference")]
    pub reference_setting: String,
}

fn default_folds() -> usize {
    TreeConfig::default().cv_folds
}

fn default_candidates() -> Vec<usize> {
    TreeConfig::default().candidate_leaf_values
}

fn default_reference() -> String {
    TreeConfig::default().reference_setting
}

impl Default for TreeSection {
    fn default() -> Self {
        Self { cv_folds: default_folds(), candidate_leaf_values: default_candidates(), reference_setting: default_reference() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    /// `majority`, `oracle`, or a registered baseline name.
    pub backend: String,
    #[serde(default = "PromptConfig::base_completion")]
    pub prompt: PromptConfig,
}

fn default_ratio() -> f64 {
    DEFAULT_SPLIT_RATIO
}

fn default_tasks() -> Vec<QualityMetric> {
    QualityMetric::ALL.to_vec()
}

fn default_true() -> bool {
    true
}

fn default_k() -> usize {
    5
}

fn default_max_tokens() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub papers: PathBuf,
    pub venues: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<QualityMetric>,
    /// Keep per-token matrices for saliency views.
    #[serde(default = "default_true")]
    pub retain_tokens: bool,
    #[serde(default = "default_k")]
    pub exemplar_k: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// Annotation journal; defaults to `annotations.jsonl` in `output_dir`.
    #[serde(default)]
    pub journal: Option<PathBuf>,
    #[serde(default)]
    pub generators: BTreeMap<String, GeneratorSpec>,
    #[serde(default)]
    pub saes: BTreeMap<String, SaeSpec>,
    pub settings: Vec<SettingSpec>,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub baseline: Option<BaselineSpec>,
    /// Merged over the built-in dashboard namespaces.
    #[serde(default)]
    pub url_templates: UrlTemplates,
}

impl RunConfig {
    /// Parses a TOML run file; relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.resolve_paths(base_dir);
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.papers);
        fix(&mut self.venues);
        fix(&mut self.output_dir);
        if let Some(j) = self.journal.as_mut() {
            fix(j);
        }
        for spec in self.saes.values_mut() {
            if let Some(w) = spec.weights.as_mut() {
                fix(w);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn journal_path(&self) -> PathBuf {
        self.journal.clone().unwrap_or_else(|| self.output_dir.join("annotations.jsonl"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("report")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output_dir.join("cache")
    }

    pub fn feature_cache_dir(&self) -> PathBuf {
        self.cache_dir().join("features")
    }

    pub fn tasks_dir(&self) -> PathBuf {
        self.output_dir.join("tasks")
    }

    pub fn url_templates(&self) -> UrlTemplates {
        UrlTemplates::gemma_scope_defaults().merged(&self.url_templates)
    }

    /// Tree settings shared by every probe in a run.
    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            max_leaf_nodes: self.tree.candidate_leaf_values.iter().copied().min().unwrap_or(2),
            cv_folds: self.tree.cv_folds,
            candidate_leaf_values: self.tree.candidate_leaf_values.clone(),
            seed: self.seed,
            split_criterion: Default::default(),
            reference_setting: self.tree.reference_setting.clone(),
        }
    }

    /// Self-contained mock run over the given corpus files.
    pub fn mock(papers: PathBuf, venues: PathBuf, output_dir: PathBuf, seed: u64, sae: SaeSpec) -> Self {
        Self {
            papers,
            venues,
            output_dir,
            seed,
            split_ratio: DEFAULT_SPLIT_RATIO,
            tasks: default_tasks(),
            retain_tokens: true,
            exemplar_k: default_k(),
            max_tokens: default_max_tokens(),
            journal: None,
            generators: BTreeMap::from([(
                "mock".to_owned(),
                GeneratorSpec {
                    kind: GeneratorKind::Mock,
                    prompt: PromptConfig::instruction_tuned(),
                    url: None,
                    timeout_secs: default_timeout(),
                    max_concurrency: None,
                    echo_prompt: false,
                    sentences: None,
                },
            )]),
            saes: BTreeMap::from([("mock-sae".to_owned(), sae)]),
            settings: vec![SettingSpec { id: "setting-1".into(), generator: "mock".into(), sae: "mock-sae".into() }],
            tree: TreeSection::default(),
            baseline: Some(BaselineSpec { backend: "majority".into(), prompt: PromptConfig::base_completion() }),
            url_templates: UrlTemplates::default(),
        }
    }
}

pub type BaselineFactory = Arc<dyn Fn() -> Box<dyn BaselineBackend> + Send + Sync>;

/// Backends supplied in code, referenced from run files with `kind = "external"`.
#[derive(Clone, Default)]
pub struct BackendRegistry {
    generators: BTreeMap<String, Arc<dyn GenerationBackend>>,
    saes: BTreeMap<String, Arc<dyn SaeBackend>>,
    baselines: BTreeMap<String, BaselineFactory>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendRegistry")
            .field("generators", &self.generators.keys().collect::<Vec<_>>())
            .field("saes", &self.saes.keys().collect::<Vec<_>>())
            .field("baselines", &self.baselines.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_generator(&mut self, name: impl Into<String>, backend: Arc<dyn GenerationBackend>) -> &mut Self {
        self.generators.insert(name.into(), backend);
        self
    }

    pub fn register_sae(&mut self, name: impl Into<String>, backend: Arc<dyn SaeBackend>) -> &mut Self {
        self.saes.insert(name.into(), backend);
        self
    }

    pub fn register_baseline(&mut self, name: impl Into<String>, factory: BaselineFactory) -> &mut Self {
        self.baselines.insert(name.into(), factory);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaskStats {
    pub high: usize,
    pub low: usize,
    pub train: usize,
    pub test: usize,
}

/// Counters reported after a run; cache stats count reused vs recomputed items.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineStats {
    pub papers: usize,
    pub incomplete_papers: usize,
    pub tasks: BTreeMap<String, TaskStats>,
    pub task_cache: CacheStats,
    pub summaries: BTreeMap<String, CacheStats>,
    pub features: BTreeMap<String, CacheStats>,
    pub leaf_budget_cache: CacheStats,
    pub leaf_budgets: BTreeMap<String, usize>,
    pub tree_cache: CacheStats,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub completed: Vec<Stage>,
    pub stats: PipelineStats,
    pub evaluations: Vec<EvalRecord>,
    pub baselines: Vec<EvalRecord>,
    pub bundle: Option<ReportBundle>,
}

/// Everything evaluations.json holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub records: Vec<EvalRecord>,
    pub baselines: Vec<EvalRecord>,
}

struct Setting {
    spec: SettingSpec,
    number: usize,
    generator: Arc<dyn GenerationBackend>,
    prompt: PromptConfig,
    sae: Arc<dyn SaeBackend>,
}

/// A validated run: every backend is resolved before any stage executes.
pub struct Pipeline {
    config: RunConfig,
    settings: Vec<Setting>,
    baseline: Option<(BaselineSpec, Option<BaselineFactory>)>,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        Self::with_registry(config, &BackendRegistry::default())
    }

    pub fn with_registry(config: RunConfig, registry: &BackendRegistry) -> Result<Self> {
        if config.settings.is_empty() {
            return Err(config_err("at least one setting is required"));
        }
        if config.tasks.is_empty() {
            return Err(config_err("at least one task is required"));
        }
        if config.tasks.iter().collect::<BTreeSet<_>>().len() != config.tasks.len() {
            return Err(config_err("tasks must not repeat"));
        }
        if !(config.split_ratio > 0.0 && config.split_ratio < 1.0) {
            return Err(config_err(format!("split_ratio {} must lie in (0, 1)", config.split_ratio)));
        }
        if config.exemplar_k == 0 {
            return Err(config_err("exemplar_k must be at least 1"));
        }
        if config.max_tokens == 0 {
            return Err(config_err("max_tokens must be at least 1"));
        }
        let tree = config.tree_config();
        if tree.candidate_leaf_values.is_empty() {
            return Err(config_err("tree.candidate_leaf_values must not be empty"));
        }
        tree.validate().map_err(|e| config_err(e.to_string()))?;

        let mut generators: BTreeMap<&str, (Arc<dyn GenerationBackend>, PromptConfig)> = BTreeMap::new();
        let mut saes: BTreeMap<&str, Arc<dyn SaeBackend>> = BTreeMap::new();
        let mut settings = Vec::new();
        let mut setting_ids = BTreeSet::new();
        let mut spaces: BTreeMap<String, String> = BTreeMap::new();
        for (i, spec) in config.settings.iter().enumerate() {
            if !setting_ids.insert(spec.id.as_str()) {
                return Err(config_err(format!("duplicate setting id `{}`", spec.id)));
            }
            if !generators.contains_key(spec.generator.as_str()) {
                let g = config
                    .generators
                    .get(&spec.generator)
                    .ok_or_else(|| config_err(format!("setting `{}`: unknown generator `{}`", spec.id, spec.generator)))?;
                generators.insert(&spec.generator, (build_generator(&spec.generator, g, registry)?, g.prompt.clone()));
            }
            if !saes.contains_key(spec.sae.as_str()) {
                let s = config
                    .saes
                    .get(&spec.sae)
                    .ok_or_else(|| config_err(format!("setting `{}`: unknown sae `{}`", spec.id, spec.sae)))?;
                saes.insert(&spec.sae, build_sae(&spec.sae, s, config.seed, registry)?);
            }
            let sae = saes[spec.sae.as_str()].clone();
            // Annotations and API routes address a feature space by sae_id alone.
            let sae_id = sae.sae().sae_id.clone();
            if let Some(other) = spaces.insert(sae_id.clone(), spec.id.clone()) {
                return Err(config_err(format!("settings `{other}` and `{}` share sae_id `{sae_id}`", spec.id)));
            }
            let (generator, prompt) = generators[spec.generator.as_str()].clone();
            settings.push(Setting { spec: spec.clone(), number: i + 1, generator, prompt, sae });
        }

        let baseline = match &config.baseline {
            None => None,
            Some(b) => match b.backend.as_str() {
                "majority" | "oracle" => Some((b.clone(), None)),
                name => {
                    let factory = registry
                        .baselines
                        .get(name)
                        .cloned()
                        .ok_or_else(|| config_err(format!("unregistered baseline backend `{name}`")))?;
                    Some((b.clone(), Some(factory)))
                }
            },
        };
        Ok(Self { config, settings, baseline })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn setting_ids(&self) -> Vec<String> {
        self.settings.iter().map(|s| s.spec.id.clone()).collect()
    }

    pub fn sae_configs(&self) -> Vec<SaeConfig> {
        self.settings.iter().map(|s| s.sae.sae().clone()).collect()
    }

    /// Runs every stage.
    pub fn run(&self) -> Result<PipelineOutcome> {
        self.run_until(Stage::Report)
    }

    /// Runs stages in order up to and including `last`.
    pub fn run_until(&self, last: Stage) -> Result<PipelineOutcome> {
        let cfg = &self.config;
        let mut stats = PipelineStats::default();
        let mut completed = Vec::new();
        let outcome = |completed: Vec<Stage>, stats, evaluations, baselines, bundle| {
            Ok(PipelineOutcome { completed, stats, evaluations, baselines, bundle })
        };

        // Ingest
        let corpus = CorpusStore::from_paths(&cfg.papers, &cfg.venues).map_err(at(Stage::Ingest))?;
        stats.papers = corpus.len();
        stats.incomplete_papers = corpus.incomplete_ids().len();
        fs::create_dir_all(cfg.cache_dir()).map_err(at(Stage::Ingest))?;
        completed.push(Stage::Ingest);
        if last == Stage::Ingest {
            return outcome(completed, stats, vec![], vec![], None);
        }

        // Bin
        let tasks = self.bin(&corpus, &mut stats).map_err(at(Stage::Bin))?;
        completed.push(Stage::Bin);
        if last == Stage::Bin {
            return outcome(completed, stats, vec![], vec![], None);
        }

        // Summarize: only papers that made it into some task.
        let needed: BTreeSet<&str> = tasks.iter().flat_map(|t| t.entries.iter().map(|e| e.paper_id.as_str())).collect();
        let papers: Vec<&PaperRecord> =
            needed.iter().map(|id| &corpus.get(id).expect("task papers come from the corpus").paper).collect();
        let summaries = self.summarize(&papers, &mut stats).map_err(at(Stage::Summarize))?;
        completed.push(Stage::Summarize);
        if last == Stage::Summarize {
            return outcome(completed, stats, vec![], vec![], None);
        }

        let vectors = self.featurize(&summaries, &mut stats).map_err(at(Stage::Featurize))?;
        completed.push(Stage::Featurize);
        if last == Stage::Featurize {
            return outcome(completed, stats, vec![], vec![], None);
        }

        let trees = self.train(&tasks, &vectors, &mut stats).map_err(at(Stage::Train))?;
        completed.push(Stage::Train);
        if last == Stage::Train {
            return outcome(completed, stats, vec![], vec![], None);
        }

        let (evaluations, baselines) = self.evaluate(&tasks, &corpus, &vectors, &trees).map_err(at(Stage::Evaluate))?;
        stats.evaluations = evaluations.len();
        completed.push(Stage::Evaluate);
        if last == Stage::Evaluate {
            return outcome(completed, stats, evaluations, baselines, None);
        }

        let bundle = self.report(&tasks, &corpus, &vectors, &trees, &evaluations, &baselines).map_err(at(Stage::Report))?;
        completed.push(Stage::Report);
        outcome(completed, stats, evaluations, baselines, Some(bundle))
    }

    fn bin(&self, corpus: &CorpusStore, stats: &mut PipelineStats) -> std::result::Result<Vec<TaskDataset>, BoxError> {
        let cfg = &self.config;
        fs::create_dir_all(cfg.tasks_dir())?;
        let mut tasks = Vec::new();
        for &metric in &cfg.tasks {
            let task = build_task_dataset_with_ratio(corpus, metric, cfg.seed, cfg.split_ratio)?;
            task.validate()?;
            let path = cfg.tasks_dir().join(format!("{}.json", metric.slug()));
            count(&mut stats.task_cache, write_if_changed(&path, &(task.to_json()? + "\n"))?);
            stats.tasks.insert(
                metric.slug().to_owned(),
                TaskStats {
                    high: task.class_count(crate::corpus::Label::High),
                    low: task.class_count(crate::corpus::Label::Low),
                    train: task.split.train.len(),
                    test: task.split.test.len(),
                },
            );
            tasks.push(task);
        }
        Ok(tasks)
    }

    fn summarize(
        &self,
        papers: &[&PaperRecord],
        stats: &mut PipelineStats,
    ) -> std::result::Result<BTreeMap<String, BTreeMap<String, SummaryRecord>>, BoxError> {
        let cfg = &self.config;
        let dir = cfg.cache_dir().join("summaries");
        fs::create_dir_all(&dir)?;
        let options = SummarizeOptions { seed: cfg.seed, max_tokens: cfg.max_tokens, ..Default::default() };
        let mut out = BTreeMap::new();
        for s in &self.settings {
            let name = &s.spec.generator;
            if out.contains_key(name) {
                continue;
            }
            let mut cache = SummaryCache::open(dir.join(format!("{}.jsonl", file_stem_for(name))))?;
            let (records, cache_stats) = summarize_papers(s.generator.as_ref(), papers, &s.prompt, &options, &mut cache)?;
            stats.summaries.insert(name.clone(), cache_stats);
            out.insert(name.clone(), records);
        }
        Ok(out)
    }

    fn featurize(
        &self,
        summaries: &BTreeMap<String, BTreeMap<String, SummaryRecord>>,
        stats: &mut PipelineStats,
    ) -> std::result::Result<BTreeMap<String, BTreeMap<String, PaperFeatureVector>>, BoxError> {
        let mut cache = FeatureCache::open(self.config.feature_cache_dir())?;
        let mut out = BTreeMap::new();
        for s in &self.settings {
            let (vectors, cache_stats) =
                featurize_summaries(s.sae.as_ref(), &summaries[&s.spec.generator], Some(&mut cache), self.config.retain_tokens)?;
            stats.features.insert(s.spec.id.clone(), cache_stats);
            out.insert(s.spec.id.clone(), vectors);
        }
        Ok(out)
    }

    fn reference_setting(&self) -> &Setting {
        let wanted = &self.config.tree.reference_setting;
        self.settings.iter().find(|s| &s.spec.id == wanted).unwrap_or(&self.settings[0])
    }

    fn train(
        &self,
        tasks: &[TaskDataset],
        vectors: &BTreeMap<String, BTreeMap<String, PaperFeatureVector>>,
        stats: &mut PipelineStats,
    ) -> std::result::Result<BTreeMap<(String, String), TreeProbe>, BoxError> {
        let cfg = &self.config;
        let base = cfg.tree_config();
        let sel_dir = cfg.cache_dir().join("leaf_budgets");
        let tree_dir = cfg.cache_dir().join("trees");
        fs::create_dir_all(&sel_dir)?;
        fs::create_dir_all(&tree_dir)?;
        let reference = self.reference_setting();

        let mut trees = BTreeMap::new();
        for task in tasks {
            let task_json = task.to_json()?;
            let ref_train = labeled(task, &vectors[&reference.spec.id], true)?;
            let sel_key = digest(|h| {
                h.update(b"leaf-budget\0");
                h.update(task_json.as_bytes());
                h.update(serde_json::to_vec(&base).expect("tree config serializes"));
                hash_vectors(h, &ref_train);
            });
            let sel_path = sel_dir.join(format!("{}.json", task.task_id()));
            let budget = match read_keyed::<usize>(&sel_path, &sel_key)? {
                Some(b) => {
                    stats.leaf_budget_cache.hits += 1;
                    b
                }
                None => {
                    stats.leaf_budget_cache.misses += 1;
                    let b = select_max_leaf_nodes(&ref_train, &base)?;
                    write_keyed(&sel_path, &sel_key, &b)?;
                    b
                }
            };
            stats.leaf_budgets.insert(task.task_id().to_owned(), budget);
            let tree_config = base.clone().with_max_leaf_nodes(budget);

            let jobs: Vec<(&Setting, Vec<LabeledVector<'_>>)> = self
                .settings
                .iter()
                .map(|s| Ok((s, labeled(task, &vectors[&s.spec.id], true)?)))
                .collect::<std::result::Result<_, BoxError>>()?;
            let results: Vec<(String, TreeProbe, bool)> = jobs
                .par_iter()
                .map(|(s, train)| -> std::result::Result<_, BoxError> {
                    let key = digest(|h| {
                        h.update(b"tree\0");
                        h.update(task_json.as_bytes());
                        h.update(s.sae.sae().fingerprint().as_bytes());
                        h.update(serde_json::to_vec(&tree_config).expect("tree config serializes"));
                        hash_vectors(h, train);
                    });
                    let path = tree_dir.join(format!("{}.json", file_stem_for(&format!("{}__{}", task.task_id(), s.spec.id))));
                    if let Some(tree) = read_keyed::<TreeProbe>(&path, &key)? {
                        return Ok((s.spec.id.clone(), tree, true));
                    }
                    let tree = train_tree(train, &tree_config, task.metric)?;
                    write_keyed(&path, &key, &tree)?;
                    Ok((s.spec.id.clone(), tree, false))
                })
                .collect::<std::result::Result<_, BoxError>>()?;
            for (setting_id, tree, hit) in results {
                count(&mut stats.tree_cache, hit);
                trees.insert((task.task_id().to_owned(), setting_id), tree);
            }
        }
        Ok(trees)
    }

    fn evaluate(
        &self,
        tasks: &[TaskDataset],
        corpus: &CorpusStore,
        vectors: &BTreeMap<String, BTreeMap<String, PaperFeatureVector>>,
        trees: &BTreeMap<(String, String), TreeProbe>,
    ) -> std::result::Result<(Vec<EvalRecord>, Vec<EvalRecord>), BoxError> {
        let mut records = Vec::new();
        let mut baselines = Vec::new();
        for task in tasks {
            for s in &self.settings {
                let test = labeled(task, &vectors[&s.spec.id], false)?;
                let tree = &trees[&(task.task_id().to_owned(), s.spec.id.clone())];
                records.push(evaluate(tree, &test, &s.spec.id)?);
            }
            if let Some((spec, factory)) = &self.baseline {
                let mut backend: Box<dyn BaselineBackend> = match (spec.backend.as_str(), factory) {
                    (_, Some(f)) => f(),
                    ("oracle", None) => Box::new(OracleBaseline::for_task(task, corpus, &spec.prompt)?),
                    _ => Box::new(MajorityBaseline::default()),
                };
                baselines.push(run_baseline(backend.as_mut(), task, corpus, &spec.prompt)?);
            }
        }
        let file = EvaluationFile { records: records.clone(), baselines: baselines.clone() };
        write_if_changed(&self.config.output_dir.join("evaluations.json"), &(serde_json::to_string_pretty(&file)? + "\n"))?;
        Ok((records, baselines))
    }

    fn report(
        &self,
        tasks: &[TaskDataset],
        corpus: &CorpusStore,
        vectors: &BTreeMap<String, BTreeMap<String, PaperFeatureVector>>,
        trees: &BTreeMap<(String, String), TreeProbe>,
        records: &[EvalRecord],
        baselines: &[EvalRecord],
    ) -> std::result::Result<ReportBundle, BoxError> {
        let cfg = &self.config;
        let templates = cfg.url_templates();
        let mut results = Vec::new();
        for task in tasks {
            for s in &self.settings {
                let key = (task.task_id().to_owned(), s.spec.id.clone());
                let tree = trees[&key].clone();
                let eval = records
                    .iter()
                    .find(|r| r.task_id == key.0 && r.setting_id == key.1)
                    .cloned()
                    .ok_or("missing evaluation record")?;
                let findings =
                    findings_for(&tree, task, &s.spec.id, s.number, corpus, &vectors[&s.spec.id], &templates, cfg.exemplar_k)?;
                results.push(ProbeResult {
                    task_id: key.0,
                    task_number: task.metric.task_number(),
                    setting_id: key.1,
                    setting_number: s.number,
                    tree,
                    eval,
                    findings,
                });
            }
        }
        let task_order: Vec<(String, usize)> = tasks.iter().map(|t| (t.task_id().to_owned(), t.metric.task_number())).collect();
        let task_ids: Vec<String> = task_order.iter().map(|t| t.0.clone()).collect();
        let grid = AccuracyGrid::build(&task_ids, &self.setting_ids(), records, baselines);

        let journal_path = cfg.journal_path();
        let labels = if journal_path.exists() { AnnotationJournal::open(&journal_path)?.current_map() } else { BTreeMap::new() };
        let label = |sae: &str, task: &str, idx: usize| {
            labels.get(&crate::journal::AnnotationKey::new(sae, task, idx)).map(|a| a.label_text.clone())
        };
        let bundle = build_report(&task_order, &results, &grid, &label)?;
        bundle.write_to(&cfg.report_dir())?;
        Ok(bundle)
    }
}

fn build_generator(name: &str, spec: &GeneratorSpec, registry: &BackendRegistry) -> Result<Arc<dyn GenerationBackend>> {
    let concurrency_ok = spec.max_concurrency.is_none_or(|n| n > 0);
    if !concurrency_ok {
        return Err(config_err(format!("generator `{name}`: max_concurrency must be positive")));
    }
    Ok(match spec.kind {
        GeneratorKind::Mock => {
            let mut g = MockGenerator::new(name).echoing_prompt(spec.echo_prompt);
            if let Some(n) = spec.sentences {
                g = g.with_sentences(n);
            }
            if let Some(n) = spec.max_concurrency {
                g = g.with_max_concurrency(n);
            }
            Arc::new(g)
        }
        GeneratorKind::Http => {
            let url = spec.url.as_deref().ok_or_else(|| config_err(format!("generator `{name}`: http backends need a url")))?;
            let g = HttpGenerationBackend::new(name, url, Duration::from_secs(spec.timeout_secs))
                .map_err(|e| config_err(format!("generator `{name}`: {e}")))?
                .with_max_concurrency(spec.max_concurrency.unwrap_or(1));
            Arc::new(g)
        }
        GeneratorKind::External => registry
            .generators
            .get(name)
            .cloned()
            .ok_or_else(|| config_err(format!("unregistered generator backend `{name}`")))?,
    })
}

fn build_sae(name: &str, spec: &SaeSpec, run_seed: u64, registry: &BackendRegistry) -> Result<Arc<dyn SaeBackend>> {
    let declared = spec.declared_config(name)?;
    let need = |cfg: Option<SaeConfig>| cfg.ok_or_else(|| config_err(format!("sae `{name}`: feature space fields are required")));
    let wrap = |e: crate::featurize::FeatureError| config_err(format!("sae `{name}`: {e}"));
    Ok(match spec.kind {
        SaeKind::Mock => {
            let mut sae = MockSae::new(need(declared)?, spec.seed.unwrap_or(run_seed));
            if let Some(k) = spec.active_per_token {
                sae = sae.with_active_per_token(k);
            }
            for p in &spec.planted {
                sae = sae.with_planted(p.clone()).map_err(wrap)?;
            }
            Arc::new(sae)
        }
        SaeKind::Reference => {
            let path = spec.weights.as_ref().ok_or_else(|| config_err(format!("sae `{name}`: reference kind needs weights")))?;
            let weights = ReferenceSaeWeights::load(path).map_err(wrap)?;
            let model = ToyEmbeddingModel::new(weights.d_model(), spec.embedding_seed.unwrap_or(run_seed));
            Arc::new(ReferenceSaeBackend::new(need(declared)?, weights, Box::new(model)).map_err(wrap)?)
        }
        SaeKind::External => {
            let backend =
                registry.saes.get(name).cloned().ok_or_else(|| config_err(format!("unregistered sae backend `{name}`")))?;
            if let Some(d) = declared {
                d.ensure_same(backend.sae()).map_err(wrap)?;
            }
            backend
        }
    })
}

fn labeled<'a>(
    task: &TaskDataset,
    vectors: &'a BTreeMap<String, PaperFeatureVector>,
    train: bool,
) -> std::result::Result<Vec<LabeledVector<'a>>, BoxError> {
    let ids: Vec<(&str, crate::corpus::Label)> = if train { task.train().collect() } else { task.test().collect() };
    ids.into_iter()
        .map(|(id, label)| {
            vectors.get(id).map(|v| (v, label)).ok_or_else(|| format!("no feature vector for paper `{id}`").into())
        })
        .collect()
}

fn count(stats: &mut CacheStats, hit: bool) {
    if hit {
        stats.hits += 1;
    } else {
        stats.misses += 1;
    }
}

fn digest(feed: impl FnOnce(&mut Sha256)) -> String {
    let mut h = Sha256::new();
    feed(&mut h);
    hex::encode(h.finalize())
}

fn hash_vectors(h: &mut Sha256, data: &[LabeledVector<'_>]) {
    for (v, label) in data {
        h.update(v.paper_id.as_bytes());
        h.update([0, *label as u8]);
        for x in &v.values {
            h.update(x.to_bits().to_le_bytes());
        }
    }
}

/// Writes `content` unless the file already holds it; true means unchanged.
fn write_if_changed(path: &Path, content: &str) -> std::io::Result<bool> {
    if fs::read_to_string(path).is_ok_and(|old| old == content) {
        return Ok(true);
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content)?;
    Ok(false)
}

#[derive(Serialize, Deserialize)]
struct Keyed<T> {
    key: String,
    value: T,
}

fn read_keyed<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> std::result::Result<Option<T>, BoxError> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(None) };
    // A corrupt or stale entry is recomputed rather than trusted.
    match serde_json::from_str::<Keyed<T>>(&text) {
        Ok(k) if k.key == key => Ok(Some(k.value)),
        _ => Ok(None),
    }
}

fn write_keyed<T: Serialize>(path: &Path, key: &str, value: &T) -> std::result::Result<(), BoxError> {
    let text = serde_json::to_string(&Keyed { key: key.to_owned(), value })?;
    write_if_changed(path, &text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_toml() -> &'static str {
        r#"
papers = "data/papers.jsonl"
venues = "data/venues.jsonl"
output_dir = "out"
seed = 7
tasks = ["citation_count"]

[generators.mock]
kind = "mock"

[saes.toy]
kind = "mock"
model_id = "toy"
layer_index = 0
feature_count = 16
sae_id = "toy/16"

[[settings]]
id = "setting-1"
generator = "mock"
sae = "toy"
"#
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let cfg = RunConfig::from_toml_str(sample_toml(), Path::new("/runs/a")).unwrap();
        assert_eq!(cfg.papers, PathBuf::from("/runs/a/data/papers.jsonl"));
        assert_eq!(cfg.journal_path(), PathBuf::from("/runs/a/out/annotations.jsonl"));
        assert_eq!(cfg.tree.reference_setting, "setting-2");
    }

    #[test]
    fn seed_is_required() {
        let text = sample_toml().replace("seed = 7\n", "");
        assert!(matches!(RunConfig::from_toml_str(&text, Path::new(".")), Err(PipelineError::Config(_))));
    }

    #[test]
    fn unregistered_backend_rejected_before_work() {
        let text = sample_toml().replace("kind = \"mock\"\n\n[saes", "kind = \"external\"\n\n[saes");
        let cfg = RunConfig::from_toml_str(&text, Path::new("/nonexistent")).unwrap();
        let err = Pipeline::new(cfg).unwrap_err();
        assert!(err.to_string().contains("unregistered generator backend `mock`"), "{err}");
        assert!(!Path::new("/nonexistent/out").exists());
    }

    #[test]
    fn unknown_sae_reference_rejected() {
        let text = sample_toml().replace("sae = \"toy\"", "sae = \"missing\"");
        let cfg = RunConfig::from_toml_str(&text, Path::new(".")).unwrap();
        assert!(Pipeline::new(cfg).unwrap_err().to_string().contains("unknown sae `missing`"));
    }

    #[test]
    fn registered_external_backend_accepted() {
        let text = sample_toml().replace("kind = \"mock\"\n\n[saes", "kind = \"external\"\n\n[saes");
        let cfg = RunConfig::from_toml_str(&text, Path::new(".")).unwrap();
        let mut registry = BackendRegistry::new();
        registry.register_generator("mock", Arc::new(MockGenerator::new("mock")));
        assert!(Pipeline::with_registry(cfg, &registry).is_ok());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::from_toml_str(sample_toml(), Path::new("/r")).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
    }
}

//! Feature attribution, exemplar evidence, and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStore, Label, TaskDataset};
use crate::featurize::{PaperFeatureVector, SaeConfig, TokenFeatureMatrix};
use crate::probe::{AccuracyGrid, EvalRecord, NodeKind, TreeProbe};

/// Abstract snippets in exemplars are cut to this many characters.
pub const SNIPPET_CHARS: usize = 400;

/// Description emitted for features nobody has labeled yet.
pub const UNLABELED: &str = "(unlabeled)";

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("feature {feature_index} is constant zero across training data (uninformative feature)")]
    UninformativeFeature { feature_index: usize },
    #[error("no feature vector for paper `{0}`")]
    MissingVector(String),
    #[error("feature index {feature_index} out of range for {feature_count} features")]
    IndexOutOfRange { feature_index: usize, feature_count: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("no token matrix cached for paper `{0}`; re-run featurization with token retention enabled")]
    MissingTokenCache(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = InterpretError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Positive => "positive",
            Sign::Negative => "negative",
        }
    }
}

/// Normalized impurity-decrease importance per feature used by the tree.
/// A single-leaf tree yields an empty map.
pub fn feature_importances(tree: &TreeProbe) -> BTreeMap<usize, f64> {
    let mut raw: BTreeMap<usize, f64> = BTreeMap::new();
    for node in &tree.nodes {
        if let NodeKind::Split { feature_index, .. } = node.kind {
            *raw.entry(feature_index).or_default() += tree.impurity_decrease(node);
        }
    }
    let total: f64 = raw.values().sum();
    if total > 0.0 {
        for v in raw.values_mut() {
            *v /= total;
        }
    }
    raw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignResult {
    pub sign: Sign,
    /// Class means were exactly equal; sign defaulted to Negative.
    pub tie: bool,
}

/// Positive when the mean training activation of High papers exceeds that
/// of Low papers.
pub fn association_sign(
    feature_index: usize,
    task: &TaskDataset,
    vectors: &BTreeMap<String, PaperFeatureVector>,
) -> Result<SignResult> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    let mut any_nonzero = false;
    for (id, label) in task.train() {
        let v = vectors.get(id).ok_or_else(|| InterpretError::MissingVector(id.to_owned()))?;
        let value = *v.values.get(feature_index).ok_or(InterpretError::IndexOutOfRange {
            feature_index,
            feature_count: v.values.len(),
        })?;
        any_nonzero |= value != 0.0;
        let slot = usize::from(label == Label::Low);
        sums[slot] += value;
        counts[slot] += 1;
    }
    if !any_nonzero {
        return Err(InterpretError::UninformativeFeature { feature_index });
    }
    let mean = |i: usize| if counts[i] == 0 { 0.0 } else { sums[i] / counts[i] as f64 };
    let (high, low) = (mean(0), mean(1));
    Ok(if high > low {
        SignResult { sign: Sign::Positive, tie: false }
    } else {
        SignResult { sign: Sign::Negative, tie: high == low }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub paper_id: String,
    pub activation: f64,
    pub title: String,
    pub snippet: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplars {
    pub feature_index: usize,
    pub high: Vec<Exemplar>,
    pub low: Vec<Exemplar>,
    /// Fewer than `k` papers were available.
    pub truncated: bool,
}

pub fn snippet(text: &str) -> String {
    match text.char_indices().nth(SNIPPET_CHARS) {
        Some((cut, _)) => format!("{}…", &text[..cut]),
        None => text.to_owned(),
    }
}

/// The `k` most and `k` least activating papers for a feature.
pub fn top_exemplars<'a>(
    feature_index: usize,
    corpus: &CorpusStore,
    vectors: impl IntoIterator<Item = &'a PaperFeatureVector>,
    k: usize,
) -> Result<Exemplars> {
    if k == 0 {
        return Err(InterpretError::ZeroK);
    }
    let mut scored = Vec::new();
    for v in vectors {
        let activation = *v.values.get(feature_index).ok_or(InterpretError::IndexOutOfRange {
            feature_index,
            feature_count: v.values.len(),
        })?;
        scored.push((v.paper_id.as_str(), activation));
    }
    let exemplar = |(id, activation): (&str, f64)| {
        let (title, snippet) = corpus
            .get(id)
            .map(|e| (e.paper.title.clone(), snippet(&e.paper.abstract_text)))
            .unwrap_or_default();
        Exemplar { paper_id: id.to_owned(), activation, title, snippet }
    };
    let truncated = scored.len() < k;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let high = scored.iter().take(k).copied().map(exemplar).collect();
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let low = scored.iter().take(k).copied().map(exemplar).collect();
    Ok(Exemplars { feature_index, high, low, truncated })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyView {
    pub paper_id: String,
    pub feature_index: usize,
    pub tokens: Vec<String>,
    pub activations: Vec<f64>,
    /// First token with the maximal positive activation.
    pub peak: Option<usize>,
}

pub fn token_saliency(feature_index: usize, matrix: Option<&TokenFeatureMatrix>, paper_id: &str) -> Result<SaliencyView> {
    let matrix = matrix.ok_or_else(|| InterpretError::MissingTokenCache(paper_id.to_owned()))?;
    if feature_index >= matrix.sae.feature_count {
        return Err(InterpretError::IndexOutOfRange { feature_index, feature_count: matrix.sae.feature_count });
    }
    let activations = matrix.column(feature_index);
    let mut peak: Option<usize> = None;
    for (i, &a) in activations.iter().enumerate() {
        if a > 0.0 && peak.is_none_or(|p| a > activations[p]) {
            peak = Some(i);
        }
    }
    Ok(SaliencyView {
        paper_id: matrix.paper_id.clone(),
        feature_index,
        tokens: matrix.tokens.clone(),
        activations,
        peak,
    })
}

/// Dashboard namespace for one SAE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DashboardNamespace {
    #[serde(default = "default_host")]
    pub host: String,
    pub model_slug: String,
    pub layer_slug: String,
    #[serde(default = "default_template")]
    pub template: String,
}

fn default_host() -> String {
    "neuronpedia.org".to_owned()
}

fn default_template() -> String {
    "https://{host}/{model_slug}/{layer_slug}/{index}".to_owned()
}

/// URL template map keyed by `sae_id`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UrlTemplates(pub BTreeMap<String, DashboardNamespace>);

impl UrlTemplates {
    /// Namespaces for the three 16k-width Gemma Scope residual SAEs.
    pub fn gemma_scope_defaults() -> Self {
        let ns = |model: &str, layer: &str| DashboardNamespace {
            host: default_host(),
            model_slug: model.to_owned(),
            layer_slug: layer.to_owned(),
            template: default_template(),
        };
        Self(BTreeMap::from([
            ("gemma-scope-2b-pt-res/layer_20/width_16k".to_owned(), ns("gemma-2-2b", "20-gemmascope-res-16k")),
            ("gemma-scope-9b-it-res/layer_20/width_16k".to_owned(), ns("gemma-2-9b-it", "20-gemmascope-res-16k")),
            ("gemma-scope-9b-it-res/layer_31/width_16k".to_owned(), ns("gemma-2-9b-it", "31-gemmascope-res-16k")),
        ]))
    }

    pub fn merged(mut self, other: &UrlTemplates) -> Self {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
        self
    }
}

pub fn external_feature_url(templates: &UrlTemplates, sae: &SaeConfig, feature_index: usize) -> Result<Option<String>> {
    if feature_index >= sae.feature_count {
        return Err(InterpretError::IndexOutOfRange { feature_index, feature_count: sae.feature_count });
    }
    Ok(templates.0.get(&sae.sae_id).map(|ns| {
        ns.template
            .replace("{host}", &ns.host)
            .replace("{model_slug}", &ns.model_slug)
            .replace("{layer_slug}", &ns.layer_slug)
            .replace("{index}", &feature_index.to_string())
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFinding {
    pub task_id: String,
    pub setting_id: String,
    pub setting_number: usize,
    pub sae_id: String,
    pub feature_index: usize,
    pub importance: f64,
    pub sign: Sign,
    pub sign_tie: bool,
    pub exemplar_ids_high: Vec<String>,
    pub exemplar_ids_low: Vec<String>,
    pub external_url: Option<String>,
}

/// Everything learned for one (task, setting) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub task_id: String,
    pub task_number: usize,
    pub setting_id: String,
    pub setting_number: usize,
    pub tree: TreeProbe,
    pub eval: EvalRecord,
    pub findings: Vec<FeatureFinding>,
}

/// Findings for every feature the tree splits on, most important first.
#[allow(clippy::too_many_arguments)]
pub fn findings_for(
    tree: &TreeProbe,
    task: &TaskDataset,
    setting_id: &str,
    setting_number: usize,
    corpus: &CorpusStore,
    vectors: &BTreeMap<String, PaperFeatureVector>,
    templates: &UrlTemplates,
    exemplar_k: usize,
) -> Result<Vec<FeatureFinding>> {
    let mut findings = Vec::new();
    let task_vectors: Vec<&PaperFeatureVector> = task.entries.iter().filter_map(|e| vectors.get(&e.paper_id)).collect();
    for (feature_index, importance) in feature_importances(tree) {
        let sign = association_sign(feature_index, task, vectors)?;
        let ex = top_exemplars(feature_index, corpus, task_vectors.iter().copied(), exemplar_k)?;
        findings.push(FeatureFinding {
            task_id: task.task_id().to_owned(),
            setting_id: setting_id.to_owned(),
            setting_number,
            sae_id: tree.sae.sae_id.clone(),
            feature_index,
            importance,
            sign: sign.sign,
            sign_tie: sign.tie,
            exemplar_ids_high: ex.high.into_iter().map(|e| e.paper_id).collect(),
            exemplar_ids_low: ex.low.into_iter().map(|e| e.paper_id).collect(),
            external_url: external_feature_url(templates, &tree.sae, feature_index)?,
        });
    }
    sort_findings(&mut findings);
    Ok(findings)
}

/// Ordering of report rows: setting number, then importance descending,
/// then feature index.
pub fn sort_findings(findings: &mut [FeatureFinding]) {
    findings.sort_by(|a, b| {
        a.setting_number
            .cmp(&b.setting_number)
            .then(b.importance.total_cmp(&a.importance))
            .then(a.feature_index.cmp(&b.feature_index))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting_id: String,
    pub setting_number: usize,
    pub sae: SaeConfig,
    pub accuracy: f64,
    pub n_test: usize,
    pub leaf_count: usize,
    pub max_leaf_nodes: usize,
    pub findings: Vec<FeatureFinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: String,
    pub task_number: usize,
    pub settings: Vec<SettingSummary>,
}

impl TaskSummary {
    pub fn findings(&self) -> impl Iterator<Item = &FeatureFinding> {
        self.settings.iter().flat_map(|s| s.findings.iter())
    }
}

/// Machine-readable content of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub tasks: Vec<TaskSummary>,
}

impl ReportJson {
    pub fn task(&self, task_id: &str) -> Option<&TaskSummary> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Every finding for a task, in report-row order.
    pub fn sorted_findings(&self, task_id: &str) -> Vec<FeatureFinding> {
        let mut rows: Vec<FeatureFinding> = self.task(task_id).map(|t| t.findings().cloned().collect()).unwrap_or_default();
        sort_findings(&mut rows);
        rows
    }
}

/// One row of a labeled feature table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub setting: String,
    pub index: usize,
    pub sign: String,
    pub description: String,
}

pub const TABLE_COLUMNS: [&str; 4] = ["setting", "index", "sign", "description"];

/// Table rows for a task; `label` resolves `(sae_id, task_id, index)` to a
/// human description.
pub fn feature_table(report: &ReportJson, task_id: &str, label: &dyn Fn(&str, &str, usize) -> Option<String>) -> Vec<TableRow> {
    report
        .sorted_findings(task_id)
        .into_iter()
        .map(|f| TableRow {
            description: label(&f.sae_id, &f.task_id, f.feature_index).unwrap_or_else(|| UNLABELED.to_owned()),
            setting: f.setting_id,
            index: f.feature_index,
            sign: f.sign.as_str().to_owned(),
        })
        .collect()
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TABLE_COLUMNS).expect("in-memory write");
    for r in rows {
        w.write_record([r.setting.as_str(), &r.index.to_string(), &r.sign, &r.description]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn md_escape(text: &str) -> String {
    text.replace('|', "\\|").replace('\n', " ")
}

pub fn table_markdown(rows: &[TableRow]) -> String {
    let mut out = format!("| {} |\n|---|---:|---|---|\n", TABLE_COLUMNS.join(" | "));
    for r in rows {
        let _ = writeln!(out, "| {} | {} | {} | {} |", md_escape(&r.setting), r.index, r.sign, md_escape(&r.description));
    }
    out
}

fn dot_quote(text: &str) -> String {
    text.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering of a probe; left edges are `x <= threshold`.
pub fn tree_dot(tree: &TreeProbe, name: &str) -> String {
    let mut out = format!("digraph \"{}\" {{\n  node [shape=box, fontname=\"Helvetica\"];\n", dot_quote(name));
    for node in &tree.nodes {
        let c = node.class_counts;
        let counts = format!("samples = {}\\nhigh = {}, low = {}", c.total(), c.high, c.low);
        match node.kind {
            NodeKind::Split { feature_index, threshold, left_id, right_id } => {
                let _ = writeln!(out, "  n{} [label=\"feature {feature_index} <= {threshold}\\n{counts}\"];", node.node_id);
                let _ = writeln!(out, "  n{} -> n{left_id} [label=\"yes\"];", node.node_id);
                let _ = writeln!(out, "  n{} -> n{right_id} [label=\"no\"];", node.node_id);
            }
            NodeKind::Leaf => {
                let _ = writeln!(out, "  n{} [label=\"{}\\n{counts}\", style=rounded];", node.node_id, c.majority());
            }
        }
    }
    out.push_str("}\n");
    out
}

fn fmt_acc(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_owned(), |a| format!("{a:.4}"))
}

fn grid_markdown(grid: &AccuracyGrid) -> String {
    if grid.rows.is_empty() {
        return "_No evaluated tasks._\n".to_owned();
    }
    let mut out = String::from("| task |");
    for s in &grid.settings {
        let _ = write!(out, " {} |", md_escape(s));
    }
    out.push_str(" task avg | baseline |\n|---|");
    for _ in 0..grid.settings.len() + 2 {
        out.push_str("---:|");
    }
    out.push('\n');
    for row in &grid.rows {
        let _ = write!(out, "| {} |", row.task_id);
        for a in &row.accuracies {
            let _ = write!(out, " {} |", fmt_acc(*a));
        }
        let _ = writeln!(out, " {} | {} |", fmt_acc(row.task_average), fmt_acc(row.baseline));
    }
    out.push_str("| average |");
    for a in &grid.setting_averages {
        let _ = write!(out, " {} |", fmt_acc(*a));
    }
    let _ = writeln!(out, " {} | {} |", fmt_acc(grid.overall_average), fmt_acc(grid.baseline_average));
    out
}

/// Rendered report files keyed by path relative to the bundle directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub report: ReportJson,
    pub grid: AccuracyGrid,
    pub files: BTreeMap<String, String>,
}

impl ReportBundle {
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        for (rel, content) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, content)?;
        }
        Ok(())
    }

    pub fn load_report(dir: &Path) -> Result<ReportJson> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?)
    }
}

/// Assembles tables, tree renderings, and the accuracy grid. Output depends
/// only on the arguments.
pub fn build_report(
    task_order: &[(String, usize)],
    results: &[ProbeResult],
    grid: &AccuracyGrid,
    label: &dyn Fn(&str, &str, usize) -> Option<String>,
) -> Result<ReportBundle> {
    let mut tasks = Vec::new();
    for (task_id, task_number) in task_order {
        let mut settings: Vec<SettingSummary> = results
            .iter()
            .filter(|r| &r.task_id == task_id)
            .map(|r| SettingSummary {
                setting_id: r.setting_id.clone(),
                setting_number: r.setting_number,
                sae: r.tree.sae.clone(),
                accuracy: r.eval.accuracy,
                n_test: r.eval.n_test,
                leaf_count: r.tree.leaf_count(),
                max_leaf_nodes: r.tree.config.max_leaf_nodes,
                findings: r.findings.clone(),
            })
            .collect();
        settings.sort_by_key(|s| s.setting_number);
        tasks.push(TaskSummary { task_id: task_id.clone(), task_number: *task_number, settings });
    }
    let report = ReportJson { tasks };

    let mut files = BTreeMap::new();
    let mut md = String::from("# Monosemantic feature report\n\n");
    for task in &report.tasks {
        let _ = writeln!(md, "## Task {}: {}\n", task.task_number, task.task_id);
        let rows = feature_table(&report, &task.task_id, label);
        if rows.is_empty() {
            md.push_str("_No features: no probe for this task split on any feature._\n\n");
        } else {
            md.push_str(&table_markdown(&rows));
            md.push('\n');
        }
    }
    md.push_str("## Accuracy\n\n");
    md.push_str(&grid_markdown(grid));
    files.insert("report.md".to_owned(), md);
    files.insert("report.json".to_owned(), serde_json::to_string_pretty(&report)? + "\n");
    files.insert("accuracy_grid.json".to_owned(), serde_json::to_string_pretty(grid)? + "\n");
    for r in results {
        let name = format!("{}__{}", r.task_id, r.setting_id);
        files.insert(format!("trees/{}.dot", crate::featurize::file_stem_for(&name)), tree_dot(&r.tree, &name));
    }
    Ok(ReportBundle { report, grid: grid.clone(), files })
}

//! Bounded-leaf CART probes over pooled feature vectors.
//!
//! Trees grow best-first: the leaf whose best Gini split removes the most
//! count-weighted impurity is expanded next, until the leaf budget is spent
//! or no split helps. Split quality is compared in exact rational arithmetic
//! over class counts, so gain ties are real ties and resolve by lowest
//! feature index, then lowest threshold.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStore, Label, QualityMetric, TaskDataset};
use crate::featurize::{PaperFeatureVector, SaeConfig};
use crate::summarize::{render_prompt, BackendError, PromptConfig};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("training set is empty")]
    EmptyInput,
    #[error("training set contains a single class ({0})")]
    SingleClass(Label),
    #[error("sample {sample} has a non-finite value at feature {feature}")]
    NonFinite { sample: usize, feature: usize },
    #[error("samples have inconsistent widths ({expected} vs {found})")]
    Ragged { expected: usize, found: usize },
    #[error("invalid tree config: {0}")]
    InvalidConfig(String),
    #[error("{n} samples cannot fill {folds} folds")]
    TooFewForFolds { n: usize, folds: usize },
    #[error("feature spaces differ: `{expected}` vs `{found}`")]
    SpaceMismatch { expected: String, found: String },
    #[error("test set is empty")]
    EmptyTest,
    #[error("baseline `{backend}` failed: {message}")]
    Baseline { backend: String, message: String },
    #[error("paper `{0}` missing from corpus or feature set")]
    MissingPaper(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ProbeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitCriterion {
    #[default]
    Gini,
}

fn default_folds() -> usize {
    5
}

fn default_candidates() -> Vec<usize> {
    vec![2, 4, 8, 16, 32]
}

fn default_reference() -> String {
    "setting-2".to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_leaf_nodes: usize,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_candidates")]
    pub candidate_leaf_values: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split_criterion: SplitCriterion,
    /// Setting on which the leaf budget is tuned before transfer to others.
    #[serde(default = "default_reference")]
    pub reference_setting: String,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_leaf_nodes: 2,
            cv_folds: default_folds(),
            candidate_leaf_values: default_candidates(),
            seed: 0,
            split_criterion: SplitCriterion::Gini,
            reference_setting: default_reference(),
        }
    }
}

impl TreeConfig {
    pub fn with_max_leaf_nodes(mut self, n: usize) -> Self {
        self.max_leaf_nodes = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_leaf_nodes < 2 {
            return Err(ProbeError::InvalidConfig("max_leaf_nodes must be >= 2".into()));
        }
        if self.cv_folds < 2 {
            return Err(ProbeError::InvalidConfig("cv_folds must be >= 2".into()));
        }
        if self.candidate_leaf_values.iter().any(|&c| c < 2) {
            return Err(ProbeError::InvalidConfig("candidate leaf values must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub high: u64,
    pub low: u64,
}

impl ClassCounts {
    fn add(&mut self, label: Label) {
        match label {
            Label::High => self.high += 1,
            Label::Low => self.low += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.high + self.low
    }

    /// Majority class; ties go to Low.
    pub fn majority(&self) -> Label {
        if self.high > self.low { Label::High } else { Label::Low }
    }

    pub fn is_pure(&self) -> bool {
        self.high == 0 || self.low == 0
    }

    /// `n · gini = 2·h·l / n`, returned as (numerator, denominator).
    fn weighted_gini(&self) -> (i128, i128) {
        let n = self.total() as i128;
        (2 * self.high as i128 * self.low as i128, n.max(1))
    }
}

/// Exact non-negative fraction used to compare impurities.
#[derive(Debug, Clone, Copy)]
struct Frac {
    num: i128,
    den: i128,
}

impl Frac {
    fn new(num: i128, den: i128) -> Self {
        debug_assert!(den > 0);
        Self { num, den }
    }

    fn add(self, other: Frac) -> Frac {
        Frac::new(self.num * other.den + other.num * self.den, self.den * other.den)
    }

    fn sub(self, other: Frac) -> Frac {
        Frac::new(self.num * other.den - other.num * self.den, self.den * other.den)
    }

    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Frac {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frac {}

impl PartialOrd for Frac {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frac {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

fn counts_frac(c: &ClassCounts) -> Frac {
    let (n, d) = c.weighted_gini();
    Frac::new(n, d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeKind {
    Split {
        feature_index: usize,
        threshold: f64,
        left_id: usize,
        right_id: usize,
    },
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub node_id: usize,
    pub class_counts: ClassCounts,
    #[serde(flatten)]
    pub kind: NodeKind,
}

/// A chosen split: `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature_index: usize,
    pub threshold: f64,
    pub left: ClassCounts,
    pub right: ClassCounts,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    choice: SplitChoice,
    child_impurity: Frac,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    match a.child_impurity.cmp(&b.child_impurity) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => (a.choice.feature_index, a.choice.threshold) < (b.choice.feature_index, b.choice.threshold),
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let t = a + (b - a) * 0.5;
    if t >= a && t < b && t.is_finite() { t } else { a }
}

/// Best threshold on one feature for the given samples, if any exists.
fn best_split_on_feature(x: &[&[f64]], y: &[Label], samples: &[usize], feature: usize, total: ClassCounts) -> Option<Candidate> {
    let mut column: Vec<(f64, Label)> = samples.iter().map(|&i| (x[i][feature], y[i])).collect();
    column.sort_by(|a, b| a.0.total_cmp(&b.0));
    if column.first()?.0 == column.last()?.0 {
        return None;
    }
    let mut left = ClassCounts::default();
    let mut best: Option<Candidate> = None;
    for pair in column.windows(2) {
        left.add(pair[0].1);
        if pair[0].0 == pair[1].0 {
            continue;
        }
        let right = ClassCounts { high: total.high - left.high, low: total.low - left.low };
        let candidate = Candidate {
            choice: SplitChoice { feature_index: feature, threshold: midpoint(pair[0].0, pair[1].0), left, right },
            child_impurity: counts_frac(&left).add(counts_frac(&right)),
        };
        if best.as_ref().is_none_or(|b| better(&candidate, b)) {
            best = Some(candidate);
        }
    }
    best
}

fn best_split(x: &[&[f64]], y: &[Label], samples: &[usize], width: usize) -> Option<Candidate> {
    let mut total = ClassCounts::default();
    for &i in samples {
        total.add(y[i]);
    }
    if total.is_pure() {
        return None;
    }
    let pick = |a: Option<Candidate>, b: Option<Candidate>| match (a, b) {
        (Some(a), Some(b)) => Some(if better(&b, &a) { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    };
    let best = if width >= 64 && samples.len() >= 16 {
        (0..width)
            .into_par_iter()
            .map(|f| best_split_on_feature(x, y, samples, f, total))
            .reduce(|| None, pick)
    } else {
        (0..width).map(|f| best_split_on_feature(x, y, samples, f, total)).fold(None, pick)
    }?;
    (best.child_impurity < counts_frac(&total)).then_some(best)
}

/// Exhaustive root split over all features, exposed for diagnostics.
pub fn best_root_split(x: &[&[f64]], y: &[Label]) -> Option<SplitChoice> {
    let width = x.first().map_or(0, |r| r.len());
    let samples: Vec<usize> = (0..x.len()).collect();
    best_split(x, y, &samples, width).map(|c| c.choice)
}

fn check_inputs(x: &[&[f64]], y: &[Label]) -> Result<usize> {
    if x.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    assert_eq!(x.len(), y.len(), "one label per sample");
    let width = x[0].len();
    for (s, row) in x.iter().enumerate() {
        if row.len() != width {
            return Err(ProbeError::Ragged { expected: width, found: row.len() });
        }
        if let Some(f) = row.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite { sample: s, feature: f });
        }
    }
    if y.iter().all(|l| *l == y[0]) {
        return Err(ProbeError::SingleClass(y[0]));
    }
    Ok(width)
}

/// Grows a tree over dense rows; node 0 is the root.
pub fn grow_tree(x: &[&[f64]], y: &[Label], max_leaf_nodes: usize) -> Result<Vec<Node>> {
    if max_leaf_nodes < 2 {
        return Err(ProbeError::InvalidConfig("max_leaf_nodes must be >= 2".into()));
    }
    let width = check_inputs(x, y)?;

    struct Open {
        node_id: usize,
        samples: Vec<usize>,
        split: Option<Candidate>,
        decrease: Frac,
    }

    let open_leaf = |node_id: usize, samples: Vec<usize>, counts: &ClassCounts| {
        let split = best_split(x, y, &samples, width);
        let decrease = split.map_or(Frac::new(0, 1), |c| counts_frac(counts).sub(c.child_impurity));
        Open { node_id, samples, split, decrease }
    };

    let mut root_counts = ClassCounts::default();
    for &l in y {
        root_counts.add(l);
    }
    let mut nodes = vec![Node { node_id: 0, class_counts: root_counts, kind: NodeKind::Leaf }];
    let mut open = vec![open_leaf(0, (0..x.len()).collect(), &root_counts)];
    let mut leaves = 1;

    while leaves < max_leaf_nodes {
        // Largest impurity decrease first; lower node id on ties.
        let Some(pos) = open
            .iter()
            .enumerate()
            .filter(|(_, o)| o.split.is_some())
            .max_by(|(_, a), (_, b)| a.decrease.cmp(&b.decrease).then(b.node_id.cmp(&a.node_id)))
            .map(|(i, _)| i)
        else {
            break;
        };
        let leaf = open.swap_remove(pos);
        let split = leaf.split.expect("filtered").choice;
        let (left_samples, right_samples): (Vec<usize>, Vec<usize>) =
            leaf.samples.iter().partition(|&&i| x[i][split.feature_index] <= split.threshold);
        let left_id = nodes.len();
        let right_id = left_id + 1;
        nodes[leaf.node_id].kind = NodeKind::Split {
            feature_index: split.feature_index,
            threshold: split.threshold,
            left_id,
            right_id,
        };
        nodes.push(Node { node_id: left_id, class_counts: split.left, kind: NodeKind::Leaf });
        nodes.push(Node { node_id: right_id, class_counts: split.right, kind: NodeKind::Leaf });
        open.push(open_leaf(left_id, left_samples, &split.left));
        open.push(open_leaf(right_id, right_samples, &split.right));
        leaves += 1;
    }
    Ok(nodes)
}

fn route<'a>(nodes: &'a [Node], root: usize, x: &[f64]) -> &'a Node {
    let mut node = &nodes[root];
    while let NodeKind::Split { feature_index, threshold, left_id, right_id } = node.kind {
        node = &nodes[if x[feature_index] <= threshold { left_id } else { right_id }];
    }
    node
}

/// A trained probe tied to one feature space and one task metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeProbe {
    pub metric: QualityMetric,
    pub sae: SaeConfig,
    pub sae_fingerprint: String,
    pub config: TreeConfig,
    pub root_id: usize,
    pub nodes: Vec<Node>,
}

impl TreeProbe {
    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Leaf)).count()
    }

    pub fn splits(&self) -> impl Iterator<Item = (&Node, usize, f64, usize, usize)> {
        self.nodes.iter().filter_map(|n| match n.kind {
            NodeKind::Split { feature_index, threshold, left_id, right_id } => {
                Some((n, feature_index, threshold, left_id, right_id))
            }
            NodeKind::Leaf => None,
        })
    }

    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.splits().map(|s| s.1).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Count-weighted impurity decrease of the split at `node`.
    pub fn impurity_decrease(&self, node: &Node) -> f64 {
        match node.kind {
            NodeKind::Split { left_id, right_id, .. } => counts_frac(&node.class_counts)
                .sub(counts_frac(&self.nodes[left_id].class_counts).add(counts_frac(&self.nodes[right_id].class_counts)))
                .to_f64(),
            NodeKind::Leaf => 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Prediction on a raw dense row of the tree's feature width.
    pub fn predict_values(&self, x: &[f64]) -> Label {
        route(&self.nodes, self.root_id, x).class_counts.majority()
    }
}

pub type LabeledVector<'a> = (&'a PaperFeatureVector, Label);

fn check_space(sae: &SaeConfig, v: &PaperFeatureVector) -> Result<()> {
    if &v.sae == sae {
        Ok(())
    } else {
        Err(ProbeError::SpaceMismatch { expected: sae.fingerprint(), found: v.sae.fingerprint() })
    }
}

pub fn train_tree(train: &[LabeledVector<'_>], config: &TreeConfig, metric: QualityMetric) -> Result<TreeProbe> {
    config.validate()?;
    let first = train.first().ok_or(ProbeError::EmptyInput)?;
    let sae = first.0.sae.clone();
    for (v, _) in train {
        check_space(&sae, v)?;
    }
    let x: Vec<&[f64]> = train.iter().map(|(v, _)| v.values.as_slice()).collect();
    let y: Vec<Label> = train.iter().map(|(_, l)| *l).collect();
    let nodes = grow_tree(&x, &y, config.max_leaf_nodes)?;
    Ok(TreeProbe { metric, sae_fingerprint: sae.fingerprint(), sae, config: config.clone(), root_id: 0, nodes })
}

pub fn predict(tree: &TreeProbe, x: &PaperFeatureVector) -> Result<Label> {
    check_space(&tree.sae, x)?;
    Ok(tree.predict_values(&x.values))
}

/// Stratified, seeded fold assignment: each class is shuffled and dealt
/// round-robin, the second class continuing where the first stopped.
pub fn stratified_folds(y: &[Label], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; y.len()];
    let mut dealt = 0;
    for class in [Label::High, Label::Low] {
        let mut members: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = dealt % folds;
            dealt += 1;
        }
    }
    assignment
}

/// Mean k-fold validation accuracy for one leaf budget.
pub fn cross_validate(x: &[&[f64]], y: &[Label], folds: &[usize], k: usize, max_leaf_nodes: usize) -> Result<f64> {
    let per_fold: Vec<f64> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..x.len() {
                if folds[i] == fold {
                    vx.push(x[i]);
                    vy.push(y[i]);
                } else {
                    tx.push(x[i]);
                    ty.push(y[i]);
                }
            }
            let nodes = grow_tree(&tx, &ty, max_leaf_nodes)?;
            let correct = vx.iter().zip(&vy).filter(|(r, l)| route(&nodes, 0, r).class_counts.majority() == **l).count();
            Ok(correct as f64 / vx.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_fold.iter().sum::<f64>() / k as f64)
}

/// Leaf budget with the best mean validation accuracy; ties go to the
/// smallest candidate.
pub fn select_max_leaf_nodes(train: &[LabeledVector<'_>], config: &TreeConfig) -> Result<usize> {
    let x: Vec<&[f64]> = train.iter().map(|(v, _)| v.values.as_slice()).collect();
    let y: Vec<Label> = train.iter().map(|(_, l)| *l).collect();
    select_max_leaf_nodes_dense(&x, &y, config)
}

pub fn select_max_leaf_nodes_dense(x: &[&[f64]], y: &[Label], config: &TreeConfig) -> Result<usize> {
    let mut candidates = config.candidate_leaf_values.clone();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(ProbeError::InvalidConfig("candidate_leaf_values is empty".into()));
    }
    if config.cv_folds < 2 {
        return Err(ProbeError::InvalidConfig("cv_folds must be >= 2".into()));
    }
    if candidates[0] < 2 {
        return Err(ProbeError::InvalidConfig("candidate leaf values must be >= 2".into()));
    }
    if x.len() < config.cv_folds {
        return Err(ProbeError::TooFewForFolds { n: x.len(), folds: config.cv_folds });
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    check_inputs(x, y)?;
    let folds = stratified_folds(y, config.cv_folds, config.seed);
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&c| cross_validate(x, y, &folds, config.cv_folds, c))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for i in 1..candidates.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(candidates[best])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEval {
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task_id: String,
    pub setting_id: String,
    pub accuracy: f64,
    pub n_test: usize,
    pub correct: usize,
    pub per_class_counts: BTreeMap<Label, ClassEval>,
}

fn eval_from(task_id: &str, setting_id: &str, pairs: impl Iterator<Item = (Label, Label)>) -> Result<EvalRecord> {
    let mut per_class: BTreeMap<Label, ClassEval> = [(Label::High, ClassEval::default()), (Label::Low, ClassEval::default())].into();
    let mut n = 0;
    let mut correct = 0;
    for (truth, predicted) in pairs {
        let entry = per_class.get_mut(&truth).expect("both labels present");
        entry.total += 1;
        n += 1;
        if truth == predicted {
            entry.correct += 1;
            correct += 1;
        }
    }
    if n == 0 {
        return Err(ProbeError::EmptyTest);
    }
    Ok(EvalRecord {
        task_id: task_id.to_owned(),
        setting_id: setting_id.to_owned(),
        accuracy: correct as f64 / n as f64,
        n_test: n,
        correct,
        per_class_counts: per_class,
    })
}

pub fn evaluate(tree: &TreeProbe, test: &[LabeledVector<'_>], setting_id: &str) -> Result<EvalRecord> {
    let predictions: Vec<(Label, Label)> =
        test.iter().map(|(v, l)| predict(tree, v).map(|p| (*l, p))).collect::<Result<_>>()?;
    eval_from(tree.metric.slug(), setting_id, predictions.into_iter())
}

/// Text classifier trained and scored on the same split as the probes.
pub trait BaselineBackend: Send {
    fn backend_id(&self) -> &str;
    fn train(&mut self, texts: &[String], labels: &[Label]) -> std::result::Result<(), BackendError>;
    fn predict(&self, texts: &[String]) -> std::result::Result<Vec<Label>, BackendError>;
}

/// Always predicts the training majority (Low on ties).
#[derive(Debug, Default)]
pub struct MajorityBaseline {
    majority: Option<Label>,
}

impl BaselineBackend for MajorityBaseline {
    fn backend_id(&self) -> &str {
        "majority"
    }

    fn train(&mut self, _texts: &[String], labels: &[Label]) -> std::result::Result<(), BackendError> {
        let mut counts = ClassCounts::default();
        for l in labels {
            counts.add(*l);
        }
        self.majority = Some(counts.majority());
        Ok(())
    }

    fn predict(&self, texts: &[String]) -> std::result::Result<Vec<Label>, BackendError> {
        let label = self.majority.ok_or_else(|| BackendError::fatal("predict before train"))?;
        Ok(vec![label; texts.len()])
    }
}

/// Looks answers up in a text → label table; a contract check, not a model.
#[derive(Debug, Default)]
pub struct OracleBaseline {
    truth: HashMap<String, Label>,
}

impl OracleBaseline {
    pub fn new(truth: HashMap<String, Label>) -> Self {
        Self { truth }
    }

    /// Truth table over every entry of the task, rendered as the baseline sees it.
    pub fn for_task(task: &TaskDataset, corpus: &CorpusStore, prompt: &PromptConfig) -> Result<Self> {
        let mut truth = HashMap::new();
        for e in &task.entries {
            truth.insert(baseline_text(corpus, &e.paper_id, prompt)?, e.label);
        }
        Ok(Self { truth })
    }
}

impl BaselineBackend for OracleBaseline {
    fn backend_id(&self) -> &str {
        "oracle"
    }

    fn train(&mut self, _texts: &[String], _labels: &[Label]) -> std::result::Result<(), BackendError> {
        Ok(())
    }

    fn predict(&self, texts: &[String]) -> std::result::Result<Vec<Label>, BackendError> {
        texts
            .iter()
            .map(|t| self.truth.get(t).copied().ok_or_else(|| BackendError::fatal("text not in truth table")))
            .collect()
    }
}

fn baseline_text(corpus: &CorpusStore, paper_id: &str, prompt: &PromptConfig) -> Result<String> {
    let entry = corpus.get(paper_id).ok_or_else(|| ProbeError::MissingPaper(paper_id.to_owned()))?;
    render_prompt(&entry.paper, prompt).map_err(|e| ProbeError::Baseline { backend: "prompt".into(), message: e.to_string() })
}

/// Trains the baseline on the task's train split and scores it on the test
/// split, both rendered with `prompt`.
pub fn run_baseline(
    backend: &mut dyn BaselineBackend,
    task: &TaskDataset,
    corpus: &CorpusStore,
    prompt: &PromptConfig,
) -> Result<EvalRecord> {
    let render = |ids: &mut dyn Iterator<Item = (&str, Label)>| -> Result<(Vec<String>, Vec<Label>)> {
        let mut texts = Vec::new();
        let mut labels = Vec::new();
        for (id, label) in ids {
            texts.push(baseline_text(corpus, id, prompt)?);
            labels.push(label);
        }
        Ok((texts, labels))
    };
    let (train_texts, train_labels) = render(&mut task.train())?;
    let (test_texts, test_labels) = render(&mut task.test())?;
    let fail = |e: BackendError, id: &str| ProbeError::Baseline { backend: id.to_owned(), message: e.message };
    let id = backend.backend_id().to_owned();
    backend.train(&train_texts, &train_labels).map_err(|e| fail(e, &id))?;
    let predicted = backend.predict(&test_texts).map_err(|e| fail(e, &id))?;
    if predicted.len() != test_labels.len() {
        return Err(ProbeError::Baseline {
            backend: id,
            message: format!("{} predictions for {} texts", predicted.len(), test_labels.len()),
        });
    }
    eval_from(task.task_id(), &format!("baseline:{id}"), test_labels.into_iter().zip(predicted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub task_id: String,
    pub accuracies: Vec<Option<f64>>,
    pub task_average: Option<f64>,
    pub baseline: Option<f64>,
}

/// Tasks × settings accuracy table with row and column averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub settings: Vec<String>,
    pub rows: Vec<GridRow>,
    pub setting_averages: Vec<Option<f64>>,
    pub overall_average: Option<f64>,
    pub baseline_average: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl AccuracyGrid {
    pub fn build(tasks: &[String], settings: &[String], records: &[EvalRecord], baselines: &[EvalRecord]) -> Self {
        let lookup = |task: &str, setting: &str| {
            records.iter().find(|r| r.task_id == task && r.setting_id == setting).map(|r| r.accuracy)
        };
        let rows: Vec<GridRow> = tasks
            .iter()
            .map(|t| {
                let accuracies: Vec<Option<f64>> = settings.iter().map(|s| lookup(t, s)).collect();
                GridRow {
                    task_id: t.clone(),
                    task_average: mean(accuracies.iter().flatten().copied()),
                    accuracies,
                    baseline: baselines.iter().find(|b| &b.task_id == t).map(|b| b.accuracy),
                }
            })
            .collect();
        let setting_averages = (0..settings.len()).map(|i| mean(rows.iter().filter_map(|r| r.accuracies[i]))).collect();
        Self {
            settings: settings.to_vec(),
            overall_average: mean(rows.iter().flat_map(|r| r.accuracies.iter().flatten().copied())),
            baseline_average: mean(rows.iter().filter_map(|r| r.baseline)),
            setting_averages,
            rows,
        }
    }
}

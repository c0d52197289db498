//! Corpus ingestion, metric quartiles, and balanced top-vs-bottom task datasets.
//!
//! Papers and venues arrive as JSON Lines (or CSV with the same headers).
//! Quartiles are rank based: values are ordered descending with ascending
//! `paper_id` as the tie-break, and position `p` of `n` lands in quartile
//! `floor(4p / n)`. Group sizes therefore never differ by more than one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default train fraction of each class.
pub const DEFAULT_SPLIT_RATIO: f64 = 0.70;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate paper_id `{0}`")]
    DuplicatePaper(String),
    #[error("duplicate venue_id `{0}`")]
    DuplicateVenue(String),
    #[error("insufficient population for {metric}: {found} papers carry the metric, at least 4 required")]
    InsufficientPopulation { metric: QualityMetric, found: usize },
    #[error("quartile {quartile:?} is empty for {metric}")]
    EmptyQuartile {
        metric: QualityMetric,
        quartile: QuartileLabel,
    },
    #[error("split ratio {0} outside (0, 1)")]
    InvalidRatio(f64),
    #[error("invalid task dataset: {0}")]
    InvalidDataset(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    pub citation_count_5y: u64,
    pub venue_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenueMetrics {
    pub venue_id: String,
    #[serde(default)]
    pub sjr: Option<f64>,
    #[serde(default)]
    pub h_index: Option<u64>,
}

/// The three proxy metrics of research quality, one per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMetric {
    CitationCount,
    Sjr,
    HIndex,
}

impl QualityMetric {
    pub const ALL: [QualityMetric; 3] = [Self::CitationCount, Self::Sjr, Self::HIndex];

    /// Stable identifier used for file names, task ids and API paths.
    pub fn slug(self) -> &'static str {
        match self {
            Self::CitationCount => "citation_count",
            Self::Sjr => "sjr",
            Self::HIndex => "h_index",
        }
    }

    pub fn from_slug(slug: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.slug() == slug)
    }

    /// 1-based task number.
    pub fn task_number(self) -> usize {
        match self {
            Self::CitationCount => 1,
            Self::Sjr => 2,
            Self::HIndex => 3,
        }
    }

    /// Whether the metric is read from the joined venue rather than the paper.
    pub fn is_venue_level(self) -> bool {
        !matches!(self, Self::CitationCount)
    }
}

impl fmt::Display for QualityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Quartile of a metric; `Q1` holds the highest values.
///
/// Variants are declared low-to-high so the derived ordering gives
/// `Q1 > Q2 > Q3 > Q4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuartileLabel {
    Q4,
    Q3,
    Q2,
    Q1,
}

impl QuartileLabel {
    fn from_group(group: usize) -> Self {
        match group {
            0 => Self::Q1,
            1 => Self::Q2,
            2 => Self::Q3,
            _ => Self::Q4,
        }
    }
}

/// Binary class of a task entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    High,
    Low,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::High => "High",
            Label::Low => "Low",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    JsonLines,
    Csv,
}

impl RecordFormat {
    /// `.csv` selects CSV; anything else is read as JSON Lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::JsonLines,
        }
    }
}

/// Reads typed records, reporting failures by 1-based line number.
pub fn read_records<T: DeserializeOwned, R: Read>(reader: R, format: RecordFormat) -> Result<Vec<T>> {
    let mut out = Vec::new();
    match format {
        RecordFormat::JsonLines => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                out.push(record);
            }
        }
        RecordFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
            let headers = rdr.headers().map_err(|e| CorpusError::Malformed {
                line: 1,
                message: e.to_string(),
            })?;
            let headers = headers.clone();
            for row in rdr.records() {
                let row = row.map_err(|e| CorpusError::Malformed {
                    line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                    message: e.to_string(),
                })?;
                let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
                let record = row.deserialize(Some(&headers)).map_err(|e| CorpusError::Malformed {
                    line,
                    message: e.to_string(),
                })?;
                out.push(record);
            }
        }
    }
    Ok(out)
}

fn read_path<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    read_records(file, RecordFormat::from_path(path))
}

/// A paper joined with its venue metrics, when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub paper: PaperRecord,
    pub venue: Option<VenueMetrics>,
}

impl CorpusEntry {
    /// False when the venue is unknown or lacks SJR or h-index.
    pub fn metric_complete(&self) -> bool {
        self.venue
            .as_ref()
            .is_some_and(|v| v.sjr.is_some() && v.h_index.is_some())
    }

    /// Metric value used for ranking. Papers without an abstract cannot be
    /// featurized and never carry a value.
    pub fn metric_value(&self, metric: QualityMetric) -> Option<f64> {
        if self.paper.abstract_text.trim().is_empty() {
            return None;
        }
        match metric {
            QualityMetric::CitationCount => Some(self.paper.citation_count_5y as f64),
            QualityMetric::Sjr => self.venue.as_ref()?.sjr,
            QualityMetric::HIndex => self.venue.as_ref()?.h_index.map(|h| h as f64),
        }
    }
}

/// Write-once store of joined papers, kept in ingestion order.
#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    entries: Vec<CorpusEntry>,
    index: HashMap<String, usize>,
}

impl CorpusStore {
    /// Joins papers to venues. Duplicate ids in either stream are rejected.
    pub fn from_records(papers: Vec<PaperRecord>, venues: Vec<VenueMetrics>) -> Result<Self> {
        let mut venue_map = HashMap::with_capacity(venues.len());
        for (i, v) in venues.into_iter().enumerate() {
            if let Some(sjr) = v.sjr {
                if !(sjr.is_finite() && sjr > 0.0) {
                    return Err(CorpusError::Malformed {
                        line: i + 1,
                        message: format!("venue `{}` has non-positive sjr {sjr}", v.venue_id),
                    });
                }
            }
            if venue_map.contains_key(&v.venue_id) {
                return Err(CorpusError::DuplicateVenue(v.venue_id));
            }
            venue_map.insert(v.venue_id.clone(), v);
        }

        let mut entries = Vec::with_capacity(papers.len());
        let mut index = HashMap::with_capacity(papers.len());
        for paper in papers {
            if index.contains_key(&paper.paper_id) {
                return Err(CorpusError::DuplicatePaper(paper.paper_id));
            }
            index.insert(paper.paper_id.clone(), entries.len());
            let venue = venue_map.get(&paper.venue_id).cloned();
            entries.push(CorpusEntry { paper, venue });
        }
        Ok(Self { entries, index })
    }

    pub fn from_readers<P: Read, V: Read>(
        papers: P,
        papers_format: RecordFormat,
        venues: V,
        venues_format: RecordFormat,
    ) -> Result<Self> {
        Self::from_records(read_records(papers, papers_format)?, read_records(venues, venues_format)?)
    }

    pub fn from_paths(papers: &Path, venues: &Path) -> Result<Self> {
        Self::from_records(read_path(papers)?, read_path(venues)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn get(&self, paper_id: &str) -> Option<&CorpusEntry> {
        self.index.get(paper_id).map(|&i| &self.entries[i])
    }

    pub fn incomplete_ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.metric_complete())
            .map(|e| e.paper.paper_id.as_str())
            .collect()
    }

    /// `(paper_id, value)` for every paper carrying the metric.
    pub fn metric_values(&self, metric: QualityMetric) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .filter_map(|e| e.metric_value(metric).map(|v| (e.paper.paper_id.clone(), v)))
            .collect()
    }
}

/// Rank-based quartiles over `(id, value)` pairs. Input order is irrelevant.
pub fn quartiles_from_values(
    metric: QualityMetric,
    values: &[(String, f64)],
) -> Result<BTreeMap<String, QuartileLabel>> {
    let n = values.len();
    if n < 4 {
        return Err(CorpusError::InsufficientPopulation { metric, found: n });
    }
    let mut ranked: Vec<&(String, f64)> = values.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(pos, (id, _))| (id.clone(), QuartileLabel::from_group(pos * 4 / n)))
        .collect())
}

pub fn assign_quartiles(
    corpus: &CorpusStore,
    metric: QualityMetric,
) -> Result<BTreeMap<String, QuartileLabel>> {
    quartiles_from_values(metric, &corpus.metric_values(metric))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub paper_id: String,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Balanced Q1 (High) vs Q4 (Low) classification instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub metric: QualityMetric,
    pub seed: u64,
    pub split_ratio: f64,
    pub entries: Vec<TaskEntry>,
    pub split: TaskSplit,
}

impl TaskDataset {
    pub fn task_id(&self) -> &'static str {
        self.metric.slug()
    }

    pub fn label_of(&self, paper_id: &str) -> Option<Label> {
        self.entries
            .binary_search_by(|e| e.paper_id.as_str().cmp(paper_id))
            .ok()
            .map(|i| self.entries[i].label)
    }

    pub fn class_count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn train(&self) -> impl Iterator<Item = (&str, Label)> + '_ {
        self.split.train.iter().map(move |id| (id.as_str(), self.label_of(id).expect("split id in entries")))
    }

    pub fn test(&self) -> impl Iterator<Item = (&str, Label)> + '_ {
        self.split.test.iter().map(move |id| (id.as_str(), self.label_of(id).expect("split id in entries")))
    }

    /// Checks balance, partition, and per-class split fractions.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CorpusError::InvalidDataset(m));
        if !self.entries.windows(2).all(|w| w[0].paper_id < w[1].paper_id) {
            return bad("entries not sorted by unique paper_id".into());
        }
        let high = self.class_count(Label::High);
        let low = self.class_count(Label::Low);
        if high != low {
            return bad(format!("unbalanced classes: {high} High vs {low} Low"));
        }
        let train: HashSet<&str> = self.split.train.iter().map(String::as_str).collect();
        let test: HashSet<&str> = self.split.test.iter().map(String::as_str).collect();
        if train.len() != self.split.train.len() || test.len() != self.split.test.len() {
            return bad("duplicate ids in split".into());
        }
        if !train.is_disjoint(&test) {
            return bad("train and test overlap".into());
        }
        if train.len() + test.len() != self.entries.len()
            || !self.entries.iter().all(|e| train.contains(e.paper_id.as_str()) || test.contains(e.paper_id.as_str()))
        {
            return bad("split does not cover entries".into());
        }
        for label in [Label::High, Label::Low] {
            let n = self.class_count(label) as f64;
            let t = self.train().filter(|(_, l)| *l == label).count() as f64;
            if (t - n * self.split_ratio).abs() > 1.0 {
                return bad(format!("{label} train count {t} strays from ratio {}", self.split_ratio));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }
}

pub fn build_task_dataset(corpus: &CorpusStore, metric: QualityMetric, seed: u64) -> Result<TaskDataset> {
    build_task_dataset_with_ratio(corpus, metric, seed, DEFAULT_SPLIT_RATIO)
}

pub fn build_task_dataset_with_ratio(
    corpus: &CorpusStore,
    metric: QualityMetric,
    seed: u64,
    split_ratio: f64,
) -> Result<TaskDataset> {
    let quartiles = assign_quartiles(corpus, metric)?;
    task_from_quartiles(metric, &quartiles, seed, split_ratio)
}

/// Keeps Q1 and Q4, down-samples the larger side to exact balance, then
/// splits each class separately.
pub fn task_from_quartiles(
    metric: QualityMetric,
    quartiles: &BTreeMap<String, QuartileLabel>,
    seed: u64,
    split_ratio: f64,
) -> Result<TaskDataset> {
    if !(split_ratio > 0.0 && split_ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(split_ratio));
    }
    // BTreeMap iteration keeps both groups sorted by paper_id.
    let mut high: Vec<&String> = quartiles.iter().filter(|(_, q)| **q == QuartileLabel::Q1).map(|(id, _)| id).collect();
    let mut low: Vec<&String> = quartiles.iter().filter(|(_, q)| **q == QuartileLabel::Q4).map(|(id, _)| id).collect();
    for (group, quartile) in [(&high, QuartileLabel::Q1), (&low, QuartileLabel::Q4)] {
        if group.is_empty() {
            return Err(CorpusError::EmptyQuartile { metric, quartile });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = high.len().min(low.len());
    for group in [&mut high, &mut low] {
        if group.len() > target {
            let mut keep = rand::seq::index::sample(&mut rng, group.len(), target).into_vec();
            keep.sort_unstable();
            *group = keep.into_iter().map(|i| group[i]).collect();
        }
    }

    let train_counts = stratified_train_counts(target, split_ratio);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (group, n_train) in [(&high, train_counts.0), (&low, train_counts.1)] {
        let mut shuffled = group.clone();
        shuffled.shuffle(&mut rng);
        for (i, id) in shuffled.into_iter().enumerate() {
            if i < n_train { train.push(id.clone()) } else { test.push(id.clone()) }
        }
    }
    train.sort();
    test.sort();

    let mut entries: Vec<TaskEntry> = high
        .iter()
        .map(|id| TaskEntry { paper_id: (*id).clone(), label: Label::High })
        .chain(low.iter().map(|id| TaskEntry { paper_id: (*id).clone(), label: Label::Low }))
        .collect();
    entries.sort_by(|a, b| a.paper_id.cmp(&b.paper_id));

    Ok(TaskDataset { metric, seed, split_ratio, entries, split: TaskSplit { train, test } })
}

/// Train counts for two classes of `per_class` items each. The total is
/// `round(2 * per_class * ratio)`; the remainder above the per-class floors
/// goes to High first.
fn stratified_train_counts(per_class: usize, ratio: f64) -> (usize, usize) {
    let floor = ((per_class as f64 * ratio) + 1e-9).floor() as usize;
    let total = ((2 * per_class) as f64 * ratio + 1e-9).round() as usize;
    let extra = total.saturating_sub(2 * floor);
    let high = (floor + usize::from(extra >= 1)).min(per_class);
    let low = (floor + usize::from(extra >= 2)).min(per_class);
    (high, low)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper(id: &str, cites: u64, venue: &str) -> PaperRecord {
        PaperRecord {
            paper_id: id.into(),
            title: format!("Title {id}"),
            abstract_text: format!("Abstract of {id}."),
            citation_count_5y: cites,
            venue_id: venue.into(),
        }
    }

    fn venue(id: &str, sjr: f64, h: u64) -> VenueMetrics {
        VenueMetrics { venue_id: id.into(), sjr: Some(sjr), h_index: Some(h) }
    }

    #[test]
    fn join_all_complete() {
        let store = CorpusStore::from_records(
            vec![paper("a", 1, "v1"), paper("b", 2, "v2"), paper("c", 3, "v1")],
            vec![venue("v1", 1.5, 10), venue("v2", 0.4, 3)],
        )
        .unwrap();
        assert_eq!(store.len(), 3);
        assert!(store.entries().iter().all(CorpusEntry::metric_complete));
        assert_eq!(store.get("b").unwrap().venue.as_ref().unwrap().h_index, Some(3));
    }

    #[test]
    fn unknown_venue_kept_but_incomplete() {
        let store = CorpusStore::from_records(
            vec![paper("a", 1, "v1"), paper("b", 2, "nowhere")],
            vec![venue("v1", 1.5, 10)],
        )
        .unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(store.incomplete_ids(), vec!["b"]);
        assert_eq!(store.metric_values(QualityMetric::Sjr).len(), 1);
        assert_eq!(store.metric_values(QualityMetric::HIndex).len(), 1);
        assert_eq!(store.metric_values(QualityMetric::CitationCount).len(), 2);
    }

    #[test]
    fn duplicate_paper_id_is_named() {
        let err = CorpusStore::from_records(vec![paper("dup", 1, "v"), paper("dup", 2, "v")], vec![]).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicatePaper(ref id) if id == "dup"));
        assert!(err.to_string().contains("dup"));
    }

    #[test]
    fn malformed_line_number_reported() {
        let text = "{\"paper_id\":\"a\",\"title\":\"t\",\"abstract\":\"x\",\"citation_count_5y\":1,\"venue_id\":\"v\"}\n\n{\"paper_id\":\"b\"}\n";
        let err = read_records::<PaperRecord, _>(text.as_bytes(), RecordFormat::JsonLines).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn csv_with_same_headers() {
        let papers = "paper_id,title,abstract,citation_count_5y,venue_id\np1,T,\"An, abstract\",4,v1\n";
        let venues = "venue_id,sjr,h_index\nv1,2.5,40\nv2,,7\n";
        let store = CorpusStore::from_readers(papers.as_bytes(), RecordFormat::Csv, venues.as_bytes(), RecordFormat::Csv).unwrap();
        let e = store.get("p1").unwrap();
        assert_eq!(e.paper.abstract_text, "An, abstract");
        assert_eq!(e.metric_value(QualityMetric::Sjr), Some(2.5));
    }

    #[test]
    fn csv_bad_row_line_number() {
        let papers = "paper_id,title,abstract,citation_count_5y,venue_id\np1,T,A,4,v1\np2,T,A,minus,v1\n";
        let err = read_records::<PaperRecord, _>(papers.as_bytes(), RecordFormat::Csv).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn non_positive_sjr_rejected() {
        let err = CorpusStore::from_records(vec![], vec![venue("v", 0.0, 1)]).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { .. }));
    }

    fn vals(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn quartiles_of_one_to_eight() {
        let v: Vec<(String, f64)> = (1..=8).map(|i| (format!("p{i}"), i as f64)).collect();
        let q = quartiles_from_values(QualityMetric::CitationCount, &v).unwrap();
        let expect = [
            QuartileLabel::Q4, QuartileLabel::Q4, QuartileLabel::Q3, QuartileLabel::Q3,
            QuartileLabel::Q2, QuartileLabel::Q2, QuartileLabel::Q1, QuartileLabel::Q1,
        ];
        for (i, e) in expect.iter().enumerate() {
            assert_eq!(q[&format!("p{}", i + 1)], *e);
        }
    }

    #[test]
    fn all_equal_values_split_by_id() {
        let v: Vec<(String, f64)> = (0..8).map(|i| (format!("p{i}"), 5.0)).collect();
        let q = quartiles_from_values(QualityMetric::CitationCount, &v).unwrap();
        for label in [QuartileLabel::Q1, QuartileLabel::Q2, QuartileLabel::Q3, QuartileLabel::Q4] {
            assert_eq!(q.values().filter(|l| **l == label).count(), 2);
        }
        assert_eq!(q["p0"], QuartileLabel::Q1);
        assert_eq!(q["p7"], QuartileLabel::Q4);
    }

    #[test]
    fn five_values_extremes() {
        let v = vals(&[("a", 10.0), ("b", 20.0), ("c", 30.0), ("d", 40.0), ("e", 50.0)]);
        let q = quartiles_from_values(QualityMetric::CitationCount, &v).unwrap();
        assert_eq!(q["e"], QuartileLabel::Q1);
        assert_eq!(q["a"], QuartileLabel::Q4);
        let sizes: Vec<usize> = [QuartileLabel::Q1, QuartileLabel::Q2, QuartileLabel::Q3, QuartileLabel::Q4]
            .iter()
            .map(|l| q.values().filter(|x| *x == l).count())
            .collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn fewer_than_four_is_insufficient() {
        let v = vals(&[("a", 1.0), ("b", 2.0), ("c", 3.0)]);
        let err = quartiles_from_values(QualityMetric::Sjr, &v).unwrap_err();
        assert!(err.to_string().contains("insufficient population"));
    }

    fn store_with_cites(cites: &[u64]) -> CorpusStore {
        let papers = cites.iter().enumerate().map(|(i, c)| paper(&format!("p{i:03}"), *c, "v")).collect();
        CorpusStore::from_records(papers, vec![venue("v", 1.0, 1)]).unwrap()
    }

    #[test]
    fn task_from_eight_papers() {
        let store = store_with_cites(&[1, 2, 3, 4, 5, 6, 7, 8]);
        let ds = build_task_dataset(&store, QualityMetric::CitationCount, 1).unwrap();
        assert_eq!(ds.entries.len(), 4);
        assert_eq!(ds.class_count(Label::High), 2);
        assert_eq!(ds.label_of("p007"), Some(Label::High));
        assert_eq!(ds.label_of("p000"), Some(Label::Low));
        ds.validate().unwrap();
    }

    #[test]
    fn unequal_quartiles_downsampled() {
        let mut q = BTreeMap::new();
        for i in 0..5 {
            q.insert(format!("h{i}"), QuartileLabel::Q1);
        }
        for i in 0..4 {
            q.insert(format!("l{i}"), QuartileLabel::Q4);
        }
        q.insert("m".into(), QuartileLabel::Q2);
        let ds = task_from_quartiles(QualityMetric::CitationCount, &q, 3, 0.7).unwrap();
        assert_eq!(ds.entries.len(), 8);
        assert_eq!(ds.class_count(Label::High), 4);
        assert_eq!(ds.class_count(Label::Low), 4);
        ds.validate().unwrap();
    }

    #[test]
    fn ten_entries_split_seven_three() {
        let mut q = BTreeMap::new();
        for i in 0..5 {
            q.insert(format!("h{i}"), QuartileLabel::Q1);
            q.insert(format!("l{i}"), QuartileLabel::Q4);
        }
        let ds = task_from_quartiles(QualityMetric::CitationCount, &q, 9, 0.7).unwrap();
        assert_eq!(ds.split.train.len(), 7);
        assert_eq!(ds.split.test.len(), 3);
        ds.validate().unwrap();
    }

    #[test]
    fn empty_quartile_errors() {
        let mut q = BTreeMap::new();
        q.insert("a".to_string(), QuartileLabel::Q1);
        q.insert("b".to_string(), QuartileLabel::Q2);
        let err = task_from_quartiles(QualityMetric::Sjr, &q, 0, 0.7).unwrap_err();
        assert!(matches!(err, CorpusError::EmptyQuartile { quartile: QuartileLabel::Q4, .. }));
    }

    #[test]
    fn same_seed_byte_identical_json() {
        let cites: Vec<u64> = (0..40).map(|i| (i * 37) % 23).collect();
        let store = store_with_cites(&cites);
        let a = build_task_dataset(&store, QualityMetric::CitationCount, 11).unwrap().to_json().unwrap();
        let b = build_task_dataset(&store, QualityMetric::CitationCount, 11).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let parsed = TaskDataset::from_json(&a).unwrap();
        assert_eq!(parsed.to_json().unwrap(), a);
    }

    #[test]
    fn stratified_counts_table() {
        assert_eq!(stratified_train_counts(5, 0.7), (4, 3));
        assert_eq!(stratified_train_counts(10, 0.7), (7, 7));
        assert_eq!(stratified_train_counts(1, 0.7), (1, 0));
        assert_eq!(stratified_train_counts(100, 0.7), (70, 70));
    }

    #[test]
    fn excluded_from_venue_tasks_kept_for_citations() {
        let mut papers: Vec<PaperRecord> = (0..8).map(|i| paper(&format!("p{i}"), i, "v")).collect();
        papers.push(paper("orphan", 100, "missing"));
        let store = CorpusStore::from_records(papers, vec![venue("v", 1.0, 2)]).unwrap();
        assert!(assign_quartiles(&store, QualityMetric::CitationCount).unwrap().contains_key("orphan"));
        assert!(!assign_quartiles(&store, QualityMetric::HIndex).unwrap().contains_key("orphan"));
    }
}

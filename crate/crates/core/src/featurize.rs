//! Per-token SAE activations and mean pooling into paper vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::summarize::{content_words, seeded_rng, BackendError, CacheStats, SummaryRecord};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
    #[error("empty summary for paper `{paper_id}`")]
    EmptySummary { paper_id: String },
    #[error("paper `{paper_id}`: {tokens} tokens but {rows} feature rows")]
    RowCountMismatch { paper_id: String, tokens: usize, rows: usize },
    #[error("paper `{paper_id}`: invalid feature row {row}: {message}")]
    InvalidRow { paper_id: String, row: usize, message: String },
    #[error("SAE backend failure for paper `{paper_id}` (retryable: {retryable}): {message}")]
    Backend { paper_id: String, retryable: bool, message: String },
    #[error("feature spaces differ: `{left}` vs `{right}`")]
    SpaceMismatch { left: String, right: String },
    #[error("invalid SAE config: {0}")]
    InvalidConfig(String),
    #[error("tensor container: {0}")]
    Container(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = FeatureError> = std::result::Result<T, E>;

/// Identifies a feature space. Vectors from different configs never mix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SaeConfig {
    pub model_id: String,
    pub layer_index: u32,
    pub feature_count: usize,
    pub sae_id: String,
}

impl SaeConfig {
    pub fn new(model_id: impl Into<String>, layer_index: u32, feature_count: usize, sae_id: impl Into<String>) -> Result<Self> {
        let cfg = Self { model_id: model_id.into(), layer_index, feature_count, sae_id: sae_id.into() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_count == 0 {
            return Err(FeatureError::InvalidConfig(format!("{}: feature_count must be positive", self.sae_id)));
        }
        if self.sae_id.is_empty() || self.model_id.is_empty() {
            return Err(FeatureError::InvalidConfig("model_id and sae_id must be non-empty".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        format!("{}@L{}/{}#{}", self.model_id, self.layer_index, self.sae_id, self.feature_count)
    }

    pub fn ensure_same(&self, other: &SaeConfig) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(FeatureError::SpaceMismatch { left: self.fingerprint(), right: other.fingerprint() })
        }
    }
}

/// Non-zero entries of one token's activations, sorted by index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRow {
    /// Builds a row from `(index, value)` pairs; zeros are dropped.
    pub fn from_pairs(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.retain(|(_, v)| *v != 0.0);
        pairs.sort_by_key(|p| p.0);
        let (indices, values) = pairs.into_iter().unzip();
        Self { indices, values }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        Self::from_pairs(values.iter().enumerate().map(|(i, v)| (i as u32, *v)).collect())
    }

    pub fn get(&self, index: usize) -> f64 {
        match self.indices.binary_search(&(index as u32)) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    fn check(&self, feature_count: usize) -> std::result::Result<(), String> {
        if self.indices.len() != self.values.len() {
            return Err("index/value length mismatch".into());
        }
        if !self.indices.windows(2).all(|w| w[0] < w[1]) {
            return Err("indices not strictly increasing".into());
        }
        if let Some(&i) = self.indices.last() {
            if i as usize >= feature_count {
                return Err(format!("index {i} >= feature count {feature_count}"));
            }
        }
        if let Some(v) = self.values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(format!("activation {v} is negative or non-finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenFeatureMatrix {
    pub paper_id: String,
    pub sae: SaeConfig,
    pub tokens: Vec<String>,
    pub rows: Vec<SparseRow>,
}

impl TokenFeatureMatrix {
    pub fn column(&self, feature_index: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.get(feature_index)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperFeatureVector {
    pub paper_id: String,
    pub sae: SaeConfig,
    pub values: Vec<f64>,
}

/// Arithmetic mean of the token rows, feature by feature.
pub fn pool_features(matrix: &TokenFeatureMatrix) -> Result<PaperFeatureVector> {
    if matrix.rows.is_empty() {
        return Err(FeatureError::EmptySummary { paper_id: matrix.paper_id.clone() });
    }
    let mut values = vec![0.0f64; matrix.sae.feature_count];
    for row in &matrix.rows {
        for (&i, &v) in row.indices.iter().zip(&row.values) {
            values[i as usize] += v;
        }
    }
    let n = matrix.rows.len() as f64;
    for v in &mut values {
        *v /= n;
    }
    Ok(PaperFeatureVector { paper_id: matrix.paper_id.clone(), sae: matrix.sae.clone(), values })
}

/// JumpReLU encoder: `pre = W h + b`, output `pre_i` where `pre_i > θ_i`, else 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSaeWeights {
    feature_count: usize,
    d_model: usize,
    /// Row-major `feature_count × d_model`.
    encode_matrix: Vec<f64>,
    encode_bias: Vec<f64>,
    thresholds: Vec<f64>,
}

impl ReferenceSaeWeights {
    pub fn new(
        feature_count: usize,
        d_model: usize,
        encode_matrix: Vec<f64>,
        encode_bias: Vec<f64>,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        let shape = |name: &str, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(FeatureError::Shape {
                    expected: format!("{name} of {expected} elements"),
                    found: format!("{found}"),
                })
            }
        };
        shape("encode_matrix", feature_count * d_model, encode_matrix.len())?;
        shape("encode_bias", feature_count, encode_bias.len())?;
        shape("thresholds", feature_count, thresholds.len())?;
        if let Some(t) = thresholds.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
            return Err(FeatureError::InvalidConfig(format!("threshold {t} must be finite and non-negative")));
        }
        Ok(Self { feature_count, d_model, encode_matrix, encode_bias, thresholds })
    }

    /// Builds weights from an `F × D` nested matrix.
    pub fn from_rows(rows: &[Vec<f64>], encode_bias: Vec<f64>, thresholds: Vec<f64>) -> Result<Self> {
        let d_model = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != d_model) {
            return Err(FeatureError::Shape { expected: format!("rows of {d_model}"), found: format!("row of {}", bad.len()) });
        }
        Self::new(rows.len(), d_model, rows.concat(), encode_bias, thresholds)
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    fn pre_activation(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        if hidden.len() != self.d_model {
            return Err(FeatureError::Shape {
                expected: format!("hidden [{}] for encode_matrix [{}, {}]", self.d_model, self.feature_count, self.d_model),
                found: format!("hidden [{}]", hidden.len()),
            });
        }
        Ok(self
            .encode_matrix
            .chunks_exact(self.d_model)
            .zip(&self.encode_bias)
            .map(|(row, b)| row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>() + b)
            .collect())
    }

    pub fn encode(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let pre = self.pre_activation(hidden)?;
        Ok(pre.into_iter().zip(&self.thresholds).map(|(p, t)| if p > *t { p } else { 0.0 }).collect())
    }

    /// Reads the flat container described by a JSON sidecar.
    pub fn load(sidecar: &Path) -> Result<Self> {
        let meta: TensorContainer = serde_json::from_str(&fs::read_to_string(sidecar)?)?;
        if meta.dtype != CONTAINER_DTYPE {
            return Err(FeatureError::Container(format!("unsupported dtype `{}`", meta.dtype)));
        }
        let data_path = sidecar.parent().unwrap_or(Path::new(".")).join(&meta.data);
        let bytes = fs::read(&data_path)?;
        if bytes.len() % 4 != 0 {
            return Err(FeatureError::Container(format!("{} is not a whole number of f32 values", data_path.display())));
        }
        let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = |name: &str| -> Result<(&TensorEntry, Vec<f64>)> {
            let entry = meta.tensors.get(name).ok_or_else(|| FeatureError::Container(format!("missing tensor `{name}`")))?;
            let len: usize = entry.shape.iter().product();
            let end = entry.offset + len;
            if end > floats.len() {
                return Err(FeatureError::Container(format!("tensor `{name}` overruns data ({end} > {})", floats.len())));
            }
            Ok((entry, floats[entry.offset..end].iter().map(|&v| f64::from(v)).collect()))
        };
        let (w_entry, w) = tensor("encode_matrix")?;
        let [f, d] = w_entry.shape[..] else {
            return Err(FeatureError::Container("encode_matrix must be 2-D".into()));
        };
        let (_, b) = tensor("encode_bias")?;
        let (_, t) = tensor("thresholds")?;
        Self::new(f, d, w, b, t)
    }

    /// Writes the container as `<sidecar>` plus a sibling `.bin` data file.
    pub fn save(&self, sidecar: &Path) -> Result<()> {
        let data_name = format!(
            "{}.bin",
            sidecar.file_stem().and_then(|s| s.to_str()).unwrap_or("weights")
        );
        let mut tensors = BTreeMap::new();
        let mut bytes = Vec::with_capacity(4 * (self.encode_matrix.len() + 2 * self.feature_count));
        let mut offset = 0;
        for (name, shape, data) in [
            ("encode_matrix", vec![self.feature_count, self.d_model], &self.encode_matrix),
            ("encode_bias", vec![self.feature_count], &self.encode_bias),
            ("thresholds", vec![self.feature_count], &self.thresholds),
        ] {
            tensors.insert(name.to_owned(), TensorEntry { shape, offset });
            offset += data.len();
            for &v in data.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let meta = TensorContainer { dtype: CONTAINER_DTYPE.into(), data: data_name.clone(), tensors };
        fs::write(sidecar.parent().unwrap_or(Path::new(".")).join(data_name), bytes)?;
        fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

const CONTAINER_DTYPE: &str = "f32-le";

/// Sidecar of the flat tensor container; offsets count f32 elements.
#[derive(Debug, Serialize, Deserialize)]
struct TensorContainer {
    dtype: String,
    data: String,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: usize,
}

pub fn sae_encode(weights: &ReferenceSaeWeights, hidden: &[f64]) -> Result<Vec<f64>> {
    weights.encode(hidden)
}

/// Produces one sparse non-negative row per generated summary token.
pub trait SaeBackend: Send + Sync {
    fn sae(&self) -> &SaeConfig;
    /// Whether `encode_tokens` may be called from several threads at once.
    fn concurrent(&self) -> bool {
        true
    }
    fn encode_tokens(&self, summary: &SummaryRecord) -> std::result::Result<Vec<SparseRow>, BackendError>;
}

pub fn extract_token_features(backend: &dyn SaeBackend, summary: &SummaryRecord) -> Result<TokenFeatureMatrix> {
    let paper_id = &summary.paper_id;
    if summary.summary_tokens.is_empty() {
        return Err(FeatureError::EmptySummary { paper_id: paper_id.clone() });
    }
    let rows = backend.encode_tokens(summary).map_err(|e| FeatureError::Backend {
        paper_id: paper_id.clone(),
        retryable: e.retryable,
        message: e.message,
    })?;
    if rows.len() != summary.summary_tokens.len() {
        return Err(FeatureError::RowCountMismatch {
            paper_id: paper_id.clone(),
            tokens: summary.summary_tokens.len(),
            rows: rows.len(),
        });
    }
    let sae = backend.sae();
    for (i, row) in rows.iter().enumerate() {
        row.check(sae.feature_count)
            .map_err(|message| FeatureError::InvalidRow { paper_id: paper_id.clone(), row: i, message })?;
    }
    Ok(TokenFeatureMatrix {
        paper_id: paper_id.clone(),
        sae: sae.clone(),
        tokens: summary.summary_tokens.clone(),
        rows,
    })
}

/// Feature that fires on tokens whose word is in `trigger_words`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedFeature {
    pub feature_index: usize,
    pub trigger_words: BTreeSet<String>,
    pub strength: f64,
}

/// Seeded-hash SAE stand-in. Ordinary words light up `active_per_token`
/// pseudo-random features; trigger words light up only their planted
/// features, so a paper's planted activation is its trigger-word density.
#[derive(Debug, Clone)]
pub struct MockSae {
    sae: SaeConfig,
    seed: u64,
    active_per_token: usize,
    planted: Vec<PlantedFeature>,
}

impl MockSae {
    pub fn new(sae: SaeConfig, seed: u64) -> Self {
        Self { sae, seed, active_per_token: 4, planted: Vec::new() }
    }

    pub fn with_active_per_token(mut self, k: usize) -> Self {
        self.active_per_token = k;
        self
    }

    pub fn with_planted(mut self, planted: PlantedFeature) -> Result<Self> {
        if planted.feature_index >= self.sae.feature_count {
            return Err(FeatureError::InvalidConfig(format!(
                "planted feature {} outside {} features",
                planted.feature_index, self.sae.feature_count
            )));
        }
        if !(planted.strength.is_finite() && planted.strength > 0.0) {
            return Err(FeatureError::InvalidConfig("planted strength must be positive".into()));
        }
        self.planted.push(planted);
        Ok(self)
    }

    pub fn planted(&self) -> &[PlantedFeature] {
        &self.planted
    }

    fn encode_word(&self, word: &str) -> SparseRow {
        let planted: Vec<(u32, f64)> = self
            .planted
            .iter()
            .filter(|p| p.trigger_words.contains(word))
            .map(|p| (p.feature_index as u32, p.strength))
            .collect();
        if !planted.is_empty() {
            let mut merged: BTreeMap<u32, f64> = BTreeMap::new();
            for (i, v) in planted {
                *merged.entry(i).or_default() += v;
            }
            return SparseRow::from_pairs(merged.into_iter().collect());
        }
        let reserved: BTreeSet<usize> = self.planted.iter().map(|p| p.feature_index).collect();
        let available = self.sae.feature_count - reserved.len();
        let k = self.active_per_token.min(available);
        let mut rng = seeded_rng(&[b"mock-sae", word.as_bytes()], self.seed);
        let mut chosen = BTreeMap::new();
        while chosen.len() < k {
            let i = rng.random_range(0..self.sae.feature_count);
            if reserved.contains(&i) || chosen.contains_key(&(i as u32)) {
                continue;
            }
            chosen.insert(i as u32, rng.random_range(0.05..=1.0));
        }
        SparseRow::from_pairs(chosen.into_iter().collect())
    }
}

impl SaeBackend for MockSae {
    fn sae(&self) -> &SaeConfig {
        &self.sae
    }

    fn encode_tokens(&self, summary: &SummaryRecord) -> std::result::Result<Vec<SparseRow>, BackendError> {
        Ok(summary
            .summary_tokens
            .iter()
            .map(|token| {
                let word = content_words(token).concat();
                self.encode_word(if word.is_empty() { token.trim() } else { &word })
            })
            .collect())
    }
}

/// Source of per-token backbone hidden states.
pub trait HiddenStateModel: Send + Sync {
    fn d_model(&self) -> usize;
    fn hidden_states(&self, tokens: &[String]) -> std::result::Result<Vec<Vec<f64>>, BackendError>;
}

/// Lookup-table embedding model; unknown tokens map to a seeded vector.
#[derive(Debug, Clone)]
pub struct ToyEmbeddingModel {
    d_model: usize,
    table: HashMap<String, Vec<f64>>,
    seed: u64,
}

impl ToyEmbeddingModel {
    pub fn new(d_model: usize, seed: u64) -> Self {
        Self { d_model, table: HashMap::new(), seed }
    }

    pub fn with_embedding(mut self, token: impl Into<String>, embedding: Vec<f64>) -> Result<Self> {
        if embedding.len() != self.d_model {
            return Err(FeatureError::Shape { expected: format!("[{}]", self.d_model), found: format!("[{}]", embedding.len()) });
        }
        self.table.insert(token.into(), embedding);
        Ok(self)
    }
}

impl HiddenStateModel for ToyEmbeddingModel {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn hidden_states(&self, tokens: &[String]) -> std::result::Result<Vec<Vec<f64>>, BackendError> {
        Ok(tokens
            .iter()
            .map(|t| {
                let key = t.trim();
                self.table.get(key).cloned().unwrap_or_else(|| {
                    let mut rng = seeded_rng(&[b"toy-embedding", key.as_bytes()], self.seed);
                    (0..self.d_model).map(|_| rng.random_range(-1.0..1.0)).collect()
                })
            })
            .collect())
    }
}

/// Reference encoder applied to a backbone's per-token hidden states.
pub struct ReferenceSaeBackend {
    sae: SaeConfig,
    weights: ReferenceSaeWeights,
    model: Box<dyn HiddenStateModel>,
}

impl ReferenceSaeBackend {
    pub fn new(sae: SaeConfig, weights: ReferenceSaeWeights, model: Box<dyn HiddenStateModel>) -> Result<Self> {
        if weights.feature_count() != sae.feature_count {
            return Err(FeatureError::Shape {
                expected: format!("{} features", sae.feature_count),
                found: format!("{} features in weights", weights.feature_count()),
            });
        }
        if weights.d_model() != model.d_model() {
            return Err(FeatureError::Shape {
                expected: format!("d_model {}", weights.d_model()),
                found: format!("model d_model {}", model.d_model()),
            });
        }
        Ok(Self { sae, weights, model })
    }
}

impl SaeBackend for ReferenceSaeBackend {
    fn sae(&self) -> &SaeConfig {
        &self.sae
    }

    fn encode_tokens(&self, summary: &SummaryRecord) -> std::result::Result<Vec<SparseRow>, BackendError> {
        self.model
            .hidden_states(&summary.summary_tokens)?
            .iter()
            .map(|h| {
                self.weights
                    .encode(h)
                    .map(|dense| SparseRow::from_dense(&dense))
                    .map_err(|e| BackendError::fatal(e.to_string()))
            })
            .collect()
    }
}

/// Maps a paper id to a file-system-safe name.
pub fn file_stem_for(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

/// Digest of the token sequence a cached vector was computed from.
pub fn summary_digest(summary: &SummaryRecord) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for t in &summary.summary_tokens {
        h.update((t.len() as u64).to_le_bytes());
        h.update(t.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredVector {
    paper_id: String,
    sae: SaeConfig,
    #[serde(default)]
    summary_digest: String,
    indices: Vec<u32>,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Manifest {
    spaces: BTreeMap<String, ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    sae: SaeConfig,
    dir: String,
}

/// On-disk pooled vectors (and optionally token matrices), one directory
/// per feature space, indexed by `manifest.json`.
#[derive(Debug)]
pub struct FeatureCache {
    root: PathBuf,
    manifest: Manifest,
}

impl FeatureCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.exists() {
            serde_json::from_str(&fs::read_to_string(&manifest_path)?)?
        } else {
            Manifest::default()
        };
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Directory for a feature space, looked up in the manifest.
    pub fn space_dir(&self, sae: &SaeConfig) -> Option<PathBuf> {
        self.manifest.spaces.get(&sae.fingerprint()).map(|e| self.root.join(&e.dir))
    }

    pub fn spaces(&self) -> impl Iterator<Item = &SaeConfig> {
        self.manifest.spaces.values().map(|e| &e.sae)
    }

    pub fn space_by_sae_id(&self, sae_id: &str) -> Option<&SaeConfig> {
        self.spaces().find(|s| s.sae_id == sae_id)
    }

    pub fn register(&mut self, sae: &SaeConfig) -> Result<PathBuf> {
        if let Some(dir) = self.space_dir(sae) {
            return Ok(dir);
        }
        let dir = file_stem_for(&sae.fingerprint());
        self.manifest.spaces.insert(sae.fingerprint(), ManifestEntry { sae: sae.clone(), dir: dir.clone() });
        fs::create_dir_all(self.root.join(&dir).join("tokens"))?;
        fs::write(self.root.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.root.join(dir))
    }

    fn vector_path(&self, sae: &SaeConfig, paper_id: &str) -> Option<PathBuf> {
        self.space_dir(sae).map(|d| d.join(format!("{}.json", file_stem_for(paper_id))))
    }

    fn matrix_path(&self, sae: &SaeConfig, paper_id: &str) -> Option<PathBuf> {
        self.space_dir(sae).map(|d| d.join("tokens").join(format!("{}.json", file_stem_for(paper_id))))
    }

    pub fn load_vector(&self, sae: &SaeConfig, paper_id: &str) -> Result<Option<PaperFeatureVector>> {
        self.load_checked(sae, paper_id, None)
    }

    /// Loads a cached vector only if it was pooled from `summary`'s tokens.
    pub fn load_vector_for(&self, sae: &SaeConfig, summary: &SummaryRecord) -> Result<Option<PaperFeatureVector>> {
        self.load_checked(sae, &summary.paper_id, Some(&summary_digest(summary)))
    }

    fn load_checked(&self, sae: &SaeConfig, paper_id: &str, digest: Option<&str>) -> Result<Option<PaperFeatureVector>> {
        let Some(path) = self.vector_path(sae, paper_id).filter(|p| p.exists()) else {
            return Ok(None);
        };
        let stored: StoredVector = serde_json::from_str(&fs::read_to_string(path)?)?;
        sae.ensure_same(&stored.sae)?;
        if digest.is_some_and(|d| d != stored.summary_digest) {
            return Ok(None);
        }
        let mut values = vec![0.0; sae.feature_count];
        for (i, v) in stored.indices.iter().zip(stored.values) {
            values[*i as usize] = v;
        }
        Ok(Some(PaperFeatureVector { paper_id: stored.paper_id, sae: stored.sae, values }))
    }

    pub fn store_vector(&mut self, vector: &PaperFeatureVector, summary_digest: &str) -> Result<()> {
        self.register(&vector.sae)?;
        let row = SparseRow::from_dense(&vector.values);
        let stored = StoredVector {
            paper_id: vector.paper_id.clone(),
            sae: vector.sae.clone(),
            summary_digest: summary_digest.to_owned(),
            indices: row.indices,
            values: row.values,
        };
        let path = self.vector_path(&vector.sae, &vector.paper_id).expect("registered");
        fs::write(path, serde_json::to_string(&stored)?)?;
        Ok(())
    }

    pub fn load_matrix(&self, sae: &SaeConfig, paper_id: &str) -> Result<Option<TokenFeatureMatrix>> {
        match self.matrix_path(sae, paper_id).filter(|p| p.exists()) {
            Some(path) => Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?)),
            None => Ok(None),
        }
    }

    pub fn store_matrix(&mut self, matrix: &TokenFeatureMatrix) -> Result<()> {
        self.register(&matrix.sae)?;
        let path = self.matrix_path(&matrix.sae, &matrix.paper_id).expect("registered");
        fs::write(path, serde_json::to_string(matrix)?)?;
        Ok(())
    }
}

const SAE_RETRIES: usize = 2;

fn extract_with_retry(backend: &dyn SaeBackend, summary: &SummaryRecord) -> Result<TokenFeatureMatrix> {
    let mut attempt = 0;
    loop {
        match extract_token_features(backend, summary) {
            Err(FeatureError::Backend { retryable: true, .. }) if attempt < SAE_RETRIES => attempt += 1,
            other => return other,
        }
    }
}

/// Featurizes summaries into pooled vectors keyed by `paper_id`. Backends
/// that forbid concurrent calls are driven sequentially; pooling always runs
/// in parallel. With `retain_tokens` the token matrices are cached too.
pub fn featurize_summaries(
    backend: &dyn SaeBackend,
    summaries: &BTreeMap<String, SummaryRecord>,
    mut cache: Option<&mut FeatureCache>,
    retain_tokens: bool,
) -> Result<(BTreeMap<String, PaperFeatureVector>, CacheStats)> {
    let sae = backend.sae().clone();
    let mut out = BTreeMap::new();
    let mut todo = Vec::new();
    for (id, summary) in summaries {
        let cached = match cache.as_deref() {
            Some(c) => {
                let has_tokens = !retain_tokens || c.matrix_path(&sae, id).is_some_and(|p| p.exists());
                if has_tokens { c.load_vector_for(&sae, summary)? } else { None }
            }
            None => None,
        };
        match cached {
            Some(v) => {
                out.insert(id.clone(), v);
            }
            None => todo.push(summary),
        }
    }
    let stats = CacheStats { hits: out.len(), misses: todo.len() };

    let matrices: Vec<TokenFeatureMatrix> = if backend.concurrent() {
        todo.par_iter().map(|s| extract_with_retry(backend, s)).collect::<Result<_>>()?
    } else {
        todo.iter().map(|s| extract_with_retry(backend, s)).collect::<Result<_>>()?
    };
    let pooled: Vec<PaperFeatureVector> = matrices.par_iter().map(pool_features).collect::<Result<_>>()?;

    if let Some(c) = cache.as_deref_mut() {
        for ((matrix, vector), summary) in matrices.iter().zip(&pooled).zip(&todo) {
            c.store_vector(vector, &summary_digest(summary))?;
            if retain_tokens {
                c.store_matrix(matrix)?;
            }
        }
    }
    for vector in pooled {
        out.insert(vector.paper_id.clone(), vector);
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sae(f: usize) -> SaeConfig {
        SaeConfig::new("toy", 0, f, "toy-sae").unwrap()
    }

    fn summary(tokens: &[&str]) -> SummaryRecord {
        SummaryRecord {
            paper_id: "p".into(),
            backend_id: "mock".into(),
            seed: 0,
            prompt_text: String::new(),
            summary_text: tokens.concat(),
            summary_tokens: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    fn example_weights(theta: f64) -> ReferenceSaeWeights {
        ReferenceSaeWeights::from_rows(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![0.0; 3],
            vec![theta; 3],
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_encoding() {
        // pre = [1, -1, 0]; only the first clears θ = 0.5.
        assert_eq!(sae_encode(&example_weights(0.5), &[1.0, -1.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_threshold_passes_non_negative_pre() {
        assert_eq!(sae_encode(&example_weights(0.0), &[2.0, 3.0]).unwrap(), vec![2.0, 3.0, 5.0]);
    }

    #[test]
    fn zero_hidden_gives_zero() {
        for theta in [0.0, 0.3, 2.0] {
            assert_eq!(sae_encode(&example_weights(theta), &[0.0, 0.0]).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn dimension_mismatch_names_shapes() {
        let err = sae_encode(&example_weights(0.0), &[1.0, 2.0, 3.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn pool_two_rows() {
        let m = TokenFeatureMatrix {
            paper_id: "p".into(),
            sae: sae(2),
            tokens: vec!["a".into(), "b".into()],
            rows: vec![SparseRow::from_dense(&[1.0, 0.0]), SparseRow::from_dense(&[3.0, 2.0])],
        };
        assert_eq!(pool_features(&m).unwrap().values, vec![2.0, 1.0]);
    }

    #[test]
    fn pool_single_row_identity() {
        let row = [0.25, 0.0, 7.5];
        let m = TokenFeatureMatrix { paper_id: "p".into(), sae: sae(3), tokens: vec!["a".into()], rows: vec![SparseRow::from_dense(&row)] };
        assert_eq!(pool_features(&m).unwrap().values, row.to_vec());
    }

    #[test]
    fn pool_empty_errors() {
        let m = TokenFeatureMatrix { paper_id: "p".into(), sae: sae(3), tokens: vec![], rows: vec![] };
        assert!(pool_features(&m).unwrap_err().to_string().contains("empty summary"));
    }

    #[test]
    fn mock_shape_and_determinism() {
        let backend = MockSae::new(sae(64), 3);
        let s = summary(&["alpha", " beta", " gamma", " delta", "."]);
        let a = extract_token_features(&backend, &s).unwrap();
        assert_eq!(a.rows.len(), 5);
        assert!(a.rows.iter().all(|r| r.nnz() == 4));
        assert_eq!(a, extract_token_features(&backend, &s).unwrap());
    }

    #[test]
    fn mock_planted_token_peak() {
        let planted = PlantedFeature { feature_index: 9, trigger_words: ["novel".to_string()].into(), strength: 2.0 };
        let backend = MockSae::new(sae(32), 1).with_planted(planted).unwrap();
        let m = extract_token_features(&backend, &summary(&["we", " propose", " novel", " methods"])).unwrap();
        assert_eq!(m.column(9), vec![0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn reference_backend_matches_encoder() {
        let model = ToyEmbeddingModel::new(2, 0)
            .with_embedding("x", vec![1.0, -1.0])
            .unwrap()
            .with_embedding("y", vec![2.0, 3.0])
            .unwrap();
        let backend = ReferenceSaeBackend::new(sae(3), example_weights(0.5), Box::new(model)).unwrap();
        let m = extract_token_features(&backend, &summary(&["x", " y"])).unwrap();
        // x: pre [1,-1,0] -> [1,0,0]; y: pre [2,3,5] -> [2,3,5]
        assert_eq!(m.column(0), vec![1.0, 2.0]);
        assert_eq!(m.column(1), vec![0.0, 3.0]);
        assert_eq!(m.column(2), vec![0.0, 5.0]);
    }

    struct Misaligned(SaeConfig);

    impl SaeBackend for Misaligned {
        fn sae(&self) -> &SaeConfig {
            &self.0
        }
        fn encode_tokens(&self, _: &SummaryRecord) -> std::result::Result<Vec<SparseRow>, BackendError> {
            Ok(vec![SparseRow::default()])
        }
    }

    #[test]
    fn row_count_mismatch_is_hard_error() {
        let err = extract_token_features(&Misaligned(sae(4)), &summary(&["a", " b"])).unwrap_err();
        assert!(matches!(err, FeatureError::RowCountMismatch { tokens: 2, rows: 1, .. }));
    }

    #[test]
    fn space_mismatch_detected() {
        let other = SaeConfig::new("toy", 1, 4, "toy-sae").unwrap();
        assert!(sae(4).ensure_same(&other).is_err());
        assert!(SaeConfig::new("m", 0, 0, "s").is_err());
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.json");
        let w = ReferenceSaeWeights::from_rows(&[vec![0.5, -1.25], vec![2.0, 0.0]], vec![0.125, -0.5], vec![0.0, 0.25]).unwrap();
        w.save(&path).unwrap();
        assert_eq!(ReferenceSaeWeights::load(&path).unwrap(), w);
        assert_eq!(fs::metadata(dir.path().join("sae.bin")).unwrap().len(), 4 * 8);
    }

    #[test]
    fn cache_hits_on_second_pass() {
        let dir = tempfile::tempdir().unwrap();
        let backend = MockSae::new(sae(16), 0);
        let mut summaries = BTreeMap::new();
        for id in ["a/1", "b"] {
            summaries.insert(id.to_string(), SummaryRecord { paper_id: id.into(), ..summary(&["one", " two"]) });
        }
        let mut cache = FeatureCache::open(dir.path()).unwrap();
        let (first, stats) = featurize_summaries(&backend, &summaries, Some(&mut cache), true).unwrap();
        assert_eq!(stats.misses, 2);
        let mut cache = FeatureCache::open(dir.path()).unwrap();
        let (second, stats) = featurize_summaries(&backend, &summaries, Some(&mut cache), true).unwrap();
        assert_eq!(stats.hits, 2);
        assert_eq!(first, second);
        assert!(cache.load_matrix(backend.sae(), "a/1").unwrap().is_some());
    }
}

//! Prompt rendering and summary generation over pluggable text backends.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::PaperRecord;

pub const TITLE_PLACEHOLDER: &str = "{Title}";
pub const ABSTRACT_PLACEHOLDER: &str = "{Abstract}";
pub const DEFAULT_TARGET_SENTENCES: usize = 3;

pub const INSTRUCTION_TEMPLATE: &str = "Write a three sentence summary of the topics in the following paper.\n\
Title: {Title}\nAbstract: {Abstract}\n";
pub const BASE_COMPLETION_TEMPLATE: &str = "Title: {Title}\nAbstract: {Abstract}\n\
A three sentence summary of the topics in the paper above:";

/// Prefix the mock generator puts on echoed prompt tokens.
pub const PROMPT_TAG: &str = "\u{27e8}prompt\u{27e9}";

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error("prompt template must contain {placeholder} exactly once (found {found})")]
    Template { placeholder: &'static str, found: usize },
    #[error("paper `{paper_id}` has an empty {field}")]
    EmptyField { paper_id: String, field: &'static str },
    #[error("backend failure for paper `{paper_id}` (retryable: {retryable}): {message}")]
    Backend {
        paper_id: String,
        retryable: bool,
        message: String,
    },
    #[error("backend produced no tokens for paper `{paper_id}`")]
    EmptyGeneration { paper_id: String },
    #[error("backend text does not match its tokens for paper `{paper_id}`")]
    Detokenization { paper_id: String },
    #[error("summary cache {path}: line {line}: {message}")]
    Cache { path: PathBuf, line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl SummarizeError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Backend { retryable: true, .. })
    }
}

pub type Result<T, E = SummarizeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    InstructionTuned,
    BaseCompletion,
}

impl PromptVariant {
    pub fn default_template(self) -> &'static str {
        match self {
            Self::InstructionTuned => INSTRUCTION_TEMPLATE,
            Self::BaseCompletion => BASE_COMPLETION_TEMPLATE,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawPromptConfig {
    variant: PromptVariant,
    #[serde(default)]
    template: Option<String>,
    #[serde(default = "default_sentences")]
    target_sentences: usize,
}

fn default_sentences() -> usize {
    DEFAULT_TARGET_SENTENCES
}

/// Template plus target sentence count. The count is passed to backends as a
/// hint and is never enforced by truncation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPromptConfig")]
pub struct PromptConfig {
    variant: PromptVariant,
    template: String,
    target_sentences: usize,
}

impl TryFrom<RawPromptConfig> for PromptConfig {
    type Error = SummarizeError;

    fn try_from(raw: RawPromptConfig) -> Result<Self> {
        let template = raw.template.unwrap_or_else(|| raw.variant.default_template().to_owned());
        let mut config = Self::new(raw.variant, template)?;
        config.target_sentences = raw.target_sentences;
        Ok(config)
    }
}

impl PromptConfig {
    pub fn new(variant: PromptVariant, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        for placeholder in [TITLE_PLACEHOLDER, ABSTRACT_PLACEHOLDER] {
            let found = template.matches(placeholder).count();
            if found != 1 {
                return Err(SummarizeError::Template { placeholder, found });
            }
        }
        Ok(Self { variant, template, target_sentences: DEFAULT_TARGET_SENTENCES })
    }

    pub fn instruction_tuned() -> Self {
        Self::new(PromptVariant::InstructionTuned, INSTRUCTION_TEMPLATE).expect("valid default template")
    }

    pub fn base_completion() -> Self {
        Self::new(PromptVariant::BaseCompletion, BASE_COMPLETION_TEMPLATE).expect("valid default template")
    }

    pub fn with_target_sentences(mut self, n: usize) -> Self {
        self.target_sentences = n;
        self
    }

    pub fn variant(&self) -> PromptVariant {
        self.variant
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn target_sentences(&self) -> usize {
        self.target_sentences
    }
}

/// Substitutes title and abstract in one pass; substituted text is never
/// re-scanned for placeholders.
pub fn render_prompt(paper: &PaperRecord, config: &PromptConfig) -> Result<String> {
    for (field, value) in [("title", &paper.title), ("abstract", &paper.abstract_text)] {
        if value.trim().is_empty() {
            return Err(SummarizeError::EmptyField { paper_id: paper.paper_id.clone(), field });
        }
    }
    let tpl = config.template.as_str();
    let t = tpl.find(TITLE_PLACEHOLDER).expect("validated");
    let a = tpl.find(ABSTRACT_PLACEHOLDER).expect("validated");
    let mut slots = [(t, TITLE_PLACEHOLDER, paper.title.as_str()), (a, ABSTRACT_PLACEHOLDER, paper.abstract_text.as_str())];
    slots.sort_by_key(|s| s.0);

    let mut out = String::with_capacity(tpl.len() + paper.title.len() + paper.abstract_text.len());
    let mut cursor = 0;
    for (pos, placeholder, value) in slots {
        out.push_str(&tpl[cursor..pos]);
        out.push_str(value);
        cursor = pos + placeholder.len();
    }
    out.push_str(&tpl[cursor..]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub seed: u64,
    pub max_tokens: usize,
}

/// Raw backend output. When `prompt_tokens > 0` the first that many entries
/// of `tokens` echo the prompt and are stripped by [`generate_summary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<String>,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct BackendError {
    pub retryable: bool,
    pub message: String,
}

impl BackendError {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self { retryable: true, message: message.into() }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { retryable: false, message: message.into() }
    }
}

/// A text generator. In deterministic mode identical `(prompt, seed)` pairs
/// must yield identical tokens.
pub trait GenerationBackend: Send + Sync {
    fn backend_id(&self) -> &str;
    fn deterministic(&self) -> bool;
    /// Upper bound on in-flight requests the backend accepts.
    fn max_concurrency(&self) -> usize {
        1
    }
    fn generate(&self, request: &GenerationRequest) -> std::result::Result<Generation, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub paper_id: String,
    pub backend_id: String,
    pub seed: u64,
    pub prompt_text: String,
    pub summary_text: String,
    /// Generated tokens only; concatenating them yields `summary_text`.
    pub summary_tokens: Vec<String>,
}

impl SummaryRecord {
    pub fn key(&self) -> CacheKey {
        CacheKey { paper_id: self.paper_id.clone(), backend_id: self.backend_id.clone(), seed: self.seed }
    }
}

pub fn generate_summary(
    backend: &dyn GenerationBackend,
    paper_id: &str,
    prompt: &str,
    seed: u64,
    max_tokens: usize,
) -> Result<SummaryRecord> {
    let request = GenerationRequest { prompt: prompt.to_owned(), seed, max_tokens };
    let generation = backend.generate(&request).map_err(|e| SummarizeError::Backend {
        paper_id: paper_id.to_owned(),
        retryable: e.retryable,
        message: e.message,
    })?;
    let echoed = generation.prompt_tokens.min(generation.tokens.len());
    let tokens: Vec<String> = generation.tokens.into_iter().skip(echoed).collect();
    if tokens.is_empty() || tokens.iter().all(|t| t.trim().is_empty()) {
        return Err(SummarizeError::EmptyGeneration { paper_id: paper_id.to_owned() });
    }
    let summary_text = tokens.concat();
    if echoed == 0 && !generation.text.is_empty() && generation.text.trim() != summary_text.trim() {
        return Err(SummarizeError::Detokenization { paper_id: paper_id.to_owned() });
    }
    Ok(SummaryRecord {
        paper_id: paper_id.to_owned(),
        backend_id: backend.backend_id().to_owned(),
        seed,
        prompt_text: prompt.to_owned(),
        summary_text,
        summary_tokens: tokens,
    })
}

/// Deterministic generator for tests and dry runs. Each sentence is a
/// seeded draw of words from the prompt, so content words in an abstract
/// tend to reappear in its summary.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    id: String,
    echo_prompt: bool,
    sentences: usize,
    words_per_sentence: (usize, usize),
    max_concurrency: usize,
}

impl MockGenerator {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            echo_prompt: false,
            sentences: DEFAULT_TARGET_SENTENCES,
            words_per_sentence: (6, 10),
            max_concurrency: 8,
        }
    }

    /// Prefix responses with tagged prompt tokens, as a completion server would.
    pub fn echoing_prompt(mut self, echo: bool) -> Self {
        self.echo_prompt = echo;
        self
    }

    pub fn with_sentences(mut self, sentences: usize) -> Self {
        self.sentences = sentences.max(1);
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }
}

/// Lowercased alphanumeric words of `text`.
pub fn content_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub(crate) fn seeded_rng(parts: &[&[u8]], seed: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.update(seed.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

impl GenerationBackend for MockGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn generate(&self, request: &GenerationRequest) -> std::result::Result<Generation, BackendError> {
        let vocab = content_words(&request.prompt);
        if vocab.is_empty() {
            return Err(BackendError::fatal("prompt has no words"));
        }
        let mut rng = seeded_rng(&[request.prompt.as_bytes()], request.seed);
        let mut tokens = Vec::new();
        'outer: for _ in 0..self.sentences {
            let len = rng.random_range(self.words_per_sentence.0..=self.words_per_sentence.1);
            for _ in 0..len {
                if tokens.len() >= request.max_tokens {
                    break 'outer;
                }
                let word = &vocab[rng.random_range(0..vocab.len())];
                tokens.push(if tokens.is_empty() { word.clone() } else { format!(" {word}") });
            }
            if tokens.len() >= request.max_tokens {
                break;
            }
            tokens.push(".".to_owned());
        }
        let text = tokens.concat();
        if self.echo_prompt {
            let mut echoed: Vec<String> = request.prompt.split_whitespace().map(|w| format!("{PROMPT_TAG}{w}")).collect();
            let prompt_tokens = echoed.len();
            echoed.extend(tokens);
            return Ok(Generation { tokens: echoed, text: String::new(), prompt_tokens });
        }
        Ok(Generation { tokens, text, prompt_tokens: 0 })
    }
}

/// Out-of-process backend: POSTs `{"prompt","seed","max_tokens"}` and expects
/// `{"tokens": [...], "text": ...}` back.
#[derive(Debug, Clone)]
pub struct HttpGenerationBackend {
    id: String,
    url: String,
    deterministic: bool,
    max_concurrency: usize,
    client: reqwest::blocking::Client,
}

impl HttpGenerationBackend {
    pub fn new(id: impl Into<String>, url: impl Into<String>, timeout: Duration) -> std::result::Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::fatal(e.to_string()))?;
        Ok(Self { id: id.into(), url: url.into(), deterministic: true, max_concurrency: 1, client })
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }

    pub fn with_deterministic(mut self, deterministic: bool) -> Self {
        self.deterministic = deterministic;
        self
    }
}

impl GenerationBackend for HttpGenerationBackend {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }

    fn generate(&self, request: &GenerationRequest) -> std::result::Result<Generation, BackendError> {
        let response = self
            .client
            .post(&self.url)
            .json(request)
            .send()
            .map_err(|e| BackendError::retryable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let message = format!("{} returned {status}", self.url);
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                BackendError::retryable(message)
            } else {
                BackendError::fatal(message)
            });
        }
        response.json::<Generation>().map_err(|e| BackendError::fatal(format!("bad response body: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub paper_id: String,
    pub backend_id: String,
    pub seed: u64,
}

/// JSON Lines cache of summaries keyed by `(paper_id, backend_id, seed)`.
#[derive(Debug)]
pub struct SummaryCache {
    path: Option<PathBuf>,
    records: BTreeMap<CacheKey, SummaryRecord>,
}

impl SummaryCache {
    pub fn in_memory() -> Self {
        Self { path: None, records: BTreeMap::new() }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = BTreeMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: SummaryRecord = serde_json::from_str(&line).map_err(|e| SummarizeError::Cache {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                records.insert(record.key(), record);
            }
        }
        Ok(Self { path: Some(path), records })
    }

    pub fn get(&self, key: &CacheKey) -> Option<&SummaryRecord> {
        self.records.get(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn insert_all(&mut self, new: Vec<SummaryRecord>) -> Result<()> {
        if new.is_empty() {
            return Ok(());
        }
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            for record in &new {
                let line = serde_json::to_string(record).expect("summary serializes");
                writeln!(file, "{line}")?;
            }
            file.sync_all()?;
        }
        for record in new {
            self.records.insert(record.key(), record);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

#[derive(Debug, Clone)]
pub struct SummarizeOptions {
    pub seed: u64,
    pub max_tokens: usize,
    pub max_retries: usize,
}

impl Default for SummarizeOptions {
    fn default() -> Self {
        Self { seed: 0, max_tokens: 256, max_retries: 2 }
    }
}

/// Summarizes every paper, reusing cached records and never exceeding the
/// backend's declared concurrency. Output is keyed by `paper_id`.
pub fn summarize_papers(
    backend: &dyn GenerationBackend,
    papers: &[&PaperRecord],
    prompt: &PromptConfig,
    options: &SummarizeOptions,
    cache: &mut SummaryCache,
) -> Result<(BTreeMap<String, SummaryRecord>, CacheStats)> {
    let mut out = BTreeMap::new();
    let mut todo = Vec::new();
    for paper in papers {
        let prompt_text = render_prompt(paper, prompt)?;
        let key = CacheKey {
            paper_id: paper.paper_id.clone(),
            backend_id: backend.backend_id().to_owned(),
            seed: options.seed,
        };
        // A cached record only counts when it was generated from the same prompt.
        match cache.get(&key).filter(|r| r.prompt_text == prompt_text) {
            Some(record) => {
                out.insert(paper.paper_id.clone(), record.clone());
            }
            None => todo.push((*paper, prompt_text)),
        }
    }
    let stats = CacheStats { hits: out.len(), misses: todo.len() };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(backend.max_concurrency().max(1))
        .build()
        .expect("thread pool");
    let generated: Vec<Result<SummaryRecord>> = pool.install(|| {
        todo.par_iter()
            .map(|(paper, prompt_text)| {
                let mut attempt = 0;
                loop {
                    match generate_summary(backend, &paper.paper_id, prompt_text, options.seed, options.max_tokens) {
                        Err(e) if e.is_retryable() && attempt < options.max_retries => attempt += 1,
                        other => return other,
                    }
                }
            })
            .collect()
    });
    let generated: Vec<SummaryRecord> = generated.into_iter().collect::<Result<_>>()?;
    for record in &generated {
        out.insert(record.paper_id.clone(), record.clone());
    }
    cache.insert_all(generated)?;
    Ok((out, stats))
}

//! Synthetic corpora with a planted quality signal.
//!
//! Each paper draws a hidden quality score in `[0, 1)`. Its five-year
//! citation count tracks that score (plus a jitter of at most two), and
//! papers above the median weave trigger words into their abstracts. A
//! mock SAE with a feature planted on those trigger words should then
//! recover the citation task exactly.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{PaperRecord, VenueMetrics};

const FILLER: &[&str] = &[
    "analysis", "approach", "framework", "model", "data", "results", "method", "study", "system", "design",
    "evaluation", "performance", "network", "learning", "algorithm", "structure", "process", "theory",
    "experiment", "measurement", "application", "problem", "solution", "technique", "signal", "control",
    "dynamics", "survey", "review", "protocol", "sensor", "energy", "material", "surface", "sample",
    "population", "clinical", "patient", "protein", "cell", "market", "policy", "software", "hardware",
    "graph", "language", "image", "video", "security", "privacy", "cloud", "mobile", "optical", "thermal",
    "chemical", "quantum", "statistical", "numerical", "empirical", "robust", "efficient", "scalable",
    "we", "propose", "present", "show", "compare", "describe", "investigate", "report", "the", "of", "and",
    "in", "for", "with", "on", "a", "to", "this", "paper",
];

pub const DEFAULT_TRIGGERS: &[&str] = &["breakthrough", "pioneering", "landmark"];

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub papers: Vec<PaperRecord>,
    pub venues: Vec<VenueMetrics>,
    /// Hidden quality per paper, in paper order.
    pub quality: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub papers: usize,
    pub venues: usize,
    pub seed: u64,
    pub trigger_words: BTreeSet<String>,
    /// Fraction of abstract words replaced by triggers in high-quality papers.
    pub trigger_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            papers: 200,
            venues: 20,
            seed: 0,
            trigger_words: DEFAULT_TRIGGERS.iter().map(|s| s.to_string()).collect(),
            trigger_rate: 0.5,
        }
    }
}

impl SyntheticCorpus {
    pub fn generate(spec: &SyntheticSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let triggers: Vec<&str> = spec.trigger_words.iter().map(String::as_str).collect();
        let venues: Vec<VenueMetrics> = (0..spec.venues.max(1))
            .map(|i| VenueMetrics {
                venue_id: format!("venue-{i:03}"),
                sjr: Some(rng.random_range(0.1..8.0)),
                h_index: Some(rng.random_range(1..300)),
            })
            .collect();

        let quality: Vec<f64> = (0..spec.papers).map(|_| rng.random::<f64>()).collect();
        let mut sorted = quality.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.5);

        let papers = quality
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let words = |rng: &mut ChaCha8Rng, n: usize, planted: bool| -> Vec<&str> {
                    (0..n)
                        .map(|_| {
                            if planted && rng.random_bool(spec.trigger_rate) {
                                *triggers.choose(rng).expect("trigger words")
                            } else {
                                *FILLER.choose(rng).expect("filler")
                            }
                        })
                        .collect()
                };
                let high = q >= median && !triggers.is_empty();
                let title_len = rng.random_range(4..9);
                let title = words(&mut rng, title_len, false).join(" ");
                let abstract_len = rng.random_range(40..61);
                let abstract_text = format!("{}.", words(&mut rng, abstract_len, high).join(" "));
                PaperRecord {
                    paper_id: format!("paper-{i:05}"),
                    title: capitalize(&title),
                    abstract_text: capitalize(&abstract_text),
                    citation_count_5y: (q * 1000.0).floor() as u64 + i as u64 % 3,
                    venue_id: venues[rng.random_range(0..venues.len())].venue_id.clone(),
                }
            })
            .collect();
        Self { papers, venues, quality }
    }

    pub fn papers_jsonl(&self) -> String {
        self.papers.iter().map(|p| serde_json::to_string(p).expect("serializes") + "\n").collect()
    }

    pub fn venues_jsonl(&self) -> String {
        self.venues.iter().map(|v| serde_json::to_string(v).expect("serializes") + "\n").collect()
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

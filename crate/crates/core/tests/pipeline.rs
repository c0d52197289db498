use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use monoprobe_core::featurize::PlantedFeature;
use monoprobe_core::interpret::Sign;
use monoprobe_core::pipeline::{Pipeline, PipelineError, RunConfig, SaeKind, SaeSpec, Stage};
use monoprobe_core::synthetic::{SyntheticCorpus, SyntheticSpec, DEFAULT_TRIGGERS};

const PLANTED: usize = 42;

fn planted_sae() -> SaeSpec {
    SaeSpec {
        kind: SaeKind::Mock,
        model_id: Some("mock-lm".into()),
        layer_index: Some(20),
        feature_count: Some(256),
        sae_id: Some("mock-lm/layer_20/width_256".into()),
        seed: None,
        active_per_token: Some(4),
        planted: vec![PlantedFeature {
            feature_index: PLANTED,
            trigger_words: DEFAULT_TRIGGERS.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
            strength: 1.0,
        }],
        weights: None,
        embedding_seed: None,
    }
}

fn write_corpus(dir: &Path, seed: u64) -> RunConfig {
    let synth = SyntheticCorpus::generate(&SyntheticSpec { seed, ..Default::default() });
    fs::write(dir.join("papers.jsonl"), synth.papers_jsonl()).unwrap();
    fs::write(dir.join("venues.jsonl"), synth.venues_jsonl()).unwrap();
    let mut cfg = RunConfig::mock(dir.join("papers.jsonl"), dir.join("venues.jsonl"), dir.join("out"), seed, planted_sae());
    cfg.tasks = vec![monoprobe_core::corpus::QualityMetric::CitationCount];
    cfg
}

#[test]
fn planted_feature_recovered_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_corpus(dir.path(), 3);
    let outcome = Pipeline::new(cfg).unwrap().run().unwrap();
    let bundle = outcome.bundle.unwrap();
    let task = bundle.report.task("citation_count").unwrap();
    let setting = &task.settings[0];
    let top = &setting.findings[0];
    assert_eq!(top.feature_index, PLANTED);
    assert_eq!(top.importance, 1.0);
    assert_eq!(top.sign, Sign::Positive);
    assert!(setting.accuracy >= 0.95, "{}", setting.accuracy);
}

#[test]
fn rerun_hits_every_cache_and_reproduces_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_corpus(dir.path(), 5);
    let pipeline = Pipeline::new(cfg.clone()).unwrap();
    let first = pipeline.run().unwrap();
    let report_md = fs::read_to_string(cfg.report_dir().join("report.md")).unwrap();
    let second = pipeline.run().unwrap();
    let s = &second.stats;
    assert_eq!(s.task_cache.misses, 0);
    assert!(s.summaries.values().all(|c| c.misses == 0 && c.hits > 0));
    assert!(s.features.values().all(|c| c.misses == 0 && c.hits > 0));
    assert_eq!(s.tree_cache.misses, 0);
    assert_eq!(s.leaf_budget_cache.misses, 0);
    assert_eq!(first.bundle.unwrap().files, second.bundle.unwrap().files);
    assert_eq!(fs::read_to_string(cfg.report_dir().join("report.md")).unwrap(), report_md);
}

#[test]
fn run_until_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_corpus(dir.path(), 1);
    let outcome = Pipeline::new(cfg.clone()).unwrap().run_until(Stage::Bin).unwrap();
    assert_eq!(outcome.completed, vec![Stage::Ingest, Stage::Bin]);
    assert!(cfg.tasks_dir().join("citation_count.json").exists());
    assert!(!cfg.report_dir().exists());
}

#[test]
fn stage_errors_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = write_corpus(dir.path(), 1);
    cfg.papers = dir.path().join("missing.jsonl");
    let err = Pipeline::new(cfg).unwrap().run().unwrap_err();
    assert!(matches!(err, PipelineError::Stage { stage: Stage::Ingest, .. }), "{err}");
    assert!(err.to_string().starts_with("ingest stage failed"));
}

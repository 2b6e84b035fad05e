mod common;

use std::path::Path;
use std::sync::Arc;

use common::*;
use serde_json::json;
use vtprompt_core::cassette::CassetteMode;
use vtprompt_core::concepts::build_extraction_prompt;
use vtprompt_core::model_client::ChatRequest;
use vtprompt_core::pipeline::{
    read_records_for_resume, run_ablation, run_eval, score_run, AblationAxes, PipelineError, RunConfig, RunMode,
    RunOptions, ANNOTATED_DIR, MANIFEST_FILE, RECORDS_FILE,
};
use vtprompt_core::render::VPromptStyle;
use vtprompt_core::tprompt::PromptStrategy;
use vtprompt_core::transport::RetryPolicy;

const CONFIG: &str = r#"manifest = "manifest.jsonl"
output_dir = "runs"
cache_dir = "cache"
cassette_dir = "cassettes"
cassette_mode = "replay"
max_concurrency = 2
detector_kind = "conditional_segment"
style = "type_c"
strategy = "tprompt"

[text_backend]
id = "fixture-text"
endpoint = "http://127.0.0.1:9/text/v1/chat/completions"
model = "gpt-4"

[vision_backend]
id = "fixture-vision"
endpoint = "http://127.0.0.1:9/vision/v1/chat/completions"
model = "gpt-4-vision-preview"

[detector]
id = "fixture-detector"
endpoint = "http://127.0.0.1:9/detect"
"#;

fn manifest_lines() -> Vec<serde_json::Value> {
    vec![
        json!({"id": "mme-count-yard-1", "image_path": "images/yard.png", "question": SCRIPT[0].0,
               "ground_truth": "yes", "task": {"bench": "mme", "name": "count"}, "image_group_id": "yard"}),
        json!({"id": "mme-count-yard-2", "image_path": "images/yard.png", "question": SCRIPT[1].0,
               "ground_truth": "no", "task": {"bench": "mme", "name": "count"}, "image_group_id": "yard"}),
        json!({"id": "mmb-loc-room", "image_path": "images/room.png", "question": SCRIPT[2].0,
               "options": [["A", "top left"], ["B", "bottom right"]],
               "ground_truth": "A", "task": {"bench": "mmb", "name": "object_localization"}, "image_group_id": "room"}),
        json!({"id": "mmb-loc-park", "image_path": "images/park.png", "question": SCRIPT[3].0,
               "options": [["A", "center"], ["B", "top right"]],
               "ground_truth": "B", "task": {"bench": "mmb", "name": "object_localization"}, "image_group_id": "park"}),
        json!({"id": "pope-random-street-dog", "image_path": "images/street.png", "question": SCRIPT[4].0,
               "ground_truth": "yes", "task": {"bench": "pope", "setting": "random"}, "image_group_id": "street"}),
    ]
}

/// Rebuild the committed fixture from the scripted backends.
/// Run with `cargo test -p vtprompt-core --test e2e -- --ignored`.
#[test]
#[ignore]
fn regenerate_e2e_fixture() {
    let dir = fixture_dir();
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(dir.join("images")).unwrap();
    for (i, name) in ["yard", "room", "park", "street"].iter().enumerate() {
        synth_image(i as u8 * 37).save(dir.join(format!("images/{name}.png"))).unwrap();
    }
    let manifest: String = manifest_lines().iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.join("manifest.jsonl"), manifest).unwrap();
    std::fs::write(dir.join("config.toml"), CONFIG).unwrap();

    let mut cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
    cfg.cassette_mode = CassetteMode::Record;
    let scratch = tempfile::tempdir().unwrap();
    cfg.output_dir = scratch.path().join("runs");
    cfg.cache_dir = scratch.path().join("cache");
    let backends = Arc::new(FixtureBackends::default());
    let opts = RunOptions {
        transport: Some(backends.clone()),
        ..Default::default()
    };
    run_eval(&cfg, &opts).unwrap();
    // Baseline, strategy and style variants are recorded too so the
    // ablation tests replay offline.
    run_eval(&RunConfig { mode: RunMode::Baseline, ..cfg.clone() }, &opts).unwrap();
    for strategy in PromptStrategy::ALL {
        run_eval(&RunConfig { strategy, ..cfg.clone() }, &opts).unwrap();
    }
    for (_, style) in VPromptStyle::PRESETS {
        run_eval(&RunConfig { style, ..cfg.clone() }, &opts).unwrap();
    }
    assert!(backends.calls() > 0);
}

fn offline() -> (Arc<OfflineTransport>, RunOptions) {
    let t = Arc::new(OfflineTransport::default());
    let opts = RunOptions {
        transport: Some(t.clone()),
        retry: Some(RetryPolicy::immediate(1)),
        ..Default::default()
    };
    (t, opts)
}

fn records_bytes(run_dir: &Path) -> Vec<u8> {
    std::fs::read(run_dir.join(RECORDS_FILE)).unwrap()
}

#[test]
fn replay_produces_five_records_offline() {
    let (_tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (net, opts) = offline();
    let summary = run_eval(&cfg, &opts).unwrap();
    let manifest = summary.manifest.expect("complete run");
    assert_eq!(manifest.records, 5);
    assert_eq!(manifest.failed, 0, "{}", String::from_utf8_lossy(&records_bytes(&summary.run_dir)));
    assert_eq!(net.calls(), 0);
    assert!(summary.run_dir.join(MANIFEST_FILE).exists());
    let annotated = std::fs::read_dir(summary.run_dir.join(ANNOTATED_DIR)).unwrap().count();
    assert_eq!(annotated, 10, "png + sidecar per instance");
}

#[test]
fn rerun_into_fresh_output_hits_every_cache() {
    let (tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (_, opts) = offline();
    let first = run_eval(&cfg, &opts).unwrap();
    let again = RunConfig {
        output_dir: tmp.path().join("runs2"),
        ..cfg
    };
    let second = run_eval(&again, &opts).unwrap();
    let stages = second.manifest.unwrap().stages;
    for (stage, hm) in &stages {
        assert_eq!(hm.misses, 0, "stage {stage} missed on rerun");
        assert!(hm.hits > 0, "stage {stage} never consulted");
    }
    assert_eq!(records_bytes(&first.run_dir), records_bytes(&second.run_dir));
}

#[test]
fn rerun_over_complete_run_is_a_no_op() {
    let (_tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (_, opts) = offline();
    let first = run_eval(&cfg, &opts).unwrap();
    let bytes = records_bytes(&first.run_dir);
    let second = run_eval(&cfg, &opts).unwrap();
    assert_eq!(second.written, 0);
    assert_eq!(second.resumed, 5);
    assert_eq!(records_bytes(&second.run_dir), bytes);
}

#[test]
fn cassette_miss_fails_only_that_instance() {
    let (tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    // Remove the concept extraction recording for the third instance.
    let prompt = build_extraction_prompt(SCRIPT[2].0).unwrap();
    let fp = ChatRequest::text(cfg.text_backend.model.clone(), prompt.text).fingerprint();
    let cassette = tmp.path().join("cassettes/fixture-text").join(format!("{fp}.json"));
    std::fs::remove_file(&cassette).expect("fixture has the recording");

    let (_, opts) = offline();
    let summary = run_eval(&cfg, &opts).unwrap();
    let records = read_records_for_resume(&summary.run_dir.join(RECORDS_FILE)).unwrap();
    assert_eq!(records.len(), 5);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.failure.is_some(), i == 2, "record {i}: {:?}", r.failure);
    }
    let f = records[2].failure.as_ref().unwrap();
    assert_eq!(f.stage, "concepts");
    assert!(f.message.contains("no cassette entry"), "{}", f.message);
}

#[test]
fn score_matches_hand_computed_values() {
    let (_tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (_, opts) = offline();
    let run = run_eval(&cfg, &opts).unwrap().run_dir;
    let report = score_run(&run, None, None).unwrap();
    // MME count: one of two right, the image pair not fully right.
    let mme = report.mme.as_ref().unwrap();
    assert_eq!(mme.subtasks["count"].acc, 50.0);
    assert_eq!(mme.subtasks["count"].acc_plus, 0.0);
    assert_eq!(mme.total, 50.0);
    // MMB object localization: one of two right.
    let mmb = report.mmb.as_ref().unwrap();
    assert_eq!(mmb.overall, 50.0);
    assert_eq!(mmb.abilities["object_localization"], 50.0);
    // POPE random: a single true positive.
    let pope = &report.pope[&vtprompt_core::PopeSetting::Random];
    assert_eq!(pope.accuracy, 100.0);
    assert_eq!(pope.f1.value(), Some(100.0));
    for f in ["metrics.json", "metrics.md", "metrics.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let same = score_run(&run, Some(&run), None).unwrap();
    assert!(same.deltas.values().all(|&d| d == 0.0));
    assert!(!same.deltas.is_empty());
}

#[test]
fn score_without_records_is_manifest_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(
        score_run(tmp.path(), None, None),
        Err(PipelineError::Manifest(_))
    ));
}

#[test]
fn baseline_mode_sends_original_image() {
    let (_tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig {
        mode: RunMode::Baseline,
        ..RunConfig::load(&cfg_path).unwrap()
    };
    let (net, opts) = offline();
    let summary = run_eval(&cfg, &opts).unwrap();
    assert_eq!(net.calls(), 0);
    let records = read_records_for_resume(&summary.run_dir.join(RECORDS_FILE)).unwrap();
    assert!(records.iter().all(|r| r.failure.is_none()));
    assert!(records.iter().all(|r| r.stage_artifacts.detections.is_none()));
    assert_eq!(std::fs::read_dir(summary.run_dir.join(ANNOTATED_DIR)).unwrap().count(), 0);
}

#[test]
fn strategy_ablation_computes_detection_once() {
    let (_tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (_, opts) = offline();
    let axes = AblationAxes {
        strategies: PromptStrategy::ALL.to_vec(),
        ..Default::default()
    };
    let result = run_ablation(&cfg, &axes, &opts).unwrap();
    assert_eq!(result.cells.len(), 4);
    let (mut misses, mut hits) = (0, 0);
    for c in &result.cells {
        assert!(c.error.is_none(), "{:?}", c.error);
        let m = vtprompt_core::RunManifest::load(c.run_dir.as_ref().unwrap()).unwrap();
        misses += m.stages["detections"].misses;
        hits += m.stages["detections"].hits;
    }
    // Every instance has its own (image, concepts) pair: computed in the
    // first cell, reused by the other three.
    assert_eq!(misses, 5);
    assert_eq!(hits, 15);
    assert!(result.markdown.contains("+ TP"));
    assert!(result.markdown.contains("+ ZS CoT"));
}

#[test]
fn style_ablation_has_table_shape_and_isolates_bad_cells() {
    let (_tmp, cfg_path) = scratch_fixture();
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (_, opts) = offline();
    let axes = AblationAxes {
        styles: VPromptStyle::PRESETS.iter().map(|(_, s)| *s).collect(),
        ..Default::default()
    };
    let result = run_ablation(&cfg, &axes, &opts).unwrap();
    assert_eq!(result.cells.len(), 5);
    assert!(result.cells.iter().all(|c| c.error.is_none()));
    assert!(result.markdown.starts_with("| Type | Number | Box | Mask |"));
    for t in ["Type a", "Type b", "Type c", "Type d", "Type e"] {
        assert!(result.markdown.contains(t), "{t}");
    }

    // A mask style on a box-only detector is rejected for that cell alone.
    let boxes_only = RunConfig {
        detector_kind: vtprompt_core::DetectorKind::GroundingBox,
        style: VPromptStyle::TYPE_A,
        ..cfg
    };
    let result = run_ablation(&boxes_only, &axes, &opts).unwrap();
    let failed: Vec<_> = result.cells.iter().filter(|c| c.error.is_some()).collect();
    assert_eq!(failed.len(), 4);
    assert!(result.cells[0].error.is_none());
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/e2e")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let dest = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &dest);
        } else {
            std::fs::copy(entry.path(), dest).unwrap();
        }
    }
}

fn scratch() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    copy_dir(&fixture_dir(), tmp.path());
    tmp
}

fn vtprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtprompt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn only_run_dir(runs: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn run_replay_is_offline_and_deterministic() {
    let (a, b) = (scratch(), scratch());
    let mut records = Vec::new();
    for tmp in [&a, &b] {
        let cfg = tmp.path().join("config.toml");
        let text = stdout(&vtprompt(&["run", "--config", cfg.to_str().unwrap(), "--replay"]));
        assert!(text.contains("records 5 (failed 0)"), "{text}");
        assert!(text.contains("network calls 0"), "{text}");
        let run = only_run_dir(&tmp.path().join("runs"));
        records.push(std::fs::read(run.join("records.jsonl")).unwrap());
    }
    assert_eq!(records[0], records[1]);
}

#[test]
fn run_with_sample_evaluates_subset() {
    let tmp = scratch();
    let cfg = tmp.path().join("config.toml");
    let text = stdout(&vtprompt(&[
        "run", "--config", cfg.to_str().unwrap(), "--replay", "--sample", "2", "--seed", "7",
    ]));
    assert!(text.contains("records 2"), "{text}");
}

#[test]
fn score_prints_metrics_and_deltas() {
    let tmp = scratch();
    let cfg = tmp.path().join("config.toml");
    stdout(&vtprompt(&["run", "--config", cfg.to_str().unwrap(), "--replay"]));
    let run = only_run_dir(&tmp.path().join("runs"));
    let run = run.to_str().unwrap();
    let text = stdout(&vtprompt(&["score", "--run", run, "--baseline", run]));
    assert!(text.contains("50.00(+0.00)"), "{text}");
    assert!(Path::new(run).join("metrics.json").is_file());
    assert!(Path::new(run).join("metrics.csv").is_file());
}

#[test]
fn score_missing_run_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = vtprompt(&["score", "--run", tmp.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("records.jsonl"));
}

#[test]
fn report_emits_csv() {
    let tmp = scratch();
    let cfg = tmp.path().join("config.toml");
    stdout(&vtprompt(&["run", "--config", cfg.to_str().unwrap(), "--replay"]));
    let run = only_run_dir(&tmp.path().join("runs"));
    let text = stdout(&vtprompt(&["report", "--runs", run.to_str().unwrap(), "--format", "csv"]));
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("metric,"), "{header}");
    assert!(text.lines().any(|l| l.starts_with("mme.total,50.00")), "{text}");
}

#[test]
fn ablate_over_strategies_prints_table() {
    let tmp = scratch();
    let cfg = tmp.path().join("config.toml");
    let text = stdout(&vtprompt(&[
        "ablate", "--config", cfg.to_str().unwrap(), "--replay", "--strategies", "plain,tprompt",
    ]));
    assert!(text.starts_with('|'), "{text}");
    assert_eq!(
        std::fs::read_dir(tmp.path().join("runs")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count(),
        2
    );
}

#[test]
fn unknown_style_is_rejected_by_argument_parser() {
    let out = vtprompt(&["ablate", "--config", "x.toml", "--styles", "type_z"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("type_z"));
}

#[test]
fn invalid_config_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "manifest = \"m.jsonl\"\nmax_concurrency = 0\n").unwrap();
    let out = vtprompt(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn pope_queries_are_balanced_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = tmp.path().join("ann.jsonl");
    let lines: Vec<String> = (0..6)
        .map(|i| {
            let objs = ["dog", "cat", "car", "tree", "bench", "kite", "cup"];
            let present: Vec<&str> = objs.iter().copied().cycle().skip(i).take(3).collect();
            serde_json::json!({"image_id": format!("img{i}"), "objects": present}).to_string()
        })
        .collect();
    std::fs::write(&ann, lines.join("\n")).unwrap();
    let out_path = tmp.path().join("q.jsonl");
    stdout(&vtprompt(&[
        "pope-queries",
        "--annotations",
        ann.to_str().unwrap(),
        "--setting",
        "adversarial",
        "--per-image",
        "2",
        "--out",
        out_path.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(out_path).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 24);
    assert_eq!(rows.iter().filter(|r| r["answer"] == "yes").count(), 12);
    assert!(rows[0]["question"].as_str().unwrap().contains(rows[0]["object"].as_str().unwrap()));
    assert_eq!(rows[0]["setting"], "adversarial");
}

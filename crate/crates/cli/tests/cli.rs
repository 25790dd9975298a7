use std::process::{Command, Output};

fn dive(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dive")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn help_lists_global_flags_and_commands() {
    let o = dive(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for flag in ["--config", "--offline", "--seed", "--jobs", "--json", "--verbose"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    for cmd in ["score", "bench", "annotate", "curate", "static-gen", "mca-demo", "human-study", "serve-study", "report"] {
        assert!(text.contains(cmd), "missing {cmd}");
    }
    let bench = stdout(&dive(&["bench", "--help"]));
    for flag in ["--manifest", "--out", "--cache"] {
        assert!(bench.contains(flag), "bench missing {flag}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(dive(&["bench"]).status.code(), Some(1));
    assert_eq!(dive(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(dive(&["--jobs", "0", "mca-demo"]).status.code(), Some(1));
}

#[test]
fn missing_manifest_exits_two_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent_manifest.json");
    let o = dive(&["--offline", "bench", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent_manifest.json"));
}

#[test]
fn static_gen_then_score_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    let clip = clip.to_str().unwrap();
    assert!(dive(&["static-gen", "--n", "6", "--size", "64", "--format", "ppm", "--out", clip]).status.success());
    let o = dive(&["score", clip]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["dynamics"]["score"], 0.0);
    assert_eq!(v["quality"]["dbq_contrib"], 0.0);
}

#[test]
fn mca_demo_is_reproducible() {
    let a = dive(&["--seed", "5", "mca-demo"]);
    let b = dive(&["--seed", "5", "mca-demo"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn mca_fixture_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("fixture.json");
    let f = f.to_str().unwrap();
    assert!(dive(&["--seed", "2", "mca-demo", "--fixture-out", f]).status.success());
    assert!(dive(&["--seed", "2", "mca-demo", "--fixture-check", f]).status.success());
    assert_eq!(dive(&["--seed", "3", "mca-demo", "--fixture-check", f]).status.code(), Some(3));
}

#[test]
fn human_study_aggregate_takes_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    std::fs::write(
        &cfg,
        r#"{"study_id": "s1", "models": [{"model_id": "a"}, {"model_id": "b"}], "items": ["i1"],
            "dimensions": ["overall"], "n_volunteers_expected": 2}"#,
    )
    .unwrap();
    let store = dir.path().join("study_s1.jsonl");
    std::fs::write(
        &store,
        concat!(
            r#"{"volunteer_id": "v1", "item_id": "i1", "dimension": "overall", "ranking": ["a", "b"]}"#,
            "\n",
            r#"{"volunteer_id": "v2", "item_id": "i1", "dimension": "overall", "ranking": [], "abstain": true}"#,
            "\n"
        ),
    )
    .unwrap();
    let o = dive(&["--json", "human-study", "aggregate", "--store", store.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let m = &v["dimensions"]["overall"]["models"];
    assert_eq!(m["a"]["overall"], 1.0);
    assert_eq!(m["b"]["overall"], 0.5);
}

#[test]
fn bench_then_report_merge() {
    let dir = tempfile::tempdir().unwrap();
    let clip = dir.path().join("clip");
    assert!(dive(&["static-gen", "--n", "4", "--size", "96", "--out", clip.to_str().unwrap()]).status.success());
    let manifest = dir.path().join("m.json");
    std::fs::write(
        &manifest,
        r#"{"model_name": "still", "items": [
            {"item_id": "a", "prompt": "a dog runs", "image_path": "x.png", "video_dir": "clip"},
            {"item_id": "b", "prompt": "a calm lake", "image_path": "x.png", "video_dir": "clip", "degree": 1}]}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = dive(&["--offline", "bench", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report_still.json", "report_still.csv", "leaderboard.md", "degree_cache.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let o = dive(&["report", "merge", out.join("report_still.json").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("| still |"));
}

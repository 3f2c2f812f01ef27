use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn attnprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnprop"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
    })
}

#[test]
fn every_checked_in_config_parses() {
    let mut seen = 0;
    for e in std::fs::read_dir(configs_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let o = attnprop(&["config", "-c", p.to_str().unwrap()]);
            assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}

#[test]
fn overrides_reach_the_effective_config() {
    let o = attnprop(&["config", "--timestep", "81", "--set", "propagation.top_k=9", "--prompt", "null"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("timestep = 81"), "{text}");
    assert!(text.contains("top_k = 9"), "{text}");
    assert!(text.contains("mode = \"null\""), "{text}");
    let bad = attnprop(&["config", "--set", "propagation.top_k=0"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("top_k"));
}

#[test]
fn toy_track_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("masks");
    assert!(attnprop(&["toy", "--out", data.to_str().unwrap(), "--aligned"]).status.success());
    let o = attnprop(&[
        "track",
        "--data",
        data.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--prompt",
        "null",
        "--refinement",
        "none",
        "--set",
        "backend.synthetic.image_height=32",
        "--set",
        "backend.synthetic.image_width=32",
        "--set",
        "backend.synthetic.latent_height=32",
        "--set",
        "backend.synthetic.latent_width=32",
        "--set",
        &format!("run.cache_dir=\"{}\"", dir.path().join("cache").display()),
        "--eval",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!(summary["metrics"]["J_m"], 1.0);
    assert!(out.join("aligned/00002.png").is_file());
    assert!(out.join("run_record.json").is_file());

    let e = attnprop(&["eval", "--data", data.to_str().unwrap(), "--predictions", out.to_str().unwrap()]);
    assert!(e.status.success());
    assert_eq!(stdout_json(&e)["J&F_m"], 1.0);
    assert!(out.join("eval/summary.json").is_file());
}

#[test]
fn missing_inputs_fail_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = attnprop(&["track", "--data", dir.path().join("nothing").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = attnprop(&["track", "-c", "/nonexistent.toml", "--data", "."]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));
}

#[test]
fn partial_sweep_failure_exits_two_and_keeps_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("sweep");
    assert!(attnprop(&["toy", "--out", data.to_str().unwrap()]).status.success());
    // Class and caption prompts have no sidecar text files here.
    let o = attnprop(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--sweep",
        "prompt",
        "--out",
        out.to_str().unwrap(),
        "--refinement",
        "none",
        "--set",
        "optimizer.steps=3",
        "--set",
        format!("run.prompt_store=\"{}\"", dir.path().join("prompts").display()).as_str(),
        "--set",
        format!("run.cache_dir=\"{}\"", dir.path().join("cache").display()).as_str(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout_json(&o);
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let ok: Vec<&str> = rows
        .iter()
        .filter(|r| r["error"].is_null())
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    assert_eq!(ok, ["prompt=null", "prompt=learned"]);
    assert!(out.join("table.csv").is_file());
}

#[test]
fn adapt_writes_one_prompt_per_object() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let store = dir.path().join("prompts");
    assert!(attnprop(&["toy", "--out", data.to_str().unwrap()]).status.success());
    let args = [
        "adapt",
        "--data",
        data.to_str().unwrap(),
        "--set",
        "optimizer.steps=3",
        "--set",
        &format!("run.prompt_store=\"{}\"", store.display()),
        "--set",
        &format!("run.cache_dir=\"{}\"", dir.path().join("cache").display()),
    ];
    let o = attnprop(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["adapted"].as_array().unwrap().len(), 1);
    let again = attnprop(&args);
    assert!(again.status.success());
    let report = stdout_json(&again);
    assert_eq!(report["adapted"].as_array().unwrap().len(), 0);
    assert_eq!(report["skipped"].as_array().unwrap().len(), 1);
}

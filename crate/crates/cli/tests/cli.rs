use std::path::Path;
use std::process::{Command, Output};

fn pearl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pearl")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pearl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = pearl(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

const SMALL: &[&str] = &["--width", "32", "--side", "16"];

#[test]
fn step_by_step_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "ds", "--episodes", "3", "--frames", "12", "--seed", "1"]);
    assert!(d.join("ds").join("labels.csv").exists());

    let out = ok(d, &["mask", "--dataset", "ds", "--source", "flow", "--out", "masks", "--flows", "flow.prlf"]);
    assert!(out.contains("33 flow fields"), "{out}");
    assert!(d.join("masks/episode_2/mask_11.png").exists());

    ok(d, &[&["encode", "--dataset", "ds", "--config", "FI+2x2", "--out", "emb.prle"], SMALL].concat());
    ok(d, &[&["compose", "--dataset", "ds", "--config", "FI+2x2", "--embeddings", "emb.prle", "--out", "reps.prle"], SMALL].concat());
    ok(d, &[&["compose", "--dataset", "ds", "--config", "FI+FM", "--flows", "flow.prlf", "--out", "fm.prle"], SMALL].concat());

    let out = ok(
        d,
        &[
            "finetune", "--dataset", "ds", "--reps", "reps.prle", "--kind", "s-dim", "--hyper", "epochs=1",
            "--hyper", "dim_proj=8", "--out", "head.prlh", "--apply-out", "proj.prle",
        ],
    );
    assert!(out.contains("s-dim head"), "{out}");
    assert!(out.contains("width 40"), "{out}");

    let out = ok(d, &["probe", "--dataset", "ds", "--reps", "reps.prle", "--head", "head.prlh", "--hyper", "max_epochs=3", "--out", "probe.json"]);
    assert_eq!(out.lines().count(), 5, "{out}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("probe.json")).unwrap()).unwrap();
    assert_eq!(report["categories"].as_array().unwrap().len(), 4);
}

#[test]
fn failures_are_stage_labeled() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--out", "ds", "--episodes", "2", "--frames", "6"]);
    ok(d, &[&["encode", "--dataset", "ds", "--config", "FI", "--out", "emb.prle"], SMALL].concat());

    let err = fails(d, &[&["compose", "--dataset", "ds", "--config", "FI+2x2", "--embeddings", "emb.prle", "--out", "r.prle"], SMALL].concat());
    assert!(err.starts_with("error: [compose] missing embedding"), "{err}");

    let err = fails(d, &["probe", "--dataset", "nowhere", "--reps", "r.prle"]);
    assert!(err.starts_with("error: [probe]"), "{err}");

    ok(d, &[&["compose", "--dataset", "ds", "--config", "FI", "--out", "r.prle"], SMALL].concat());
    let err = fails(d, &["finetune", "--dataset", "ds", "--reps", "r.prle", "--kind", "t-dim", "--hyper", "bogus=1", "--out", "h.prlh"]);
    assert!(err.starts_with("error: [finetune]") && err.contains("bogus"), "{err}");

    let err = fails(d, &["mask", "--dataset", "ds", "--source", "sonar"]);
    assert!(err.contains("[mask] ") && err.contains("sonar"), "{err}");

    assert!(!pearl(d, &["finetune", "--kind", "x-dim"]).status.success());
}

#[test]
fn run_report_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let config = r#"
        name = "grid"
        composition = "FI+2x2"
        [dataset]
        label = "Pong"
        [dataset.synth]
        episodes = 3
        frames_per_episode = 12
        [encoder]
        width = 32
        side = 16
        [probe]
        max_epochs = 4
    "#;
    std::fs::write(d.join("grid.toml"), config).unwrap();
    std::fs::write(d.join("fi.toml"), config.replace("\"grid\"", "\"fi\"").replace("FI+2x2", "FI")).unwrap();

    let out = ok(d, &["run", "grid.toml", "fi.toml"]);
    assert_eq!(out.lines().count(), 2, "{out}");
    assert!(d.join("runs/grid/results.json").exists() && d.join("runs/fi/embeddings.prle").exists());

    ok(d, &["run", "fi.toml", "--set", "name=fi-tdim", "--set", "finetune.kind=t-dim", "--set", "finetune.hyper.epochs=1"]);
    assert!(d.join("runs/fi-tdim/head.prlh").exists());

    let out = ok(d, &["report", "runs/fi/results.json", "runs/grid/results.json", "runs/fi-tdim/results.json", "--out", "rep"]);
    assert!(out.starts_with("label,config,"), "{out}");
    assert!(out.contains("Pong,FI/t-dim,"), "{out}");
    assert!(d.join("rep/report.svg").exists());

    let out = ok(d, &["compare", "runs/fi/results.json", "runs/grid/results.json", "--csv", "delta.csv"]);
    assert!(out.contains("sprite0_x"), "{out}");
    assert_eq!(std::fs::read_to_string(d.join("delta.csv")).unwrap().lines().count(), 6);

    let err = fails(d, &["run", "fi.toml", "--set", "composition=FI+9x9"]);
    assert!(err.starts_with("error: [config]"), "{err}");
}

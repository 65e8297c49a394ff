use std::path::Path;

use pearl_core::dataset::{generate_synthetic, save_dataset, SynthSpec};
use pearl_core::finetune::read_head;
use pearl_core::harness::{
    compare_runs, load_results, render_report, run_experiment, sha256_hex, ExperimentConfig, ReferenceBar,
    RESULTS_FILE,
};
use pearl_core::Error;

fn config(dir: &Path, name: &str, extra: &[&str]) -> ExperimentConfig {
    let text = format!(
        r#"
        name = "{name}"
        output = "{}"
        composition = "FI+2x2"
        [dataset.synth]
        episodes = 3
        frames_per_episode = 12
        [encoder]
        width = 32
        side = 16
        [probe]
        max_epochs = 5
        "#,
        dir.join(name).display()
    );
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml_str(&text, &overrides).unwrap()
}

#[test]
fn run_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let c = config(dir.path(), "plain", &[]);
    let rec = run_experiment(&c).unwrap();
    let out = dir.path().join("plain");
    assert_eq!(load_results(&out.join(RESULTS_FILE)).unwrap(), rec);
    rec.check().unwrap();
    assert_eq!(rec.variant, "FI+2x2");
    assert_eq!(rec.label, "synth");
    assert_eq!(rec.embedding_width, 5 * 32);
    assert_eq!(rec.categories.len(), 4);
    assert!(rec.finetune.is_none() && rec.hashes.head.is_none());
    let emb = std::fs::read(out.join("embeddings.prle")).unwrap();
    assert_eq!(rec.hashes.embeddings.as_deref(), Some(sha256_hex(&emb).as_str()));
    assert!(!out.join("head.prlh").exists());
}

#[test]
fn saved_dataset_gives_same_hash_and_label() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { episodes: 3, frames_per_episode: 12, ..SynthSpec::default() };
    let data = dir.path().join("sprites");
    save_dataset(&generate_synthetic(&spec).unwrap(), &data).unwrap();
    let inline = run_experiment(&config(dir.path(), "inline", &[])).unwrap();
    let mut c = config(dir.path(), "on-disk", &[]);
    c.dataset.synth = None;
    c.dataset.path = Some(data);
    let disk = run_experiment(&c).unwrap();
    assert_eq!(disk.label, "sprites");
    assert_eq!(disk.hashes.dataset, inline.hashes.dataset);
    assert_eq!(disk.categories, inline.categories);
}

#[test]
fn every_head_kind_runs_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ["aug-mlp", "t-dim", "s-dim", "st-dim", "cpc"] {
        let c = config(
            dir.path(),
            kind,
            &[
                &format!("finetune.kind={kind}"),
                "finetune.hyper.epochs=1",
                "finetune.hyper.batch_size=8",
                "finetune.hyper.context=3",
                "finetune.hyper.steps=2",
                "finetune.hyper.cpc_latent=8",
                "finetune.hyper.gru_hidden=8",
                "finetune.hyper.mlp_hidden=16",
                "finetune.hyper.mlp_out=8",
                "finetune.hyper.dim_proj=8",
            ],
        );
        let rec = run_experiment(&c).unwrap();
        assert_eq!(rec.variant, format!("FI+2x2/{kind}"));
        let head_path = dir.path().join(kind).join("head.prlh");
        let bytes = std::fs::read(&head_path).unwrap();
        assert_eq!(rec.hashes.head.as_deref(), Some(sha256_hex(&bytes).as_str()));
        let head = read_head(&head_path).unwrap();
        assert_eq!(head.kind.to_string(), kind);
        assert_eq!(rec.embedding_width, 5 * head.out_width());
        let f = rec.finetune.unwrap();
        assert!(f.steps > 0 && f.final_loss.is_finite());
    }
}

#[test]
fn missing_embeddings_fail_in_compose_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut fi = config(dir.path(), "fi", &["composition=FI"]);
    run_experiment(&fi).unwrap();
    let store = dir.path().join("fi").join("embeddings.prle");

    fi.output = Some(dir.path().join("from-file"));
    let overrides = ["encoder.kind=file".to_string(), format!("encoder.path={}", store.display())];
    let text = fi.to_toml_string().unwrap();
    let ok = ExperimentConfig::from_toml_str(&text, &overrides).unwrap();
    assert_eq!(run_experiment(&ok).unwrap().hashes.embeddings.as_deref(), Some(sha256_hex(&std::fs::read(&store).unwrap()).as_str()));

    let mut grid = ok.clone();
    grid.composition = "FI+2x2".parse().unwrap();
    let err = run_experiment(&grid).unwrap_err();
    assert_eq!(err.stage(), Some("compose"));
    let msg = err.to_string();
    assert!(msg.starts_with("[compose]") && msg.contains("grid2:0"), "{msg}");
}

#[test]
fn bad_inputs_name_their_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(dir.path(), "bad", &[]);
    c.dataset.synth = None;
    c.dataset.path = Some(dir.path().join("nowhere"));
    assert_eq!(run_experiment(&c).unwrap_err().stage(), Some("dataset"));

    let mut c = config(dir.path(), "bad-flow", &[]);
    c.composition = "FI+FM".parse().unwrap();
    c.compose.flows = Some(dir.path().join("missing.prlf"));
    assert_eq!(run_experiment(&c).unwrap_err().stage(), Some("compose"));

    let mut c = config(dir.path(), "short", &["finetune.kind=cpc", "finetune.hyper.context=20"]);
    c.encoder.width = 8;
    let err = run_experiment(&c).unwrap_err();
    assert_eq!(err.stage(), Some("finetune"), "{err}");
    assert!(matches!(err, Error::Stage { .. }));
}

#[test]
fn report_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let base = run_experiment(&config(dir.path(), "fi", &["composition=FI", "dataset.label=Pong"])).unwrap();
    let treat = run_experiment(&config(dir.path(), "grid", &["dataset.label=Pong"])).unwrap();
    let other = run_experiment(&config(dir.path(), "other", &["dataset.label=Mystery"])).unwrap();

    let table = compare_runs(&base, &treat).unwrap();
    assert_eq!(table.rows.len(), 4);
    for r in &table.rows {
        assert_eq!(r.delta, r.treatment - r.baseline);
        assert!((r.delta_pp - 100.0 * r.delta).abs() < 1e-12);
    }
    let mean = table.rows.iter().map(|r| r.delta).sum::<f64>() / 4.0;
    assert!((table.mean_delta - mean).abs() < 1e-12);

    let refs = vec![ReferenceBar { label: "Pong".into(), config: "published".into(), f1: 0.5 }];
    let out = dir.path().join("report");
    render_report(&[base.clone(), treat.clone(), other.clone()], &refs, &out).unwrap();

    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("label,config,") && header.ends_with(",μ"), "{header}");
    assert_eq!(csv.lines().count(), 4);

    let svg = std::fs::read_to_string(out.join("report.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let bars: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("bar")).collect();
    let value = |group: &str, series: &str| -> f64 {
        let b = bars
            .iter()
            .find(|b| b.attribute("data-group") == Some(group) && b.attribute("data-series") == Some(series))
            .unwrap_or_else(|| panic!("no bar {group}/{series}"));
        let v: f64 = b.attribute("data-value").unwrap().parse().unwrap();
        let h: f64 = b.attribute("height").unwrap().parse().unwrap();
        assert!((h - 300.0 * v).abs() < 1e-9);
        v
    };
    assert_eq!(value("Pg", "FI"), base.mean_f1);
    assert_eq!(value("Pg", "FI+2x2"), treat.mean_f1);
    assert_eq!(value("Pg", "published"), 0.5);
    assert_eq!(value("Mystery", "FI+2x2"), other.mean_f1);
    let mu = (treat.mean_f1 + other.mean_f1) / 2.0;
    assert!((value("μ", "FI+2x2") - mu).abs() < 1e-12);
    assert_eq!(value("μ", "FI"), base.mean_f1);
    // Pong/FI, Pong/FI+2x2, Pong/published, Mystery/FI+2x2 and three μ bars
    assert_eq!(bars.len(), 7);
}

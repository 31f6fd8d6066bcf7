use std::path::Path;
use std::process::Command;

use serde_json::Value;

const TINY: &str = r#"{
  "sampler": {"n_frames": 60, "stride": 5},
  "bases": [
    {"id": "r", "hidden": [6]},
    {"id": "a", "descriptor": {"kind": "radial_angular"}, "hidden": [6], "seed": 2},
    {"id": "p", "kind": "perturbed_analytic", "perturbation": {"epsilon_scale": 1.03, "sigma_scale": 1.0}}
  ],
  "base_training": {"epochs": 2, "batch_size": 8},
  "meta_direct": {"layers": 1, "hidden": 8, "heads": 2, "head_hidden": 8, "training": {"epochs": 2, "batch_size": 8}},
  "meta_conserv": {"layers": 1, "hidden": 8, "n_rbf": 4, "energy_embed_dim": 4, "training": {"epochs": 2, "batch_size": 8}},
  "md": {"run": {"n_steps": 100, "record_stride": 20}, "replicas": 2},
  "jobs": 2
}"#;

fn config(dir: &Path, text: &str, workdir: &Path) -> std::path::PathBuf {
    let mut v: Value = serde_json::from_str(text).unwrap();
    v["paths"] = serde_json::json!({ "workdir": workdir });
    let p = dir.join("config.json");
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn ffstack(cfg: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_ffstack"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .env_remove("FFSTACK_WORKDIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    out.status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("w");
    for bad in [r#"{"sampler": {"temperature": -1}}"#, r#"{"bogus": 1}"#, r#"{"split": {"train_frac": 0.99}}"#] {
        let cfg = config(dir.path(), bad, &work);
        assert_eq!(ffstack(&cfg, &["gen-data"]), 2, "{bad}");
    }
    let cfg = config(dir.path(), TINY, &work);
    assert_eq!(ffstack(&cfg, &["train", "--target", "nonsense"]), 2);
    assert_eq!(ffstack(&cfg, &["eval"]), 2);
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY, &dir.path().join("w"));
    assert_eq!(ffstack(&cfg, &["train", "--target", "ensemble"]), 3);
    assert_eq!(ffstack(&cfg, &["gen-data"]), 0);
    assert_eq!(ffstack(&cfg, &["train", "--target", "direct"]), 3);
    assert_eq!(ffstack(&cfg, &["eval", "--target", "conserv"]), 3);
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["train", "--target", "ensemble"],
    &["train", "--target", "direct"],
    &["train", "--target", "conserv"],
    &["eval", "--target", "conserv"],
    &["md", "--target", "conserv"],
    &["subset-scan"],
    &["report"],
];

#[test]
fn pipeline_artifacts_and_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (wa, wb) = (dir.path().join("a"), dir.path().join("b"));
    for w in [&wa, &wb] {
        let cfg = config(dir.path(), TINY, w);
        for step in PIPELINE {
            assert_eq!(ffstack(&cfg, step), 0, "{step:?}");
        }
    }

    let ds = read_json(&wa.join("dataset_manifest.json"));
    assert_eq!(ds["frame_count"], 60);
    let scan = std::fs::read_to_string(wa.join("subset_scan/rows.csv")).unwrap();
    assert_eq!(scan.lines().count(), 1 + 7);
    let stab = read_json(&wa.join("md/ensemble_conserv/stability.json"));
    assert_eq!(stab["runs"], 2);
    let replicas = std::fs::read_to_string(wa.join("md/ensemble_conserv/replicas.csv")).unwrap();
    assert!(replicas.lines().next().unwrap().contains("drift_reference_ev_per_atom"));
    let report = read_json(&wa.join("report.json"));
    let names: Vec<&str> = report["models"].as_array().unwrap().iter().map(|m| m["model"].as_str().unwrap()).collect();
    assert_eq!(names, ["base_r", "base_a", "base_p", "mean_baseline", "ensemble_direct", "ensemble_conserv"]);
    for m in report["models"].as_array().unwrap() {
        assert!(m["force_mae"].as_f64().unwrap() >= 0.0);
        let pct = m["stability_pct"].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&pct));
    }

    let (mut ma, mut mb) = (read_json(&wa.join("manifest.json")), read_json(&wb.join("manifest.json")));
    let mut echoes = [wa.join("config.echo.json"), wb.join("config.echo.json")].map(|p| read_json(&p));
    for e in &mut echoes {
        e["paths"]["workdir"] = Value::Null;
    }
    assert_eq!(echoes[0], echoes[1]);
    for m in [&mut ma, &mut mb] {
        m.as_object_mut().unwrap().remove("config.echo.json");
    }
    assert_eq!(ma, mb);
    assert!(ma.as_object().unwrap().len() > 20);
    for rel in ma.as_object().unwrap().keys() {
        assert_eq!(std::fs::read(wa.join(rel)).unwrap(), std::fs::read(wb.join(rel)).unwrap(), "{rel}");
    }

    let ckpts = std::fs::read_dir(wa.join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 3 + 2);
    let log = std::fs::read_to_string(wa.join("logs/direct.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("best,"));

    let mut nve: Value = serde_json::from_str(TINY).unwrap();
    nve["md"]["run"]["ensemble"] = serde_json::json!({ "kind": "nve" });
    nve["md"]["run"]["init_temperature"] = serde_json::json!(300.0);
    let cfg = config(dir.path(), &nve.to_string(), &wa);
    assert_eq!(ffstack(&cfg, &["md", "--target", "conserv"]), 0);
    assert!(wa.join("md/ensemble_conserv/stability.json").exists());
    let replicas = std::fs::read_to_string(wa.join("md/ensemble_conserv/replicas.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(replicas.as_bytes());
    let col = rows.headers().unwrap().iter().position(|h| h == "drift_model_ev_per_atom").unwrap();
    for r in rows.records() {
        assert!(r.unwrap()[col].parse::<f64>().unwrap() < 1e-2);
    }

    let cfg = config(dir.path(), TINY, &wa);
    assert_eq!(ffstack(&cfg, &["gen-data"]), 0);
    assert_eq!(read_json(&wa.join("dataset_manifest.json")), ds);
    assert_eq!(ffstack(&cfg, &["gen-data", "--seed", "5"]), 0);
    assert_ne!(read_json(&wa.join("dataset_manifest.json"))["file_sha256"], ds["file_sha256"]);
}

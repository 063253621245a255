use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use dbc_cli::run::RunManifest;
use dbc_cli::stages::REPORT_LABELS;
use serde_json::Value;

fn dbc(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dbc")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "seed": 3,
        "dataset": {"synthetic": {"n_locations": 10, "T": 200}},
        "factor": {"epochs": 2, "d_hidden": 8, "window_stride": 8},
        "corrector": {"epochs": 2, "d_model": 8, "n_heads": 2, "window_stride": 8}
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn files_under(root: &Path, rel: &str, out: &mut Vec<String>) {
    for e in fs::read_dir(root.join(rel)).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        let r = if rel.is_empty() { name } else { format!("{rel}/{name}") };
        if e.file_type().unwrap().is_dir() {
            files_under(root, &r, out);
        } else {
            out.push(r);
        }
    }
}

#[test]
fn generate_is_byte_identical_for_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut contents = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = dbc(&["generate", "--seed", "42", "--out", out.to_str().unwrap(), "--dataset.synthetic.n_locations", "3", "--dataset.synthetic.T", "120", "--quiet"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let mut files = Vec::new();
        files_under(&out.join("data"), "", &mut files);
        files.sort();
        let map: BTreeMap<String, Vec<u8>> = files.iter().map(|f| (f.clone(), fs::read(out.join("data").join(f)).unwrap())).collect();
        assert!(!map.is_empty());
        contents.push(map);
    }
    assert_eq!(contents[0], contents[1]);
}

#[test]
fn missing_manifest_is_a_config_path_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = dbc(&["generate", "--dataset.manifest", "/nope", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("error[CONFIG_PATH]"), "{stderr}");
}

#[test]
fn config_errors_list_every_violation() {
    let o = dbc(&["generate", "--factor.lr", "-1", "--corrector.epochs", "0", "--baselines.n_quantiles", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("error[CONFIG_INVALID]"), "{stderr}");
    for key in ["lr", "epochs", "n_quantiles"] {
        assert!(stderr.contains(key), "missing {key} in {stderr}");
    }
}

#[test]
fn unknown_override_keys_are_rejected() {
    let o = dbc(&["generate", "--factor.nope", "1", "--window.bogus", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("factor.nope") && stderr.contains("window.bogus"), "{stderr}");
}

#[test]
fn stages_out_of_order_report_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = dbc(&["train-factor", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[STAGE_MISSING]"));
}

#[test]
fn help_exits_cleanly() {
    let o = dbc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("pipeline"));
}

#[test]
fn staged_run_reports_every_method_and_tracks_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    for stage in ["generate", "split", "train-factor", "infer-z", "train-corrector", "correct", "evaluate"] {
        let o = dbc(&[stage, "--config", cfg, "--out", out, "--quiet"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = dbc(&["report", "--config", cfg, "--out", out]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    for label in REPORT_LABELS {
        assert!(table.contains(label), "{label} missing from\n{table}");
    }

    let out = Path::new(out);
    let report: BTreeMap<String, Value> = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.keys().map(String::as_str).collect::<Vec<_>>().len(), REPORT_LABELS.len());
    for label in REPORT_LABELS {
        let e = &report[label];
        assert!(e["mse"].as_f64().unwrap() >= 0.0 && e["n"].as_u64().unwrap() > 0);
    }

    let manifest: RunManifest = serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    let mut files = Vec::new();
    files_under(out, "", &mut files);
    files.retain(|f| f != "run_manifest.json");
    files.sort();
    let tracked: Vec<String> = manifest.artifacts.keys().cloned().collect();
    assert_eq!(files, tracked);
    for (f, hash) in &manifest.artifacts {
        assert_eq!(&dbc_cli::config::sha256_hex(&fs::read(out.join(f)).unwrap()), hash, "{f}");
    }
    let corrected = fs::read_to_string(out.join(&manifest.stages["correct"][0])).unwrap();
    assert_eq!(corrected.lines().next().unwrap(), "t,y_g_raw,delta_pred,y_corrected,y_obs");
}

#[test]
fn a_run_directory_refuses_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let args = ["generate", "--out", out, "--dataset.synthetic.n_locations", "2", "--dataset.synthetic.T", "100", "--quiet"];
    assert!(dbc(&args).status.success());
    let o = dbc(&["generate", "--out", out, "--seed", "9", "--dataset.synthetic.n_locations", "2", "--dataset.synthetic.T", "100"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[RUN_CONFLICT]"));
}

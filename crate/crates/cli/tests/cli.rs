//! End-to-end checks of the mlt binary: artifact layout, determinism
//! passthrough, and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlt_core::config::TrainConfig;

fn mlt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlt"))
}

/// Small model and short schedule so each invocation stays in test budget.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = TrainConfig::desk()
        .with_overrides(&[
            ("model.coarse_count".into(), "6".into()),
            ("model.backbone.widths".into(), "[2,3,4,6]".into()),
            ("model.encoder.block_widths".into(), "[8,6,4]".into()),
            ("model.encoder.heads_per_block".into(), "2".into()),
            ("model.encoder.layers_per_block".into(), "1".into()),
            ("optim.epochs".into(), "1".into()),
            ("optim.batch_size".into(), "4".into()),
            ("optim.base_lr".into(), "0.002".into()),
            ("optim.seed".into(), "7".into()),
        ])
        .unwrap();
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// The single run directory under `out` for a command, e.g. "gen-data-...".
fn run_dir(out: &Path, prefix: &str) -> PathBuf {
    let mut hits: Vec<PathBuf> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix))
        })
        .collect();
    assert_eq!(hits.len(), 1, "expected one {prefix} run under {out:?}, found {hits:?}");
    hits.pop().unwrap()
}

fn manifest_json(run: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(run.join("run-manifest.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn hash_of(manifest: &serde_json::Value, section: &str, suffix: &str) -> String {
    let map = manifest[section].as_object().unwrap();
    let (_, v) = map
        .iter()
        .find(|(k, _)| k.ends_with(suffix))
        .unwrap_or_else(|| panic!("no {section} entry ending in {suffix}"));
    v.as_str().unwrap().to_string()
}

fn gen_tiny_dataset(work: &Path, count: usize, label: &str) -> PathBuf {
    let out = work.join(label);
    let cfg = tiny_config(work);
    run_ok(
        mlt()
            .args(["gen-data", "--count", &count.to_string(), "--seed", "5"])
            .arg("--config")
            .arg(&cfg)
            .env("MLT_OUT", &out),
    );
    run_dir(&out, "gen-data").join("dataset")
}

#[test]
fn gen_data_reruns_reproduce_the_dataset_hash() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_config(work.path());
    let mut hashes = Vec::new();
    for label in ["a", "b"] {
        let out = work.path().join(label);
        run_ok(
            mlt()
                .args(["gen-data", "--count", "4", "--seed", "9"])
                .arg("--config")
                .arg(&cfg)
                .env("MLT_OUT", &out),
        );
        let run = run_dir(&out, "gen-data");
        let manifest = manifest_json(&run);
        assert_eq!(manifest["command"], "gen-data");
        assert!(manifest["config"]["model"]["coarse_count"] == 6);
        hashes.push(hash_of(&manifest, "outputs", "records.mlt1"));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn train_eval_infer_snapshot_plot_pipeline() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_config(work.path());
    let data = gen_tiny_dataset(work.path(), 4, "data");

    let train_out = work.path().join("train");
    run_ok(
        mlt()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .env("MLT_OUT", &train_out),
    );
    let train_run = run_dir(&train_out, "train");
    let ckpt = train_run.join("checkpoints").join("final.mltc");
    assert!(ckpt.is_file());
    let metrics = std::fs::read_to_string(train_run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,mpve,mpjpe,pa_mpjpe\ntrain,"));
    let loss_log = train_run.join("loss_log.csv");
    let log_text = std::fs::read_to_string(&loss_log).unwrap();
    assert!(log_text.starts_with("step,total\n0,"));

    let eval_out = work.path().join("eval");
    run_ok(
        mlt()
            .arg("eval")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .env("MLT_OUT", &eval_out),
    );
    let eval_run = run_dir(&eval_out, "eval");
    let eval_metrics = std::fs::read_to_string(eval_run.join("metrics.csv")).unwrap();
    assert!(eval_metrics.contains("\neval,"));

    let infer_out = work.path().join("infer");
    run_ok(
        mlt()
            .arg("infer")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .args(["--index", "1"])
            .env("MLT_OUT", &infer_out),
    );
    let infer_run = run_dir(&infer_out, "infer");
    let (fine, _) =
        mlt_core::mesh_io::load_obj(&infer_run.join("prediction-fine.obj")).unwrap();
    assert_eq!(fine.nrows(), 798);
    let (coarse, _) =
        mlt_core::mesh_io::load_obj(&infer_run.join("prediction-coarse.obj")).unwrap();
    assert_eq!(coarse.nrows(), 6);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(infer_run.join("infer.json")).unwrap())
            .unwrap();
    assert!(summary["mpjpe"].as_f64().unwrap().is_finite());

    let snap_out = work.path().join("snap");
    run_ok(
        mlt()
            .arg("snapshot-template")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .args(["--ids", "0,1"])
            .env("MLT_OUT", &snap_out),
    );
    let snap_run = run_dir(&snap_out, "snapshot-template");
    let names: Vec<String> = std::fs::read_dir(&snap_run)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    // one template and one prediction per id, step index zero padded
    assert!(names.iter().any(|n| n.starts_with("sample000-step") && n.ends_with("-template.obj")));
    assert!(names.iter().any(|n| n.starts_with("sample001-step") && n.ends_with("-predicted.obj")));
    let step_digits: Vec<&String> = names.iter().filter(|n| n.contains("-step")).collect();
    for name in step_digits {
        let digits: String = name
            .split("-step")
            .nth(1)
            .unwrap()
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect();
        assert_eq!(digits.len(), 6, "step index not zero padded in {name}");
    }

    let plot_out = work.path().join("plot");
    run_ok(
        mlt()
            .arg("plot")
            .arg("--input")
            .arg(&loss_log)
            .env("MLT_OUT", &plot_out),
    );
    let plot_run = run_dir(&plot_out, "plot");
    let svg = std::fs::read_to_string(plot_run.join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn finetune_resumes_and_rejects_model_edits() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_config(work.path());
    let data = gen_tiny_dataset(work.path(), 4, "data");

    let train_out = work.path().join("train");
    run_ok(
        mlt()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .env("MLT_OUT", &train_out),
    );
    let ckpt = run_dir(&train_out, "train").join("checkpoints").join("final.mltc");

    let ft_out = work.path().join("ft");
    run_ok(
        mlt()
            .arg("finetune")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--data")
            .arg(&data)
            .args(["--set", "optim.epochs=1"])
            .env("MLT_OUT", &ft_out),
    );
    let ft_run = run_dir(&ft_out, "finetune");
    assert!(ft_run.join("checkpoints").join("final.mltc").is_file());

    let bad = mlt()
        .arg("finetune")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--set", "model.coarse_count=8"])
        .env("MLT_OUT", work.path().join("ft-bad"))
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn export_obj_writes_both_resolutions() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_config(work.path());
    let out = work.path().join("export");
    run_ok(
        mlt()
            .arg("export-obj")
            .arg("--config")
            .arg(&cfg)
            .env("MLT_OUT", &out),
    );
    let run = run_dir(&out, "export-obj");
    let (fine, faces) = mlt_core::mesh_io::load_obj(&run.join("rest-fine.obj")).unwrap();
    assert_eq!(fine.nrows(), 798);
    assert!(!faces.is_empty());
    let (coarse, _) = mlt_core::mesh_io::load_obj(&run.join("rest-coarse.obj")).unwrap();
    assert_eq!(coarse.nrows(), 6);
}

#[test]
fn sweep_emits_one_row_per_value() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_config(work.path());
    let data = gen_tiny_dataset(work.path(), 4, "data");
    let out = work.path().join("sweep");
    run_ok(
        mlt()
            .arg("sweep-alpha-temp")
            .arg("--config")
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .args(["--values", "0.1,0.33"])
            .env("MLT_OUT", &out),
    );
    let run = run_dir(&out, "sweep-alpha-temp");
    let csv = std::fs::read_to_string(run.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha_temp,final_total,mpve,mpjpe,pa_mpjpe");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.1,"));
    assert!(lines[2].starts_with("0.33,"));
}

#[test]
fn missing_checkpoint_exits_3_with_one_line_error() {
    let work = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(work.path(), 4, "data");
    let out = mlt()
        .arg("eval")
        .args(["--checkpoint", "/nonexistent/model.mltc"])
        .arg("--data")
        .arg(&data)
        .env("MLT_OUT", work.path().join("eval"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let trimmed = stderr.trim_end();
    assert!(!trimmed.contains('\n'), "multi-line error: {stderr}");
    assert!(trimmed.contains("missing input"));
    assert!(trimmed.contains("/nonexistent/model.mltc"));
}

#[test]
fn schema_violations_exit_2() {
    let work = tempfile::tempdir().unwrap();
    for bad_set in ["optim.epochs=zebra", "optim.unknown_knob=3"] {
        let out = mlt()
            .arg("train")
            .args(["--set", bad_set])
            .args(["--data", "/nonexistent"])
            .env("MLT_OUT", work.path().join("bad"))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "for {bad_set}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
    }
}

#[test]
fn divergent_training_exits_4() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny_config(work.path());
    let data = gen_tiny_dataset(work.path(), 4, "data");
    let out = mlt()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--set", "optim.base_lr=1e18", "--set", "optim.epochs=4"])
        .arg("--data")
        .arg(&data)
        .env("MLT_OUT", work.path().join("boom"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numeric failure"));
}

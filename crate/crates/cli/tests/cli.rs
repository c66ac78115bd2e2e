use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semap_core::dataset::read_poses;
use semap_core::synth::{CONFIG_FILE, FRAME_DIR, GT_FILE, POSE_FILE};
use semap_core::RunConfig;

fn semap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = semap(args);
    assert!(
        out.status.success(),
        "semap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--scenario", "street", "--frames", "9", "--seed", &seed.to_string()]);
    data
}

/// Small, fast mapping config for the synthetic street.
fn tiny_config(data: &Path, run_dir: &Path, seed: Option<u64>) -> PathBuf {
    let mut c = RunConfig::load(&data.join(CONFIG_FILE)).unwrap();
    c.field.fourier_features = 16;
    c.field.sigma_enc = 2.0;
    c.field.hidden = vec![16, 16];
    c.trainer.batch_on = 128;
    c.trainer.epochs_per_update = 2;
    c.trainer.learning_rate = 1e-3;
    c.grid.resolution = 48;
    c.paths.run_dir = Some(run_dir.to_path_buf());
    c.instance.hidden_width = 16;
    c.instance.hidden_layers = 2;
    c.instance.latent_dim = 4;
    c.instance.n_shapes = 3;
    c.instance.surface_samples = 100;
    c.instance.space_samples = 20;
    c.instance.epochs = 2;
    c.instance.fit_steps = 5;
    c.instance.grid_res = 12;
    let mut text = c.to_toml();
    if seed.is_none() {
        text = text.lines().filter(|l| !l.starts_with("seed")).collect::<Vec<_>>().join("\n");
    }
    let path = run_dir.with_extension("toml");
    fs::write(&path, text).unwrap();
    path
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string()
}

#[test]
fn synth_writes_nine_frames_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = synth(a.path(), 4);
    let db = synth(b.path(), 4);
    let frames: Vec<_> = fs::read_dir(da.join(FRAME_DIR)).unwrap().collect();
    assert_eq!(frames.len(), 9);
    assert_eq!(read_poses(&da.join(POSE_FILE)).unwrap().len(), 9);
    for name in [POSE_FILE, GT_FILE, "boxes.txt", "frames/000004.xyzl"] {
        assert_eq!(fs::read(da.join(name)).unwrap(), fs::read(db.join(name)).unwrap(), "{name}");
    }
    let out = ok(&["synth", "--out", s(&a.path().join("again")), "--frames", "9", "--seed", "4"]);
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    let hist = summary["label_histogram"].as_array().unwrap();
    assert!(hist.iter().take(3).all(|c| c.as_u64().unwrap() > 0), "{hist:?}");
}

#[test]
fn missing_pose_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1);
    let cfg = tiny_config(&data, &dir.path().join("run"), Some(1));
    let missing = dir.path().join("nowhere.txt");
    let out = semap(&["map", "--config", s(&cfg), "--poses", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert!(line.starts_with("error kind=input"), "{line}");
    assert!(line.contains("nowhere.txt"), "{line}");
}

#[test]
fn map_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 1);
    let cfg = tiny_config(&data, &dir.path().join("run"), None);
    let out = semap(&["map", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("--seed"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[trainer]\nepochs = 3\n").unwrap();
    let out = semap(&["map", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("epochs"), "{}", error_line(&out));
}

#[test]
fn map_extract_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 2);
    let run = dir.path().join("run");
    let cfg = tiny_config(&data, &run, Some(2));
    let report: serde_json::Value = serde_json::from_str(&ok(&["map", "--config", s(&cfg)])).unwrap();
    assert_eq!(report["phases"].as_array().unwrap().len(), 3);
    assert_eq!(report["seed"], 2);
    for p in 0..3 {
        assert!(run.join(format!("checkpoints/phase_{p:03}.ckpt")).exists());
    }
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 6);

    let mesh = dir.path().join("mesh.ply");
    let out = semap(&[
        "extract",
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--config",
        s(&cfg),
        "--report",
        s(&run.join("report.json")),
        "--out",
        s(&mesh),
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("grid n_x=48"), "{stderr}");
    assert!(out.status.success(), "{stderr}");
    let header = fs::read(&mesh).unwrap();
    let text = String::from_utf8_lossy(&header[..200.min(header.len())]).to_string();
    assert!(text.contains("config_hash"), "{text}");

    let metrics = dir.path().join("metrics.json");
    let table = ok(&[
        "eval",
        "--input",
        s(&mesh),
        "--gt",
        s(&data.join(GT_FILE)),
        "--report",
        s(&run.join("report.json")),
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--config",
        s(&cfg),
        "--samples",
        "5000",
        "--out",
        s(&metrics),
    ]);
    assert!(table.contains("fscore") && table.contains("miou"), "{table}");
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    for key in ["precision", "recall", "fscore", "miou"] {
        let v = m[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(m["cd"].as_f64().unwrap() >= 0.0);
}

#[test]
fn extract_logs_grid_formula() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    let run = dir.path().join("run");
    let cfg = tiny_config(&data, &run, Some(3));
    ok(&["map", "--config", s(&cfg), "--epochs", "1"]);
    let mut wide = RunConfig::load(&cfg).unwrap();
    wide.scene.g_min = -100.0;
    wide.scene.g_max = 100.0;
    let wide_cfg = dir.path().join("wide.toml");
    fs::write(&wide_cfg, wide.to_toml()).unwrap();
    let out = semap(&[
        "extract",
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--config",
        s(&wide_cfg),
        "--resolution",
        "500",
        "--z-min",
        "-80",
        "--z-max",
        "-60",
        "--out",
        s(&dir.path().join("m.ply")),
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("n_x=500 n_y=500 n_z=50 z_start=50"), "{stderr}");
}

#[test]
fn map_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let cfg = tiny_config(&data, &run, Some(5));
        ok(&["map", "--config", s(&cfg)]);
        runs.push(run);
    }
    for f in ["final.ckpt", "metrics.jsonl"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn prior_train_and_instance_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let cfg = tiny_config(&data, &dir.path().join("run"), Some(6));
    let prior = dir.path().join("car.prior");
    ok(&["prior-train", "--config", s(&cfg), "--out", s(&prior)]);
    assert!(prior.exists() && prior.with_extension("json").exists());
    let size = fs::metadata(&prior).unwrap().len();

    let out_dir = dir.path().join("instances");
    let out = semap(&[
        "instance-fit",
        "--prior",
        s(&prior),
        "--frames",
        s(&data.join(FRAME_DIR)),
        "--poses",
        s(&data.join(POSE_FILE)),
        "--boxes",
        s(&data.join("boxes.txt")),
        "--config",
        s(&cfg),
        "--out",
        s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", error_line(&out));
    let log = fs::read_to_string(out_dir.join("fits.jsonl")).unwrap();
    assert!(log.lines().count() > 0);
    for line in log.lines() {
        // A two-epoch prior may decode to an empty surface; that instance is
        // reported without a mesh.
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["fit"]["latent_norm"].as_f64().unwrap().is_finite());
        assert_ne!(rec["mesh"].is_null(), rec["error"].is_null());
    }
    assert_eq!(fs::metadata(&prior).unwrap().len(), size);
}

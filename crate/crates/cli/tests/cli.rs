//! End-to-end tests of the command-line surface: scene generation, training,
//! evaluation, extraction, resume, idempotence, and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radfield"))
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("radfield_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn gen_scene(dir: &Path, preset: &str, seed: u64) {
    let out = bin()
        .args([
            "gen-scene",
            "--preset",
            preset,
            "--seed",
            &seed.to_string(),
            "--cameras",
            "6",
            "--resolution",
            "20",
            "--lidar-azimuths",
            "40",
            "--out",
        ])
        .arg(dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "gen-scene failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn experiment_json(scene: &Path, out_dir: &Path, epochs: (usize, usize)) -> String {
    format!(
        r#"{{
  "schema": "radfield.experiment/1",
  "scene_path": {scene:?},
  "output_dir": {out:?},
  "seed": 5,
  "split": {{ "mode": "held_out_viewpoints", "fraction": 0.2, "radius": 1.0 }},
  "train": {{
    "warmup_epochs": {warm},
    "main_epochs": {main},
    "batch_rays": 128,
    "samples_per_ray": 32,
    "checkpoint_every": 2,
    "field": {{ "pos_freqs": 6, "hidden_width": 12, "hidden_depth": 2, "color_width": 8, "sky_width": 8, "sky_depth": 2, "exposure_dim": 4, "density_bias": -2.5 }}
  }},
  "metrics": {{ "samples_per_ray": 32 }}
}}"#,
        scene = scene.display().to_string(),
        out = out_dir.display().to_string(),
        warm = epochs.0,
        main = epochs.1,
    )
}

#[test]
fn gen_scene_writes_complete_bundle_with_stable_manifest() {
    let dir = workdir("gen");
    let scene = dir.join("scene");
    gen_scene(&scene, "one-box", 3);
    for i in 0..6 {
        assert!(scene.join(format!("image_{i:03}.ppm")).is_file());
        assert!(scene.join(format!("mask_{i:03}.pgm")).is_file());
    }
    assert!(scene.join("lidar.ply").is_file());
    assert!(scene.join("spec.json").is_file());
    let manifest1 = std::fs::read_to_string(scene.join("manifest.json")).unwrap();

    // same seed, fresh directory: identical manifest hashes
    let scene2 = dir.join("scene_again");
    gen_scene(&scene2, "one-box", 3);
    let manifest2 = std::fs::read_to_string(scene2.join("manifest.json")).unwrap();
    assert_eq!(manifest1, manifest2);

    // lidar PLY reloads to the same sample list
    let a = radfield::io::read_lidar_ply(&scene.join("lidar.ply")).unwrap();
    let b = radfield::io::read_lidar_ply(&scene2.join("lidar.ply")).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.z, y.z);
        assert_eq!(x.ray.origin, y.ray.origin);
    }
}

#[test]
fn train_zero_epochs_writes_initialized_checkpoint_only() {
    let dir = workdir("zero_epochs");
    let scene = dir.join("scene");
    gen_scene(&scene, "one-box", 4);
    let cfg_path = dir.join("exp.json");
    std::fs::write(&cfg_path, experiment_json(&scene, &dir.join("out"), (0, 0))).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("out/final.ckpt").is_file());
    assert!(dir.join("out/resolved_config.json").is_file());
    let log = std::fs::read_to_string(dir.join("out/train_log.ndjson")).unwrap();
    assert!(log.is_empty());
    let (params, extras, meta) =
        radfield::field::read_checkpoint(&dir.join("out/final.ckpt")).unwrap();
    assert_eq!(meta.epoch, Some(0));
    assert!(!extras.is_empty()); // optimizer state sections
    assert!(params.set.all_finite());
}

#[test]
fn train_same_seed_is_bitwise_idempotent_and_eval_reports_match() {
    let dir = workdir("idempotent");
    let scene = dir.join("scene");
    gen_scene(&scene, "default", 6);

    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.join(run);
        let cfg_path = dir.join(format!("exp_{run}.json"));
        std::fs::write(&cfg_path, experiment_json(&scene, &out_dir, (1, 2))).unwrap();
        let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        checkpoints.push(std::fs::read(out_dir.join("final.ckpt")).unwrap());
        // different worker counts must not change results
        let workers = if run == "a" { "1" } else { "2" };
        let out = bin()
            .args(["--workers", workers, "eval", "--config"])
            .arg(&cfg_path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        reports.push(std::fs::read(out_dir.join("metrics.json")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn resumed_training_matches_uninterrupted_run_bitwise() {
    let dir = workdir("resume");
    let scene = dir.join("scene");
    gen_scene(&scene, "one-box", 8);

    // uninterrupted: 4 epochs with a checkpoint every 2
    let full_dir = dir.join("full");
    let cfg_full = dir.join("exp_full.json");
    std::fs::write(&cfg_full, experiment_json(&scene, &full_dir, (1, 3))).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_full).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // resume from the epoch-2 checkpoint in a fresh output dir
    let resumed_dir = dir.join("resumed");
    let cfg_resumed = dir.join("exp_resumed.json");
    std::fs::write(&cfg_resumed, experiment_json(&scene, &resumed_dir, (1, 3))).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_resumed)
        .args(["--resume"])
        .arg(full_dir.join("epoch_00002.ckpt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let a = std::fs::read(full_dir.join("final.ckpt")).unwrap();
    let b = std::fs::read(resumed_dir.join("final.ckpt")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted run");
}

#[test]
fn ablation_flags_produce_distinct_resolved_configs() {
    let dir = workdir("flags");
    let scene = dir.join("scene");
    gen_scene(&scene, "one-box", 9);

    let variants: [(&str, &[&str]); 4] = [
        ("base", &[]),
        ("nolidar", &["--no-lidar"]),
        ("nosky", &["--no-sky"]),
        ("expoff", &["--exposure", "off"]),
    ];
    let mut resolved = Vec::new();
    for (name, flags) in variants {
        let out_dir = dir.join(name);
        let cfg_path = dir.join(format!("exp_{name}.json"));
        std::fs::write(&cfg_path, experiment_json(&scene, &out_dir, (0, 0))).unwrap();
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .args(flags)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = std::fs::read_to_string(out_dir.join("resolved_config.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        resolved.push(v["train"].clone());
    }
    assert_eq!(resolved[1]["loss_weights"]["near"], 0.0);
    assert_eq!(resolved[1]["lidar_fraction"], 0.0);
    assert_eq!(resolved[2]["loss_weights"]["seg"], 0.0);
    assert_eq!(resolved[3]["exposure_mode"], "off");
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(resolved[i], resolved[j], "variants {i} and {j} resolve identically");
        }
    }
}

#[test]
fn extract_writes_artifacts() {
    let dir = workdir("extract");
    let scene = dir.join("scene");
    gen_scene(&scene, "one-box", 10);
    let cfg_path = dir.join("exp.json");
    std::fs::write(&cfg_path, experiment_json(&scene, &dir.join("out"), (1, 1))).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success());

    for what in ["depthmaps", "pointcloud", "mesh"] {
        let out = bin()
            .args(["extract", "--config"])
            .arg(&cfg_path)
            .args(["--what", what, "--resolution", "16"])
            .output()
            .unwrap();
        assert!(out.status.success(), "extract {what}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let extract = dir.join("out/extract");
    assert!(extract.join("depth_000.pgm").is_file());
    assert!(extract.join("pointcloud.ply").is_file());
    assert!(extract.join("mesh.ply").is_file());
}

#[test]
fn eval_on_empty_density_checkpoint_reports_near_zero_accuracy_and_reruns_identically() {
    let dir = workdir("empty_eval");
    let scene_dir = dir.join("scene");
    gen_scene(&scene_dir, "one-box", 12);
    let cfg_path = dir.join("exp.json");
    std::fs::write(&cfg_path, experiment_json(&scene_dir, &dir.join("out"), (0, 0))).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(out.status.success());

    // rewrite the checkpoint with the density head forced to near-zero output
    let ckpt = dir.join("out/final.ckpt");
    let (mut params, extras, meta) = radfield::field::read_checkpoint(&ckpt).unwrap();
    params.set.get_mut("density.w").data.fill(0.0);
    params.set.get_mut("density.b").data[0] = -40.0;
    radfield::field::write_checkpoint(&ckpt, &params, &extras, &meta).unwrap();

    let run_eval = || {
        let out = bin().args(["eval", "--config"]).arg(&cfg_path).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(dir.join("out/metrics.json")).unwrap()
    };
    let r1 = run_eval();
    let r2 = run_eval();
    assert_eq!(r1, r2, "eval re-run is not byte-identical");
    let v: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    let acc = v["acc_at_0_1"].as_f64().unwrap();
    assert!(acc < 0.05, "empty field should have near-zero accuracy, got {acc}");
}

#[test]
fn exit_codes_distinguish_input_config_errors() {
    let dir = workdir("exit_codes");
    // missing scene -> input error (2)
    let cfg_path = dir.join("missing_scene.json");
    std::fs::write(
        &cfg_path,
        experiment_json(&dir.join("nope"), &dir.join("out"), (0, 0)),
    )
    .unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "missing scene should exit 2");

    // unknown key -> config error (3)
    let bad = dir.join("bad.json");
    std::fs::write(
        &bad,
        r#"{ "schema": "radfield.experiment/1", "scene_path": "x", "output_dir": "y", "not_a_key": 1 }"#,
    )
    .unwrap();
    let out = bin().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "unknown config key should exit 3");

    // wrong schema version -> config error (3)
    let wrong = dir.join("wrong_schema.json");
    std::fs::write(
        &wrong,
        r#"{ "schema": "radfield.experiment/0", "scene_path": "x", "output_dir": "y" }"#,
    )
    .unwrap();
    let out = bin().args(["train", "--config"]).arg(&wrong).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn ablate_runs_the_component_grid() {
    let dir = workdir("ablate");
    let scene = dir.join("scene");
    gen_scene(&scene, "one-box", 13);
    let cfg_path = dir.join("exp.json");
    std::fs::write(&cfg_path, experiment_json(&scene, &dir.join("out"), (0, 1))).unwrap();
    let out = bin()
        .args(["ablate", "--config"])
        .arg(&cfg_path)
        .args(["--epochs", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.join("out/ablation.json")).unwrap();
    let rows: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 7);
    // grid rows carry distinct resolved configs
    let full = std::fs::read_to_string(dir.join("out/ablate_full/resolved_config.json")).unwrap();
    let base =
        std::fs::read_to_string(dir.join("out/ablate_baseline/resolved_config.json")).unwrap();
    assert_ne!(full, base);
}

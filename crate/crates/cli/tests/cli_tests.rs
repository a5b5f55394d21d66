//! End-to-end tests over the compiled binary: output schemas, exit codes,
//! and flag/env plumbing.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gswa_core::imaging::ImageTensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gswa"));
    c.env_remove("GSWA_SEED");
    c
}

fn toy_flags(c: &mut Command) -> &mut Command {
    c.args([
        "--tile-size",
        "16",
        "--patch-size",
        "4",
        "--depth",
        "1",
        "--dim",
        "8",
        "--gswa-dim",
        "16",
        "--gswa-blocks",
        "2",
        "--gswa-heads",
        "2",
        "--proj-dim",
        "8",
    ])
}

fn write_fixture(dir: &Path, name: &str, h: usize, w: usize, detailed: bool) -> PathBuf {
    let img = if detailed {
        ImageTensor::from_fn(h, w, |y, x| {
            if y < h / 2 && x < w / 2 {
                [
                    ((x * 13 + y * 7) % 32) as f32 / 31.0,
                    ((x ^ y) % 16) as f32 / 15.0,
                    ((x * y + 3) % 24) as f32 / 23.0,
                ]
            } else {
                [0.5, 0.5, 0.5]
            }
        })
        .unwrap()
    } else {
        ImageTensor::constant(h, w, [0.3, 0.5, 0.7]).unwrap()
    };
    let path = dir.join(name);
    img.save_png(&path).unwrap();
    path
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn tile_square_image_uses_unit_grid() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "square.png", 448, 448, false);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args([
            "tile",
            img.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_code(&out, 0);
    let plan = read_json(&out_dir.join("square.plan.json"));
    assert_eq!(plan["ratio"], serde_json::json!([1, 1]));
    assert_eq!(plan["thumbnail"], serde_json::json!(false));
}

#[test]
fn tile_landscape_emits_six_tiles_and_thumbnail() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "land.png", 600, 800, true);
    let out_dir = dir.path().join("out");
    let out = bin()
        .args([
            "tile",
            img.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--emit-tiles",
        ])
        .output()
        .unwrap();
    assert_code(&out, 0);
    let plan = read_json(&out_dir.join("land.plan.json"));
    assert_eq!(plan["ratio"], serde_json::json!([3, 2]));
    assert_eq!(plan["tiles"].as_array().unwrap().len(), 6);
    let tiles_dir = out_dir.join("land_tiles");
    for (r, c) in [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)] {
        assert!(tiles_dir.join(format!("tile_{r}_{c}.png")).exists());
    }
    assert!(tiles_dir.join("thumbnail.png").exists());
}

#[test]
fn tile_missing_file_exits_2() {
    let out = bin()
        .args(["tile", "/nonexistent/nope.png"])
        .output()
        .unwrap();
    assert_code(&out, 2);
}

#[test]
fn tile_undecodable_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.png");
    std::fs::write(&path, b"this is not a png").unwrap();
    let out = bin()
        .args(["tile", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_code(&out, 2);
}

#[test]
fn weigh_constant_image_gives_uniform_weights() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "flat.png", 32, 48, false);
    let out_dir = dir.path().join("out");
    let out = toy_flags(bin().args([
        "weigh",
        img.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_code(&out, 0);
    let report = read_json(&out_dir.join("flat.report.json"));
    assert_eq!(report["schema"], "gswa-report/1");
    assert_eq!(report["strategy"], "self-attn");
    let n = report["n_tiles"].as_u64().unwrap() as f64;
    let uniform = 1.0 / (n + 1.0);
    for tile in report["tiles"].as_array().unwrap() {
        let w = tile["weight"].as_f64().unwrap();
        assert!(
            (w - uniform).abs() < 1e-6,
            "weight {w} vs uniform {uniform}"
        );
    }
    let sum = report["weight_sum"].as_f64().unwrap();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(out_dir.join("flat.heatmap.png").exists());
}

#[test]
fn weigh_reports_requested_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "img.png", 48, 64, true);
    let out_dir = dir.path().join("out");
    let out = toy_flags(bin().args([
        "weigh",
        img.to_str().unwrap(),
        "--strategy",
        "cosine-similarity",
        "--out",
        out_dir.to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_code(&out, 0);
    let report = read_json(&out_dir.join("img.report.json"));
    assert_eq!(report["strategy"], "cosine-similarity");
}

#[test]
fn weigh_heatmap_matches_canvas_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "img.png", 60, 80, true);
    let out_dir = dir.path().join("out");
    let out = toy_flags(bin().args([
        "weigh",
        img.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_code(&out, 0);
    let report = read_json(&out_dir.join("img.report.json"));
    let canvas = report["plan"]["canvas"].as_array().unwrap();
    let heat = ImageTensor::load(&out_dir.join("img.heatmap.png")).unwrap();
    assert_eq!(heat.width() as u64, canvas[0].as_u64().unwrap());
    assert_eq!(heat.height() as u64, canvas[1].as_u64().unwrap());
}

#[test]
fn ablate_bottom_zero_matches_weigh_weights() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "img.png", 60, 80, true);
    let out_dir = dir.path().join("out");
    assert_code(
        &toy_flags(bin().args([
            "weigh",
            img.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]))
        .output()
        .unwrap(),
        0,
    );
    assert_code(
        &toy_flags(bin().args([
            "ablate",
            img.to_str().unwrap(),
            "--remove",
            "bottom:0",
            "--out",
            out_dir.to_str().unwrap(),
        ]))
        .output()
        .unwrap(),
        0,
    );
    let report = read_json(&out_dir.join("img.report.json"));
    let ablation = read_json(&out_dir.join("img.ablation.json"));
    let weigh_weights: Vec<f64> = report["tiles"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["weight"].as_f64().unwrap())
        .chain([report["global_weight"].as_f64().unwrap()])
        .collect();
    let baseline: Vec<f64> = ablation["comparison"]["baseline_weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(weigh_weights, baseline);
    for outcome in ablation["comparison"]["settings"].as_array().unwrap() {
        let after: Vec<f64> = outcome["weights_after"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(after, baseline, "k=0 must leave weights unchanged");
    }
}

#[test]
fn ablate_reports_survivors_and_token_counts() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "img.png", 60, 80, true);
    let out_dir = dir.path().join("out");
    let out = toy_flags(bin().args([
        "ablate",
        img.to_str().unwrap(),
        "--remove",
        "top:3",
        "--out",
        out_dir.to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_code(&out, 0);
    let ablation = read_json(&out_dir.join("img.ablation.json"));
    assert_eq!(ablation["schema"], "gswa-ablation/1");
    assert_eq!(ablation["requested_setting"], "top");
    let settings = ablation["comparison"]["settings"].as_array().unwrap();
    assert_eq!(settings.len(), 3);
    // 16px tiles, 4px patches: 16 patch tokens -> 4 + cls = 5 per image
    let baseline_tokens = ablation["comparison"]["baseline_tokens"].as_u64().unwrap();
    for outcome in settings {
        assert_eq!(outcome["survivors"].as_array().unwrap().len(), 3);
        assert_eq!(
            outcome["surviving_tokens"].as_u64().unwrap(),
            baseline_tokens - 3 * 5
        );
    }
}

#[test]
fn ablate_infeasible_k_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "img.png", 60, 80, true);
    let out = toy_flags(bin().args([
        "ablate",
        img.to_str().unwrap(),
        "--remove",
        "top:9",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_code(&out, 4);
    // second-top needs 2k <= N: k=4 on 6 tiles is infeasible for it alone
    let out = toy_flags(bin().args([
        "ablate",
        img.to_str().unwrap(),
        "--remove",
        "second-top:4",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_code(&out, 4);
}

#[test]
fn init_params_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.gswa");
    let p2 = dir.path().join("b.gswa");
    for p in [&p1, &p2] {
        let out = toy_flags(bin().args(["init-params", "--seed", "9"]))
            .args(["--out", p.to_str().unwrap()])
            .output()
            .unwrap();
        assert_code(&out, 0);
    }
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn verify_rejects_corrupted_manifest_with_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.gswa");
    let out = toy_flags(bin().args(["init-params", "--seed", "3"]))
        .args(["--out", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_code(&out, 0);

    // tamper: grow one declared shape without growing the blob
    let bytes = std::fs::read(&path).unwrap();
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest = String::from_utf8(bytes[16..16 + mlen].to_vec()).unwrap();
    let tampered = manifest.replacen("\"shape\":[8]", "\"shape\":[9]", 1);
    assert_ne!(manifest, tampered);
    let mut corrupted = Vec::new();
    corrupted.extend_from_slice(&bytes[0..8]);
    corrupted.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
    corrupted.extend_from_slice(tampered.as_bytes());
    corrupted.extend_from_slice(&bytes[16 + mlen..]);
    std::fs::write(&path, corrupted).unwrap();

    let out = bin()
        .args([
            "verify",
            "--suite",
            "shuffle",
            "--params",
            path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_code(&out, 5);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("enc.") || stderr.contains("gswa.") || stderr.contains("proj."),
        "error should name a tensor: {stderr}"
    );
}

#[test]
fn verify_fresh_params_passes_all_suites() {
    let out = bin().args(["verify", "--suite", "all"]).output().unwrap();
    assert_code(&out, 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS simplex"));
    assert!(stdout.contains("PASS shuffle-inversion"));
    assert!(stdout.contains("PASS gradient-check"));
    assert!(!stdout.contains("FAIL"));
    // machine-readable summary on the last line
    let last = stdout.lines().last().unwrap();
    let summary: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(summary["failed"], 0);
}

#[test]
fn env_seed_applies_only_without_flag() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "img.png", 48, 64, true);

    let run = |seed_flag: Option<&str>, env: Option<&str>, sub: &str| -> serde_json::Value {
        let out_dir = dir.path().join(sub);
        let mut cmd = bin();
        toy_flags(cmd.args([
            "weigh",
            img.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]));
        if let Some(seed) = seed_flag {
            cmd.args(["--seed", seed]);
        }
        if let Some(v) = env {
            cmd.env("GSWA_SEED", v);
        }
        assert_code(&cmd.output().unwrap(), 0);
        read_json(&out_dir.join("img.report.json"))
    };

    let with_flag = run(Some("7"), None, "a");
    let with_env = run(None, Some("7"), "b");
    let flag_beats_env = run(Some("7"), Some("99"), "c");
    assert_eq!(with_flag["seed"], 7);
    assert_eq!(with_env["seed"], 7);
    assert_eq!(flag_beats_env["seed"], 7);
    assert_eq!(with_flag, with_env);
    assert_eq!(with_flag, flag_beats_env);
}

#[test]
fn config_file_is_applied_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let img = write_fixture(dir.path(), "img.png", 48, 64, true);
    let config_path = dir.path().join("run.json");
    std::fs::write(
        &config_path,
        r#"{"tile_size":16,"patch_size":4,"depth":1,"dim":8,"gswa_dim":16,"gswa_blocks":2,"gswa_heads":2,"proj_dim":8,"strategy":"cosine-similarity","seed":11}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = bin()
        .args([
            "weigh",
            img.to_str().unwrap(),
            "--config",
            config_path.to_str().unwrap(),
            "--strategy",
            "self-attn",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_code(&out, 0);
    let report = read_json(&out_dir.join("img.report.json"));
    assert_eq!(report["seed"], 11, "config file seed applies");
    assert_eq!(report["strategy"], "self-attn", "flag overrides config");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let out = bin()
        .args([
            "weigh",
            img.to_str().unwrap(),
            "--config",
            bad.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_code(&out, 3);
}

#[test]
fn jobs_flag_processes_multiple_images() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_fixture(dir.path(), "a.png", 48, 64, true);
    let b = write_fixture(dir.path(), "b.png", 32, 32, false);
    let out_dir = dir.path().join("out");
    let out = toy_flags(bin().args([
        "weigh",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--jobs",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]))
    .output()
    .unwrap();
    assert_code(&out, 0);
    assert!(out_dir.join("a.report.json").exists());
    assert!(out_dir.join("b.report.json").exists());
}

//! End-to-end tests of the `hdrslam` binary: exit codes, the
//! generate/run/eval/render loop, determinism, and renderer/eval agreement.

use std::path::Path;
use std::process::{Command, Output};

use hdrslam_core::dataset::Dataset;
use hdrslam_core::geometry::write_trajectory;
use hdrslam_core::img::read_pfm;
use hdrslam_core::map::{write_checkpoint, ExtraArrays, RadianceMap};
use hdrslam_core::metrics::{display_image, geometric_mean_dt, psnr, read_metrics};
use hdrslam_core::synthgen::{generate, SequenceSpec};

fn hdrslam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdrslam"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// A small dataset most tests share the shape of: 4 frames of the room scene.
fn gen_dataset(dir: &Path) {
    let out = hdrslam(&[
        "gen", "--scene", "room", "--frames", "4", "--width", "28", "--height", "20",
        "--seed", "5", "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "gen failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        r#"{
  "seed": 11,
  "geometry": {"n_cam": 3},
  "map": {"resolution": [20, 20, 20], "n_samples": 14, "far": 9.0},
  "optim": {"tracking_iters": 25, "mapping_iters": 10, "lr_tracking": 1e-3,
            "pixels_tracking": 128, "pixels_mapping": 256},
  "slam": {"mapping_every": 3}
}
"#,
    )
    .unwrap();
}

#[test]
fn bad_arguments_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("x");
    let out_str = out_dir.to_str().unwrap();

    let cases: Vec<Vec<&str>> = vec![
        vec!["gen", "--scene", "room", "--frames", "0", "--out", out_str],
        vec!["gen", "--scene", "atlantis", "--out", out_str],
        vec!["gen", "--scene", "room", "--fps", "-5", "--out", out_str],
        vec!["run", "--dataset", out_str, "--ablate", "everything", "--out", out_str],
        vec!["run", "--dataset", out_str, "--ncam", "0", "--out", out_str],
    ];
    for args in cases {
        let out = hdrslam(&args);
        assert_eq!(code(&out), 2, "args {args:?} -> {}", String::from_utf8_lossy(&out.stderr));
    }

    // Config problems are argument problems: unknown keys and bad values.
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"bogus_key": 1}"#).unwrap();
    let out = hdrslam(&["run", "--dataset", out_str, "--config", cfg.to_str().unwrap(),
                        "--out", out_str]);
    assert_eq!(code(&out), 2);
    std::fs::write(&cfg, r#"{"map": {"n_samples": 0}}"#).unwrap();
    let out = hdrslam(&["run", "--dataset", out_str, "--config", cfg.to_str().unwrap(),
                        "--out", out_str]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let nowhere = tmp.path().join("nowhere");
    let nowhere = nowhere.to_str().unwrap();
    let out_dir = tmp.path().join("out");
    let out_str = out_dir.to_str().unwrap();

    let out = hdrslam(&["run", "--dataset", nowhere, "--out", out_str]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = hdrslam(&["eval", "--result", nowhere, "--dataset", nowhere,
                        "--out", out_str]);
    assert_eq!(code(&out), 3);

    let out = hdrslam(&["render", "--checkpoint", nowhere, "--trajectory", nowhere,
                        "--out", out_str]);
    assert_eq!(code(&out), 3);

    // A config path that does not exist is an I/O failure, not a bad value.
    gen_dataset(&out_dir);
    let out = hdrslam(&["run", "--dataset", out_str, "--config", nowhere,
                        "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn run_is_deterministic_and_archives_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_dataset(&data);
    let cfg = tmp.path().join("cfg.json");
    write_tiny_config(&cfg);

    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let res = tmp.path().join(name);
        let out = hdrslam(&[
            "run", "--dataset", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
            "--out", res.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        dirs.push(res);
    }
    for file in ["trajectory.txt", "losses.csv", "crf.txt", "tonemap.txt", "map.ckpt"] {
        let a = std::fs::read(dirs[0].join(file)).unwrap();
        let b = std::fs::read(dirs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }

    // Re-running from the archived config alone reproduces the result.
    let res = tmp.path().join("c");
    let out = hdrslam(&[
        "run", "--dataset", data.to_str().unwrap(),
        "--config", dirs[0].join("config.json").to_str().unwrap(),
        "--out", res.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let a = std::fs::read(dirs[0].join("trajectory.txt")).unwrap();
    let b = std::fs::read(res.join("trajectory.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablation_flag_is_archived_and_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_dataset(&data);
    let cfg = tmp.path().join("cfg.json");
    write_tiny_config(&cfg);

    let full = tmp.path().join("full");
    let ablated = tmp.path().join("ablated");
    for (dir, extra) in [(&full, None), (&ablated, Some("tonemap"))] {
        let mut args = vec![
            "run", "--dataset", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
            "--out", dir.to_str().unwrap(),
        ];
        if let Some(mode) = extra {
            args.extend(["--ablate", mode]);
        }
        let out = hdrslam(&args);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }

    let archived = std::fs::read_to_string(ablated.join("config.json")).unwrap();
    assert!(archived.contains("\"ablate\": \"tonemap\""), "{archived}");

    // The frozen tone stage writes an identity response curve.
    let full_crf = std::fs::read(full.join("crf.txt")).unwrap();
    let ablated_crf = std::fs::read(ablated.join("crf.txt")).unwrap();
    assert_ne!(full_crf, ablated_crf);
}

#[test]
fn eval_scores_ground_truth_as_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut spec = SequenceSpec::new("room");
    spec.n_frames = 4;
    spec.width = 28;
    spec.height = 20;
    spec.seed = 5;
    let seq = generate(&spec, &data).unwrap();

    // A result directory holding the generator's own scene and trajectory.
    let result = tmp.path().join("result");
    std::fs::create_dir_all(&result).unwrap();
    write_checkpoint(
        &result.join("map.ckpt"),
        &RadianceMap::Voxel(seq.scene.clone()),
        &ExtraArrays::new(),
    )
    .unwrap();
    let fps = seq.meta.fps;
    let points: Vec<_> = seq
        .windows
        .iter()
        .enumerate()
        .map(|(i, w)| hdrslam_core::geometry::TrajectoryPoint {
            t: i as f64 / fps,
            pose: w.center.clone(),
        })
        .collect();
    write_trajectory(&result.join("trajectory.txt"), &points).unwrap();

    let metrics = tmp.path().join("metrics.json");
    let out = hdrslam(&[
        "eval", "--result", result.to_str().unwrap(), "--dataset", data.to_str().unwrap(),
        "--out", metrics.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let report = read_metrics(&metrics).unwrap();
    assert!(report.ate_rmse_m < 1e-6, "ATE {}", report.ate_rmse_m);
    assert!(report.mean_psnr_db.unwrap() > 40.0, "PSNR {:?}", report.mean_psnr_db);
    assert!(report.mean_ssim.unwrap() > 0.99, "SSIM {:?}", report.mean_ssim);
    assert!(report.mean_depth_l1_cm.unwrap() < 15.0, "depth {:?}", report.mean_depth_l1_cm);
    let k = report.exposure_scale.unwrap();
    assert!((k - 1.0).abs() < 0.05, "gauge {k}");
}

#[test]
fn render_replays_the_evaluated_quality() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_dataset(&data);
    let cfg = tmp.path().join("cfg.json");
    write_tiny_config(&cfg);
    let res = tmp.path().join("res");
    let out = hdrslam(&[
        "run", "--dataset", data.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--out", res.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let metrics = tmp.path().join("metrics.json");
    let out = hdrslam(&[
        "eval", "--result", res.to_str().unwrap(), "--dataset", data.to_str().unwrap(),
        "--out", metrics.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_metrics(&metrics).unwrap();

    // Re-render the estimated trajectory through the `render` command and
    // recompute PSNR the way `eval` defines it; the two paths must agree.
    let replay = tmp.path().join("replay");
    let out = hdrslam(&[
        "render", "--checkpoint", res.join("map.ckpt").to_str().unwrap(),
        "--trajectory", res.join("trajectory.txt").to_str().unwrap(),
        "--hdr", "--out", replay.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let ds = Dataset::load(&data).unwrap();
    let dts: Vec<f64> = ds.meta.frames.iter().map(|f| f.dt).collect();
    let dt_ref = geometric_mean_dt(&dts);
    let k = report.exposure_scale.unwrap();
    let mut mean = 0.0;
    for i in 0..ds.n_frames() {
        let pred = read_pfm(&replay.join(format!("{i:06}.pfm"))).unwrap();
        let gt = ds.load_sharp_hdr(i).unwrap();
        let dp = display_image(&pred, dt_ref * k);
        let dg = display_image(&gt, dt_ref);
        mean += psnr(&dp, &dg, 1.0).unwrap() / ds.n_frames() as f64;
    }
    let logged = report.mean_psnr_db.unwrap();
    assert!(
        (mean - logged).abs() < 0.01,
        "replayed PSNR {mean:.4} dB vs logged {logged:.4} dB"
    );

    // Exposure linearity: doubling `--exposure` doubles the radiance output.
    let one_pose = tmp.path().join("one.txt");
    let first_line = std::fs::read_to_string(res.join("trajectory.txt"))
        .unwrap()
        .lines()
        .find(|l| !l.starts_with('#') && !l.trim().is_empty())
        .unwrap()
        .to_string();
    std::fs::write(&one_pose, format!("{first_line}\n")).unwrap();
    let mut rendered = Vec::new();
    for (name, exposure) in [("e1", "1"), ("e2", "2")] {
        let dir = tmp.path().join(name);
        let out = hdrslam(&[
            "render", "--checkpoint", res.join("map.ckpt").to_str().unwrap(),
            "--trajectory", one_pose.to_str().unwrap(), "--hdr",
            "--exposure", exposure, "--out", dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        rendered.push(read_pfm(&dir.join("000000.pfm")).unwrap());
    }
    for (a, b) in rendered[0].data.iter().zip(&rendered[1].data) {
        for c in 0..3 {
            let scaled = (2.0 * a[c]) as f32;
            assert!(
                (scaled - b[c] as f32).abs() <= f32::EPSILON * scaled.abs().max(1.0),
                "{} vs {}",
                2.0 * a[c],
                b[c]
            );
        }
    }
}

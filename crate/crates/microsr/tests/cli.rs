//! End-to-end exercises of the `microsr` binary.

use std::path::Path;
use std::process::{Command, Output};

fn microsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microsr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = microsr(args);
    assert!(
        out.status.success(),
        "`microsr {}` failed:\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn with_cfg<'a>(config: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", config];
    v.extend_from_slice(extra);
    v
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                entries.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    entries.sort();
    entries
}

/// Toy-scale configuration shared by the pipeline tests.
const TOY_CONFIG: &str = r#"
seed = 7

[degradation]
sigma = 1.2
noise_variance = 1e-4
factor = 2

[dataset]
patch_lr = 16
stride = 56

[generator]
n_res_blocks = 1
n_features = 4
upscale = 2
channels = 1

[discriminator]
base_features = 2
input_size = 32
channels = 1

[features]
widths = [4, 4]
pools_after = [1]
channels = 1
seed = 3

[training]
batch_size = 8
epochs = 1
checkpoint_interval = 0
"#;

#[test]
fn make_fixtures_is_byte_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    ok(&["make-fixtures", "--seed", "7", "--out", a.to_str().unwrap()]);
    ok(&["make-fixtures", "--seed", "7", "--out", b.to_str().unwrap()]);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert!(a.join("texture_512.png").exists());
    assert!(a.join("train/bars.png").exists());
    assert!(a.join("config_echo.toml").exists());
}

#[test]
fn degrade_and_calibrate_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let fixtures = root.path().join("fix");
    ok(&["make-fixtures", "--seed", "3", "--out", fixtures.to_str().unwrap()]);

    let hr = fixtures.join("train/blobs_00.png");
    let lr = root.path().join("lr.png");
    ok(&[
        "degrade",
        "--input",
        hr.to_str().unwrap(),
        "--params",
        r#"{"sigma": 1.5, "noise_variance": 1e-4, "factor": 4}"#,
        "--out",
        lr.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(root.path().join("lr.config_echo.toml").exists());

    let calib = root.path().join("calib");
    let stdout = ok(&[
        "calibrate",
        "--hr",
        hr.to_str().unwrap(),
        "--lr",
        lr.to_str().unwrap(),
        "--sigma-grid",
        "1.0:2.0:0.25",
        "--var-grid",
        "5e-5,1e-4,2e-4",
        "--out",
        calib.to_str().unwrap(),
    ]);
    assert!(stdout.contains("calibrated"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(calib.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["best_sigma"], 1.5);
    assert_eq!(report["best_variance"], 1e-4);
    assert_eq!(report["factor"], 4);
    assert!(calib.join("residual.png").exists());
    assert!(calib.join("config_echo.toml").exists());
}

#[test]
fn full_pipeline_runs_and_infer_matches_shape_contract() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("toy.toml");
    std::fs::write(&config, TOY_CONFIG).unwrap();
    let config = config.to_str().unwrap().to_string();

    let fixtures = root.path().join("fix");
    ok(&with_cfg(&config, &["make-fixtures", "--out", fixtures.to_str().unwrap()]));

    // Small source set for speed.
    let hr_dir = root.path().join("hr");
    std::fs::create_dir(&hr_dir).unwrap();
    for name in ["tex_00.png", "blobs_00.png", "bars.png"] {
        std::fs::copy(fixtures.join("train").join(name), hr_dir.join(name)).unwrap();
    }

    let dataset = root.path().join("dataset");
    let stdout = ok(&with_cfg(&config, &[
        "build-dataset",
        "--hr-dir",
        hr_dir.to_str().unwrap(),
        "--out",
        dataset.to_str().unwrap(),
    ]));
    assert!(stdout.contains("pairs"), "{stdout}");
    assert!(dataset.join("manifest.json").exists());

    let train_out = root.path().join("train");
    ok(&with_cfg(&config, &[
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
    ]));
    let ckpt = train_out.join("checkpoints/epoch_0001.ckpt");
    assert!(ckpt.exists());
    assert!(train_out.join("loss_log.csv").exists());
    assert!(train_out.join("run_summary.json").exists());

    // 100x140 input at upscale 2 -> 200x280 output.
    let input = root.path().join("input.png");
    let img = microsr::fixtures::filtered_texture(5, 140);
    let cropped = img.crop(0, 0, 100, 140).unwrap();
    microsr::raster::save_image(&cropped, &input, 16).unwrap();
    let sr_path = root.path().join("sr.png");
    ok(&with_cfg(&config, &[
        "infer",
        "--input",
        input.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--tile",
        "64",
        "--overlap",
        "16",
        "--out",
        sr_path.to_str().unwrap(),
        "--benchmark",
    ]));
    let sr = microsr::raster::load_image(&sr_path).unwrap();
    assert_eq!((sr.height(), sr.width()), (200, 280));
    let timing: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(root.path().join("sr.timing.json")).unwrap(),
    )
    .unwrap();
    assert!(timing["tile_count"].as_u64().unwrap() > 0);

    let eval_out = root.path().join("eval");
    let stdout = ok(&with_cfg(&config, &[
        "evaluate",
        "--dataset",
        dataset.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("bicubic interpolation"));
    assert!(stdout.contains("high-resolution target"));
    assert!(eval_out.join("report.csv").exists());
    assert!(eval_out.join("report.txt").exists());
}

#[test]
fn resume_flag_continues_training() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("toy.toml");
    std::fs::write(&config, TOY_CONFIG.replace("epochs = 1", "epochs = 2")).unwrap();

    let fixtures = root.path().join("fix");
    ok(&[
        "--config",
        config.to_str().unwrap(),
        "make-fixtures",
        "--out",
        fixtures.to_str().unwrap(),
    ]);
    let hr_dir = root.path().join("hr");
    std::fs::create_dir(&hr_dir).unwrap();
    for name in ["tex_00.png", "tex_01.png", "blobs_00.png"] {
        std::fs::copy(fixtures.join("train").join(name), hr_dir.join(name)).unwrap();
    }
    let dataset = root.path().join("dataset");
    ok(&[
        "--config",
        config.to_str().unwrap(),
        "build-dataset",
        "--hr-dir",
        hr_dir.to_str().unwrap(),
        "--out",
        dataset.to_str().unwrap(),
    ]);

    let first = root.path().join("first");
    ok(&[
        "--config",
        config.to_str().unwrap(),
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        first.to_str().unwrap(),
    ]);
    let resumed = root.path().join("resumed");
    ok(&[
        "--config",
        config.to_str().unwrap(),
        "train",
        "--dataset",
        dataset.to_str().unwrap(),
        "--epochs",
        "2",
        "--resume",
        first.join("checkpoints/epoch_0001.ckpt").to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert!(resumed.join("checkpoints/epoch_0002.ckpt").exists());
}

#[test]
fn bad_inputs_fail_with_diagnostics() {
    // Unknown config key.
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("bad.toml");
    std::fs::write(&config, "bogus_key = 1\n").unwrap();
    let out = microsr(&[
        "--config",
        config.to_str().unwrap(),
        "make-fixtures",
        "--out",
        root.path().join("x").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("bogus_key"), "{stderr}");

    // Missing input image.
    let out = microsr(&[
        "degrade",
        "--input",
        "/no/such/image.png",
        "--out",
        root.path().join("y.png").to_str().unwrap(),
    ]);
    assert!(!out.status.success());

    // Malformed grid.
    let out = microsr(&[
        "calibrate",
        "--hr",
        "/no/such.png",
        "--lr",
        "/no/such2.png",
        "--sigma-grid",
        "nonsense",
        "--var-grid",
        "1e-4",
        "--out",
        root.path().join("z").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

//! End-to-end exercises of the command-line surface and its exit codes.

use std::path::Path;
use std::process::Command;

use dfmnet_core::dfmw;
use dfmnet_core::model::{DfmNet, ModelConfig};

fn dfmnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dfmnet"))
}

fn write_weights(path: &Path, cfg: ModelConfig) {
    let (_, store) = DfmNet::init(cfg, 9).unwrap();
    dfmw::save_store(path, &store).unwrap();
}

/// A small grayscale gradient with a bright square; serves as rgb (via
/// png color), depth and gt alike.
fn write_png(path: &Path, hw: u32, square: bool, color: bool) {
    if color {
        let img = image::ImageBuffer::from_fn(hw, hw, |x, y| {
            let inside = square && x > hw / 4 && x < 3 * hw / 4 && y > hw / 4 && y < 3 * hw / 4;
            if inside {
                image::Rgb([220u8, 40, 60])
            } else {
                image::Rgb([(x * 255 / hw) as u8, (y * 255 / hw) as u8, 90])
            }
        });
        img.save(path).unwrap();
    } else {
        let img = image::ImageBuffer::from_fn(hw, hw, |x, y| {
            let inside = square && x > hw / 4 && x < 3 * hw / 4 && y > hw / 4 && y < 3 * hw / 4;
            image::Luma([if inside { 230u8 } else { 25 }])
        });
        img.save(path).unwrap();
    }
}

fn make_dataset(root: &Path, n: usize) {
    for sub in ["rgb", "depth", "gt"] {
        std::fs::create_dir_all(root.join(sub)).unwrap();
    }
    for i in 0..n {
        write_png(&root.join(format!("rgb/s{i}.png")), 64, true, true);
        write_png(&root.join(format!("depth/s{i}.png")), 64, true, false);
        write_png(&root.join(format!("gt/s{i}.png")), 64, true, false);
    }
}

#[test]
fn infer_single_pair_writes_256_png() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.dfmw");
    write_weights(&w, ModelConfig::default());
    write_png(&dir.path().join("a.png"), 100, true, true);
    write_png(&dir.path().join("d.png"), 80, true, false);
    let out = dir.path().join("s.png");
    let status = dfmnet()
        .args(["infer", "--weights"])
        .arg(&w)
        .arg("--rgb")
        .arg(dir.path().join("a.png"))
        .arg("--depth")
        .arg(dir.path().join("d.png"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let img = image::open(&out).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));
    assert!(matches!(img.color(), image::ColorType::L8));
}

#[test]
fn unknown_flag_exits_1() {
    let status = dfmnet().args(["infer", "--does-not-exist"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn missing_required_flag_exits_1() {
    let out = dfmnet().args(["eval", "--pred", "/tmp"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--gt"), "stderr: {err}");
}

#[test]
fn missing_depth_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.dfmw");
    write_weights(&w, ModelConfig::default());
    write_png(&dir.path().join("a.png"), 64, true, true);
    let out = dfmnet()
        .args(["infer", "--weights"])
        .arg(&w)
        .arg("--rgb")
        .arg(dir.path().join("a.png"))
        .arg("--depth")
        .arg(dir.path().join("nope.png"))
        .arg("--out")
        .arg(dir.path().join("s.png"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("missing file"), "stderr: {err}");
}

#[test]
fn corrupt_weights_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.dfmw");
    std::fs::write(&w, b"not a weight file").unwrap();
    write_png(&dir.path().join("a.png"), 64, true, true);
    write_png(&dir.path().join("d.png"), 64, true, false);
    let out = dfmnet()
        .args(["infer", "--weights"])
        .arg(&w)
        .arg("--rgb")
        .arg(dir.path().join("a.png"))
        .arg("--depth")
        .arg(dir.path().join("d.png"))
        .arg("--out")
        .arg(dir.path().join("s.png"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_options_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.dfmw");
    write_weights(&w, ModelConfig::default());
    write_png(&dir.path().join("a.png"), 64, true, true);
    write_png(&dir.path().join("d.png"), 64, true, false);
    let cfg_out = dir.path().join("from_config.png");
    let flag_out = dir.path().join("from_flag.png");
    let config = dir.path().join("c.json");
    std::fs::write(
        &config,
        format!(
            r#"{{"weights": "{}", "rgb": "{}", "depth": "{}", "out": "{}"}}"#,
            w.display(),
            dir.path().join("a.png").display(),
            dir.path().join("d.png").display(),
            cfg_out.display()
        ),
    )
    .unwrap();
    // config alone supplies everything
    let status = dfmnet().args(["infer", "--config"]).arg(&config).status().unwrap();
    assert!(status.success());
    assert!(cfg_out.exists());
    // an explicit flag overrides the config value
    let status = dfmnet()
        .args(["infer", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&flag_out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(flag_out.exists());
}

#[test]
fn eval_writes_csv_with_columns() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let gt = dir.path().join("gt");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for i in 0..2 {
        // exact binary maps so the perfect-match scores are exact
        let img = image::ImageBuffer::from_fn(32, 32, |x, y| {
            image::Luma([if x > 8 && x < 24 && y > 8 && y < 24 { 255u8 } else { 0 }])
        });
        img.save(pred.join(format!("x{i}.png"))).unwrap();
        img.save(gt.join(format!("x{i}.png"))).unwrap();
    }
    let out = dir.path().join("scores.csv");
    let status = dfmnet()
        .args(["eval", "--pred"])
        .arg(&pred)
        .arg("--gt")
        .arg(&gt)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("id,s_alpha,f_max,e_max,mae"));
    assert_eq!(lines.count(), 2);
    // prediction equals ground truth, so the perfect-match row scores 1,1,1,0
    let row = text.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[0], "x0");
    assert!(fields[1].parse::<f64>().unwrap() > 0.99);
    assert!(fields[4].parse::<f64>().unwrap() < 0.01);
}

#[test]
fn quality_audit_csv() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs");
    std::fs::create_dir_all(pairs.join("rgb")).unwrap();
    std::fs::create_dir_all(pairs.join("depth")).unwrap();
    for i in 0..3 {
        write_png(&pairs.join(format!("rgb/p{i}.png")), 48, true, true);
        write_png(&pairs.join(format!("depth/p{i}.png")), 48, true, false);
    }
    let out = dir.path().join("report.csv");
    let status = dfmnet()
        .args(["quality", "--pairs"])
        .arg(&pairs)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("id,c_dice,alpha_bar"));
    assert_eq!(text.lines().count(), 4);
    // shared geometry: aligned dice is high
    let dice: f64 = text.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(dice > 0.5, "aligned pair dice {dice}");

    // shuffled variant also runs
    let out2 = dir.path().join("report2.csv");
    let status = dfmnet()
        .args(["quality", "--shuffle", "--pairs"])
        .arg(&pairs)
        .arg("--out")
        .arg(&out2)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.dfmw");
    write_weights(&w, ModelConfig::default());
    let out = dir.path().join("bench.csv");
    let status = dfmnet()
        .args(["bench", "--weights"])
        .arg(&w)
        .args(["--batch", "1,2", "--n", "2", "--input-size", "128", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("batch,s_fps"));
    assert_eq!(text.lines().count(), 3);
    for line in text.lines().skip(1) {
        let fps: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(fps > 0.0);
    }
}

#[test]
fn train_smoke_then_infer_with_ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_dataset(&data, 2);
    let w = dir.path().join("trained.dfmw");
    let status = dfmnet()
        .args(["train", "--data"])
        .arg(&data)
        .args([
            "--epochs", "1", "--steps", "1", "--batch-size", "2", "--seed", "3",
            "--no-dha", "--recalib-count", "0", "--no-augment", "--out",
        ])
        .arg(&w)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(w.exists());

    // inference derives the ablated structure from the file
    let out = dir.path().join("s.png");
    let status = dfmnet()
        .args(["infer", "--weights"])
        .arg(&w)
        .arg("--rgb")
        .arg(data.join("rgb/s0.png"))
        .arg("--depth")
        .arg(data.join("depth/s0.png"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    // but contradicting flags are an error
    let outp = dfmnet()
        .args(["infer", "--no-dqw", "--weights"])
        .arg(&w)
        .arg("--rgb")
        .arg(data.join("rgb/s0.png"))
        .arg("--depth")
        .arg(data.join("depth/s0.png"))
        .arg("--out")
        .arg(dir.path().join("t.png"))
        .output()
        .unwrap();
    assert_eq!(outp.status.code(), Some(2));
}

#[test]
fn flow_mode_train_pairs_with_flow_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for sub in ["rgb", "flow", "gt"] {
        std::fs::create_dir_all(data.join(sub)).unwrap();
    }
    for i in 0..2 {
        write_png(&data.join(format!("rgb/v{i}.png")), 48, true, true);
        write_png(&data.join(format!("flow/v{i}.png")), 48, true, true);
        write_png(&data.join(format!("gt/v{i}.png")), 48, true, false);
    }
    let w = dir.path().join("flow.dfmw");
    let status = dfmnet()
        .args(["train", "--mode", "flow3", "--data"])
        .arg(&data)
        .args(["--epochs", "1", "--steps", "1", "--batch-size", "2", "--no-augment", "--out"])
        .arg(&w)
        .status()
        .unwrap();
    assert!(status.success());

    // rgbd-mode inference against flow weights is a mode mismatch
    write_png(&dir.path().join("d.png"), 48, true, false);
    let outp = dfmnet()
        .args(["infer", "--mode", "rgbd", "--weights"])
        .arg(&w)
        .arg("--rgb")
        .arg(data.join("rgb/v0.png"))
        .arg("--depth")
        .arg(dir.path().join("d.png"))
        .arg("--out")
        .arg(dir.path().join("s.png"))
        .output()
        .unwrap();
    assert_eq!(outp.status.code(), Some(2));
}

#[test]
fn infer_directory_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_dataset(&data, 2);
    let w = dir.path().join("w.dfmw");
    write_weights(&w, ModelConfig::default());
    let maps = dir.path().join("maps");
    let status = dfmnet()
        .args(["infer", "--weights"])
        .arg(&w)
        .arg("--data")
        .arg(&data)
        .arg("--out-dir")
        .arg(&maps)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(maps.join("s0.png").exists());
    assert!(maps.join("s1.png").exists());
}

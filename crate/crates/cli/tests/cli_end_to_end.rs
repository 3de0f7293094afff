//! Drives the binary end to end on a miniature synthetic data layout:
//! train -> eval -> ablate -> trace, plus config error paths.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_recon-attn"))
}

/// Digit-like glyphs: bar positions encode the class.
fn glyph(class: u8, jitter: i32) -> [[u8; 28]; 28] {
    let mut img = [[0u8; 28]; 28];
    let vcol = (4 + 4 * (class as i32 % 5) + jitter).clamp(0, 27) as usize;
    let hrow = if class < 5 { 8usize } else { 18 };
    for r in 4..24 {
        img[r][vcol] = 230;
    }
    for c in 4..24 {
        img[hrow][c] = 230;
    }
    img
}

fn write_idx(dir: &Path, prefix: &str, n: usize, seed: u64) {
    let mut imgs = File::create(dir.join(format!("{prefix}-images-idx3-ubyte"))).unwrap();
    imgs.write_all(&0x0000_0803u32.to_be_bytes()).unwrap();
    imgs.write_all(&(n as u32).to_be_bytes()).unwrap();
    imgs.write_all(&28u32.to_be_bytes()).unwrap();
    imgs.write_all(&28u32.to_be_bytes()).unwrap();
    let mut labels = File::create(dir.join(format!("{prefix}-labels-idx1-ubyte"))).unwrap();
    labels.write_all(&0x0000_0801u32.to_be_bytes()).unwrap();
    labels.write_all(&(n as u32).to_be_bytes()).unwrap();
    let mut state = seed;
    for i in 0..n {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let class = (i % 10) as u8;
        let jitter = ((state >> 33) % 5) as i32 - 2;
        let img = glyph(class, jitter);
        for row in &img {
            imgs.write_all(row).unwrap();
        }
        labels.write_all(&[class]).unwrap();
    }
}

fn write_npy(path: &Path, descr: &str, shape: &[usize], data: &[u8]) {
    let shape_txt = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header =
        format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_txt}, }}");
    let total = 10 + header.len();
    let pad = (64 - total % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut f = File::create(path).unwrap();
    f.write_all(b"\x93NUMPY\x01\x00").unwrap();
    f.write_all(&(header.len() as u16).to_le_bytes()).unwrap();
    f.write_all(header.as_bytes()).unwrap();
    f.write_all(data).unwrap();
}

fn write_corruption(root: &Path, name: &str, n: usize) {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let mut pixels = Vec::with_capacity(n * 28 * 28);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = (i % 10) as u8;
        let img = glyph(class, (i % 5) as i32 - 2);
        for row in &img {
            pixels.extend_from_slice(row);
        }
        labels.push(class);
    }
    write_npy(&dir.join("test_images.npy"), "|u1", &[n, 28, 28, 1], &pixels);
    write_npy(&dir.join("test_labels.npy"), "|u1", &[n], &labels);
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    runs: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let mnist = root.join("data/mnist");
    std::fs::create_dir_all(&mnist).unwrap();
    write_idx(&mnist, "train", 160, 1);
    write_idx(&mnist, "t10k", 40, 2);
    let mnist_c = root.join("data/mnist_c");
    std::fs::create_dir_all(&mnist_c).unwrap();
    std::fs::write(mnist_c.join("manifest.txt"), "fog\nzigzag\n").unwrap();
    write_corruption(&mnist_c, "fog", 30);
    write_corruption(&mnist_c, "zigzag", 30);
    write_corruption(&mnist_c, "identity", 30);
    let runs = root.join("runs");
    let config = root.join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "batch_size = 32\ninitial_lr = 0.001\nshape_subset = fog\n\
             data_root = {}\nout_dir = {}\n",
            root.join("data").display(),
            runs.display()
        ),
    )
    .unwrap();
    Fixture {
        _tmp: tmp,
        root,
        config,
        runs,
    }
}

#[test]
fn train_eval_ablate_trace_pipeline() {
    let fx = fixture();
    let status = bin()
        .args([
            "train",
            "--config",
            fx.config.to_str().unwrap(),
            "--max-epochs",
            "1",
            "--quiet",
        ])
        .status()
        .unwrap();
    assert!(status.success(), "train failed");
    let ckpt = fx.runs.join("caps_conv2_full_spectrum_seed0.ckpt");
    assert!(ckpt.is_file(), "checkpoint missing");
    assert!(fx.runs.join("config.used").is_file());
    let log = std::fs::read_to_string(fx.runs.join("caps_conv2_full_spectrum_seed0.train_log.csv"))
        .unwrap();
    assert!(log.starts_with("epoch,lr,train_loss,val_accuracy"));

    let out = bin()
        .args([
            "eval",
            "--config",
            fx.config.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--limit",
            "12",
            "--sweep-thresholds",
            "0.4,0.8",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mnist_c_mean"), "{stdout}");
    assert!(stdout.contains("entropy-threshold sweep"), "{stdout}");
    assert!(stdout.contains("eta 0.400"), "{stdout}");
    assert!(stdout.contains("identity (clean) accuracy"), "{stdout}");
    let report = std::fs::read_dir(&fx.runs)
        .unwrap()
        .filter_map(|e| e.ok())
        .find(|e| {
            let n = e.file_name().to_string_lossy().to_string();
            n.starts_with("report_") && n.ends_with(".csv")
        })
        .expect("report csv written");
    let csv = std::fs::read_to_string(report.path()).unwrap();
    assert!(csv.contains("aggregate_mnist_c_mean"));
    assert!(csv.contains("fog,"));

    let out = bin()
        .args([
            "ablate",
            "--config",
            fx.config.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--limit",
            "8",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "ablate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for arm in ["full", "no_spatial_mask", "no_feature_binding", "neither"] {
        assert!(
            fx.runs.join(format!("ablation_{arm}.csv")).is_file(),
            "missing arm {arm}"
        );
    }

    let out = bin()
        .args([
            "trace",
            "--config",
            fx.config.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--corruption",
            "fog",
            "--index",
            "3",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "trace failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace_dir = fx.runs.join("trace_fog_3");
    assert!(trace_dir.join("step_01/reconstruction.pgm").is_file());
    assert!(trace_dir.join("step_01/routing_iter_0.csv").is_file());
    assert!(trace_dir.join("summary.txt").is_file());
}

#[test]
fn train_baseline_produces_checkpoint() {
    let fx = fixture();
    let status = bin()
        .args([
            "train-baseline",
            "--config",
            fx.config.to_str().unwrap(),
            "--max-epochs",
            "1",
            "--quiet",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = fx.runs.join("baseline_conv2_seed0.ckpt");
    assert!(ckpt.is_file());
    let out = bin()
        .args([
            "eval",
            "--config",
            fx.config.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--baseline",
            "--limit",
            "10",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "baseline eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    // feed-forward baseline: reaction time is identically 1
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overall mean RT 1.000"), "{stdout}");
}

#[test]
fn bad_config_key_fails_loudly() {
    let fx = fixture();
    let bad = fx.root.join("bad.cfg");
    std::fs::write(&bad, "entropy_treshold = 0.6\n").unwrap();
    let out = bin()
        .args(["train", "--config", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown config key"), "{stderr}");
}

#[test]
fn missing_data_root_fails_with_context() {
    let fx = fixture();
    let cfg = fx.root.join("nodata.cfg");
    std::fs::write(
        &cfg,
        format!("data_root = {}\n", fx.root.join("absent").display()),
    )
    .unwrap();
    let out = bin()
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("IDX"), "{stderr}");
}

#[test]
fn env_var_overrides_data_root() {
    let fx = fixture();
    let cfg = fx.root.join("envdata.cfg");
    // config points nowhere; the environment supplies the real root
    std::fs::write(
        &cfg,
        format!(
            "data_root = /nonexistent\nout_dir = {}\nbatch_size = 32\ninitial_lr = 0.001\n",
            fx.runs.display()
        ),
    )
    .unwrap();
    let status = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--max-epochs",
            "1",
            "--train-limit",
            "64",
            "--quiet",
        ])
        .env("RECON_ATTN_DATA", fx.root.join("data"))
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn freq_eval_trains_and_compares_three_bands() {
    let fx = fixture();
    let out = bin()
        .args([
            "freq-eval",
            "--config",
            fx.config.to_str().unwrap(),
            "--max-epochs",
            "1",
            "--train-limit",
            "100",
            "--limit",
            "8",
            "--quiet",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "freq-eval failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("target band"), "{stdout}");
    for mode in ["full_spectrum", "low_freq", "high_freq"] {
        assert!(
            fx.runs.join(format!("caps_conv2_{mode}_seed0.ckpt")).is_file(),
            "missing {mode} checkpoint"
        );
        assert!(fx.runs.join(format!("freq_{mode}.csv")).is_file());
    }
}

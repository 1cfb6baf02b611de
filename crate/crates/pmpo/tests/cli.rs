//! End-to-end command tests on miniature configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pmpo"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("command should launch");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn mini_pretrain_config() -> serde_json::Value {
    serde_json::json!({
        "dims": {
            "d_text": 8, "d_vis": 12, "d_joint": 8, "heads": 2,
            "text_layers": 2, "vis_layers": 3,
            "image_side": 16, "patch_side": 8, "l_max": 8, "ffn_mult": 2
        },
        "world": {
            "colors": ["red", "green", "blue", "yellow"],
            "shapes": ["circle", "square", "triangle", "cross"],
            "backgrounds": [0.05, 0.15],
            "image_side": 16,
            "jitter": { "position": 0.12, "scale": 0.2, "hue": 0.08 },
            "seed": 0
        },
        "pairs": 48,
        "epochs": 1,
        "batch": 16,
        "lr": 0.005,
        "momentum": 0.9,
        "seed": 0
    })
}

fn mini_task_spec() -> serde_json::Value {
    serde_json::json!({
        "world": {
            "colors": ["red", "green", "blue", "yellow"],
            "shapes": ["circle", "square", "triangle", "cross"],
            "backgrounds": [0.05, 0.15],
            "image_side": 16,
            "jitter": { "position": 0.12, "scale": 0.2, "hue": 0.08 },
            "seed": 3
        },
        "split_fraction": 0.5,
        "split_seed": 3,
        "shots": 2,
        "test_per_class": 2
    })
}

/// Pretrain a miniature backbone once and reuse it across tests.
fn shared_backbone() -> &'static (TempDir, PathBuf) {
    use std::sync::OnceLock;
    static BACKBONE: OnceLock<(TempDir, PathBuf)> = OnceLock::new();
    BACKBONE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("pretrain.json");
        std::fs::write(&config, mini_pretrain_config().to_string()).unwrap();
        let out = dir.path().join("backbone.ckpt");
        run_ok(bin().args([
            "pretrain",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        (dir, out)
    })
}

fn tune_mini(dir: &Path, backbone: &Path, out_name: &str, seed: &str) -> PathBuf {
    let task = dir.join(format!("{out_name}.task.json"));
    std::fs::write(&task, mini_task_spec().to_string()).unwrap();
    let out = dir.join(out_name);
    run_ok(bin().args([
        "tune",
        "--backbone",
        backbone.to_str().unwrap(),
        "--task",
        task.to_str().unwrap(),
        "--n-prompts",
        "2",
        "--ctx-len",
        "2",
        "--depth",
        "2",
        "--epochs",
        "1",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]));
    out
}

#[test]
fn pretrain_writes_checkpoint_and_log() {
    let (_dir, backbone) = shared_backbone();
    assert!(backbone.exists());
    let log = std::fs::read_to_string(backbone.with_extension("ckpt.log.csv")).unwrap();
    assert!(log.starts_with("epoch,mean_loss\n"));
    assert_eq!(log.lines().count(), 2);
    let bytes = std::fs::read(backbone).unwrap();
    assert_eq!(&bytes[..4], b"PMPO");
}

#[test]
fn tune_is_bitwise_reproducible() {
    let (dir, backbone) = shared_backbone();
    let first = tune_mini(dir.path(), backbone, "a.ckpt", "5");
    let second = tune_mini(dir.path(), backbone, "b.ckpt", "5");
    let a = std::fs::read(&first).unwrap();
    let b = std::fs::read(&second).unwrap();
    assert_eq!(a, b, "same args + seed must produce identical artifacts");
    let history = std::fs::read_to_string(dir.path().join("a.ckpt.history.csv")).unwrap();
    assert!(history.starts_with("step,lr,loss,train_acc,grad_spread\n"));
    assert!(history.lines().count() > 1);
}

#[test]
fn eval_all_protocols_write_reports() {
    let (dir, backbone) = shared_backbone();
    let tuned = tune_mini(dir.path(), backbone, "eval.ckpt", "7");
    let task = dir.path().join("eval.ckpt.task.json");
    for (protocol, header) in [
        ("base2new", "metric,value"),
        ("crossdata", "dataset,accuracy"),
        ("domain", "shift,accuracy"),
    ] {
        let out = dir.path().join(format!("{protocol}.csv"));
        run_ok(bin().args([
            "eval",
            "--backbone",
            backbone.to_str().unwrap(),
            "--tuned",
            tuned.to_str().unwrap(),
            "--protocol",
            protocol,
            "--task",
            task.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]));
        let csv = std::fs::read_to_string(&out).unwrap();
        assert!(
            csv.starts_with(header),
            "{protocol} report began with {:?}",
            csv.lines().next()
        );
        assert!(csv.lines().count() > 1);
    }
}

#[test]
fn eval_rejects_unknown_protocol() {
    let (dir, backbone) = shared_backbone();
    let tuned = tune_mini(dir.path(), backbone, "badproto.ckpt", "9");
    let out = bin()
        .args([
            "eval",
            "--backbone",
            backbone.to_str().unwrap(),
            "--tuned",
            tuned.to_str().unwrap(),
            "--protocol",
            "telepathy",
            "--out",
            dir.path().join("x.csv").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("protocol"), "stderr: {stderr}");
}

#[test]
fn ablate_writes_axis_tables() {
    let (dir, backbone) = shared_backbone();
    let config = dir.path().join("ablate.json");
    let tune_cfg = serde_json::json!({
        "n_prompts": 2, "ctx_len": 2, "depth": 2, "shots": 2,
        "epochs": 1, "batch": 8, "base_lr": 0.002, "warmup_lr": 1e-5,
        "momentum": 0.9, "seed": 0, "mode": "pmpo",
        "manual": "a photo of a {}", "bridge_bias": true
    });
    std::fs::write(
        &config,
        serde_json::json!({
            "backbone": backbone,
            "tune": tune_cfg,
            "task": mini_task_spec(),
            "seeds": [0]
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("sweep");
    run_ok(bin().args([
        "ablate",
        "--axis",
        "depth",
        "--values",
        "0,2",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(out_dir.join("depth.csv")).unwrap();
    assert!(csv.starts_with("axis,value,seeds,"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out_dir.join("depth.txt").exists());
}

#[test]
fn gradcheck_passes_on_miniature_config() {
    let out = run_ok(bin().args(["gradcheck"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("gradient check passed"), "stdout: {stdout}");
}

#[test]
fn simmap_writes_one_graymap_per_image_prompt() {
    let (dir, backbone) = shared_backbone();
    let tuned = tune_mini(dir.path(), backbone, "sim.ckpt", "11");
    let out_dir = dir.path().join("maps");
    run_ok(bin().args([
        "simmap",
        "--backbone",
        backbone.to_str().unwrap(),
        "--tuned",
        tuned.to_str().unwrap(),
        "--images",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    for i in 0..2 {
        for n in 0..2 {
            let map = std::fs::read(out_dir.join(format!("img{i:02}_prompt{n:02}.pgm"))).unwrap();
            assert!(map.starts_with(b"P5\n16 16\n255\n"));
            assert_eq!(map.len(), "P5\n16 16\n255\n".len() + 256);
        }
        assert!(out_dir.join(format!("img{i:02}_input.pgm")).exists());
    }
}

#[test]
fn corrupt_checkpoint_is_rejected_with_checksum_error() {
    let (dir, backbone) = shared_backbone();
    let mut bytes = std::fs::read(backbone).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    let bad = dir.path().join("corrupt.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let out = bin()
        .args([
            "tune",
            "--backbone",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("never.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("checksum") || stderr.contains("corrupt"),
        "stderr: {stderr}"
    );
}

#[test]
fn missing_file_errors_cleanly() {
    let out = bin()
        .args([
            "tune",
            "--backbone",
            "/nonexistent/backbone.ckpt",
            "--out",
            "/tmp/never.ckpt",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

//! Black-box tests of the binary: exit codes, the full pipeline smoke run,
//! and determinism of emitted artifacts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgfamba"))
}

fn write_smoke_config(dir: &Path) -> std::path::PathBuf {
    // a configuration small enough for a seconds-scale smoke run
    let cfg = r#"
iterations = 50
lr = 0.001
seed = 9
batch_per_domain = 4
latent_dim = 4
T = 3

[backbone]
block_layer_counts = [1, 1, 1, 1]
channels_per_block = [6, 8, 12, 16]
state_dim = 4
patch_size = 4
num_classes = 4
image_size = 32
"#;
    let path = dir.join("smoke.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "generate-data",
        "train",
        "eval",
        "ablate",
        "sweep-t",
        "export-embeddings",
        "report",
    ] {
        assert!(text.contains(sub), "help must mention {sub}");
    }
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn train_without_dataset_is_an_actionable_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfgp = write_smoke_config(tmp.path());
    let out = bin()
        .args(["train", "--target", "flat"])
        .arg("--config")
        .arg(&cfgp)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("generate-data"), "{err}");
}

#[test]
fn full_pipeline_smoke_generate_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfgp = write_smoke_config(tmp.path());

    let gen = bin()
        .args(["generate-data", "--n-per-cell", "6"])
        .arg("--config")
        .arg(&cfgp)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let train = bin()
        .args(["train", "--target", "stripes"])
        .arg("--config")
        .arg(&cfgp)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let ckpt = out_dir.join("train-stripes/checkpoint.ckpt");
    assert!(ckpt.exists());
    assert!(out_dir.join("train-stripes/metrics.csv").exists());
    assert!(out_dir.join("train-stripes/metrics.json").exists());

    let eval = bin()
        .args(["eval", "--domain", "stripes"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    assert!(String::from_utf8_lossy(&eval.stdout).contains("stripes"));

    // evaluating a domain that trained is a contract violation
    let eval_bad = bin()
        .args(["eval", "--domain", "flat"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(eval_bad.status.code(), Some(1));

    // export embeddings from the checkpoint
    let emb = bin()
        .arg("export-embeddings")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        emb.status.success(),
        "{}",
        String::from_utf8_lossy(&emb.stderr)
    );
    assert!(out_dir.join("embeddings/layer4.csv").exists());
    assert!(out_dir.join("embeddings/layer4.png").exists());

    // report re-renders the emitted metrics and verifies the average
    let rep = bin()
        .arg("report")
        .arg("--metrics")
        .arg(out_dir.join("train-stripes/metrics.json"))
        .arg("--metrics")
        .arg(out_dir.join("train-stripes/metrics.csv"))
        .output()
        .unwrap();
    assert!(
        rep.status.success(),
        "{}",
        String::from_utf8_lossy(&rep.stderr)
    );
    let text = String::from_utf8_lossy(&rep.stdout);
    assert!(text.contains("avg."), "{text}");
}

#[test]
fn metrics_json_bytes_are_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfgp = write_smoke_config(tmp.path());
    let mut bytes = Vec::new();
    for run in 0..2 {
        let out_dir = tmp.path().join(format!("out{run}"));
        let gen = bin()
            .args(["generate-data", "--n-per-cell", "4"])
            .arg("--config")
            .arg(&cfgp)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(gen.status.success());
        let train = bin()
            .args(["train", "--target", "flat"])
            .arg("--config")
            .arg(&cfgp)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(train.status.success());
        bytes.push(std::fs::read(out_dir.join("train-flat/metrics.json")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "metrics JSON must be byte-identical");
}

//! End-to-end runs of the `cvgl` binary: the full desk-scale workflow
//! (synth → scan → prepare-grem → train → embed → evaluate → ablate) plus
//! the full-scale gate and error paths.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const TOY_CONFIG: &str = "\
backbone.backend = toy
backbone.input_size = 28
head.kind = pafa
head.embed_dim = 32
pafa.out_rows = 4
pafa.out_channels = 8
pafa.mixer_depth = 2
bridge.enabled = false
train.seed = 7
train.epochs = 2
train.batch_size = 2
loss.lambda = 3.0
loss.temperature = 0.07
augment.jpeg_prob = 0.0
augment.jitter_prob = 0.0
synth.locations = 4
synth.seed = 3
";

fn cvgl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvgl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cvgl(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = cvgl(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn workflow_runs_end_to_end() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("toy.cfg"), TOY_CONFIG).unwrap();

    let out = ok(root, &["synth", "--root", "data", "--config", "toy.cfg"]);
    assert!(out.contains("generated 4 locations"), "{out}");

    let out = ok(
        root,
        &["scan", "--root", "data", "--split", "train", "--manifest", "train.jsonl"],
    );
    assert!(out.contains("street 4, satellite 4, drone 216"), "{out}");
    assert!(root.join("train.jsonl").exists());

    let out = ok(
        root,
        &["prepare-grem", "--root", "data", "--manifest", "mined.jsonl"],
    );
    assert!(out.contains("4 anchors"), "{out}");

    let out = ok(
        root,
        &[
            "train",
            "--root",
            "data",
            "--config",
            "toy.cfg",
            "--run-dir",
            "run",
            "--grem-manifest",
            "mined.jsonl",
        ],
    );
    assert!(out.contains("trained 2 epochs (4 steps)"), "{out}");
    assert!(root.join("run/epoch_002.ckpt").exists());
    assert!(root.join("run/train_log.jsonl").exists());

    for (split, view, file) in [
        ("test-query", "street", "q.emb"),
        ("test-gallery", "satellite", "g.emb"),
    ] {
        let out = ok(
            root,
            &[
                "embed",
                "--root",
                "data",
                "--split",
                split,
                "--view",
                view,
                "--config",
                "toy.cfg",
                "--checkpoint",
                "run/epoch_002.ckpt",
                "--out",
                file,
            ],
        );
        assert!(out.contains("embedded 4"), "{out}");
    }

    let out = ok(
        root,
        &[
            "evaluate",
            "--query",
            "q.emb",
            "--gallery",
            "g.emb",
            "--out",
            "metrics.json",
        ],
    );
    assert!(out.contains("R@1:"), "{out}");
    assert!(out.contains("AP:"), "{out}");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_queries"], 4);

    let out = ok(
        root,
        &[
            "ablate",
            "--root",
            "data",
            "--config",
            "toy.cfg",
            "--suite",
            "heads",
            "--out",
            "rows.json",
        ],
    );
    for label in ["netvlad", "gem", "conv_ap", "pafa"] {
        assert!(out.contains(label), "missing {label} in table:\n{out}");
    }
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("rows.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn full_mode_requires_external_weights() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("toy.cfg"), TOY_CONFIG).unwrap();
    ok(root, &["synth", "--root", "data", "--config", "toy.cfg"]);

    let err = fails(
        root,
        &[
            "train", "--root", "data", "--config", "toy.cfg", "--run-dir", "run", "--full",
        ],
    );
    assert!(err.contains("--weights"), "{err}");
    assert!(err.contains("GPU"), "{err}");

    // Weights alone don't unlock a toy-backbone config at full scale.
    fs::write(root.join("fake.ckpt"), b"not a checkpoint").unwrap();
    let err = fails(
        root,
        &[
            "ablate", "--root", "data", "--config", "toy.cfg", "--suite", "lambda", "--full",
            "--weights", "fake.ckpt",
        ],
    );
    assert!(err.contains("foundation"), "{err}");
}

#[test]
fn evaluate_rejects_garbage_dumps() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("junk.emb"), b"garbage").unwrap();
    let err = fails(
        root,
        &["evaluate", "--query", "junk.emb", "--gallery", "junk.emb"],
    );
    assert!(err.contains("error"), "{err}");
}

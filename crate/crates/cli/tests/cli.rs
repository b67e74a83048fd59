//! End-to-end checks of the binary: the full pipeline, determinism under
//! --seed, the exit-code contract, and the JSON summary lines.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sketchfuse"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().last().expect("summary line");
    serde_json::from_str(line).expect("summary is JSON")
}

fn write_toy_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("toy.toml");
    std::fs::write(
        &path,
        r#"
[schedule]
preset = "toy-64"

[train]
total_iters = 3
stage1_iters = 2
batch_size = 1
checkpoint_every = 2
seed = 5

[adapters]
perceptual = "fixed-random:7"
"#,
    )
    .unwrap();
    path
}

#[test]
fn toygen_train_extract_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_config(dir);

    let s = summary(&run_in(
        dir,
        &["toygen", "--config", "toy.toml", "--count", "2", "--seed", "11", "--out", "data"],
    ));
    assert_eq!(s["count"], 2);
    assert_eq!(s["resolution"], 64);
    assert!(dir.join("data/photo/00001.png").exists());
    assert!(dir.join("data/latent/00001.npy").exists());
    assert!(dir.join("data/manifest.json").exists());

    let s = summary(&run_in(
        dir,
        &["train", "--config", "toy.toml", "--data", "data", "--out", "run"],
    ));
    assert_eq!(s["pairs"], 2);
    assert_eq!(s["iterations"], 3);
    let ckpt = s["final_checkpoint"].as_str().unwrap().to_string();
    assert!(dir.join(&ckpt).exists());
    let log = std::fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["total_g"].as_f64().unwrap().is_finite());
    }

    let s = summary(&run_in(
        dir,
        &[
            "extract", "--config", "toy.toml", "--checkpoint", &ckpt,
            "--latent", "data/latent/00000.npy", "--out", "sketch.png",
        ],
    ));
    assert_eq!(s["command"], "extract");
    let img = ::image::open(dir.join("sketch.png")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}

#[test]
fn synth_pairs_is_deterministic_under_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_config(dir);

    for out in ["a", "b"] {
        let s = summary(&run_in(
            dir,
            &["synth-pairs", "--config", "toy.toml", "--count", "2", "--seed", "77", "--out", out],
        ));
        assert_eq!(s["seed"], 77);
    }
    for rel in [
        "photo/00000.png",
        "photo/00001.png",
        "sketch/00001.png",
        "latent/00001.npy",
        "manifest.json",
    ] {
        let a = std::fs::read(dir.join("a").join(rel)).unwrap();
        let b = std::fs::read(dir.join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identically seeded runs");
    }

    // A different seed actually changes the data.
    summary(&run_in(
        dir,
        &["synth-pairs", "--config", "toy.toml", "--count", "2", "--seed", "78", "--out", "c"],
    ));
    let a = std::fs::read(dir.join("a/photo/00000.png")).unwrap();
    let c = std::fs::read(dir.join("c/photo/00000.png")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn edit_with_zero_alpha_matches_plain_extraction() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_config(dir);
    summary(&run_in(
        dir,
        &["toygen", "--config", "toy.toml", "--count", "1", "--seed", "3", "--out", "data"],
    ));

    // toy-64 latents are 10 layers x 16 dims; a single broadcast row.
    let direction = ndarray::Array2::<f64>::from_elem((1, 16), 0.25);
    sketchfuse::npy::save_array2(&dir.join("dir.npy"), &direction).unwrap();

    summary(&run_in(
        dir,
        &["extract", "--config", "toy.toml", "--latent", "data/latent/00000.npy", "--out", "plain.png"],
    ));
    summary(&run_in(
        dir,
        &[
            "edit", "--config", "toy.toml", "--latent", "data/latent/00000.npy",
            "--direction", "dir.npy", "--alpha", "0.0", "--out", "zero.png",
        ],
    ));
    summary(&run_in(
        dir,
        &[
            "edit", "--config", "toy.toml", "--latent", "data/latent/00000.npy",
            "--direction", "dir.npy", "--alpha", "1.5", "--layer-range", "2..6", "--out", "moved.png",
        ],
    ));

    let plain = std::fs::read(dir.join("plain.png")).unwrap();
    let zero = std::fs::read(dir.join("zero.png")).unwrap();
    let moved = std::fs::read(dir.join("moved.png")).unwrap();
    assert_eq!(plain, zero, "zero-strength edit must not change the render");
    assert_ne!(plain, moved, "nonzero edit must change the render");
}

#[test]
fn eval_writes_csv_with_means() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_config(dir);
    summary(&run_in(
        dir,
        &["synth-pairs", "--config", "toy.toml", "--count", "2", "--seed", "9", "--out", "set"],
    ));

    let s = summary(&run_in(
        dir,
        &["eval", "--config", "toy.toml", "--pred", "set/sketch", "--gt", "set/sketch", "--out", "ev.csv"],
    ));
    assert_eq!(s["pairs"], 2);
    assert_eq!(s["aggregates"]["l1"], 0.0);

    let csv = std::fs::read_to_string(dir.join("ev.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "stem,l1,ssim,embed-cosine");
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_config(dir);
    std::fs::write(dir.join("bad.toml"), "bogus_key = 1\n").unwrap();
    std::fs::write(
        dir.join("remote.toml"),
        "[adapters]\ngenerator = \"remote:gpu-box\"\n",
    )
    .unwrap();
    std::fs::create_dir_all(dir.join("empty/photo")).unwrap();
    std::fs::create_dir_all(dir.join("empty/sketch")).unwrap();
    summary(&run_in(
        dir,
        &["toygen", "--config", "toy.toml", "--count", "1", "--seed", "3", "--out", "data"],
    ));

    let cases: &[(&[&str], i32, &str)] = &[
        // Validation problems.
        (&["validate-config", "--config", "bad.toml"], 2, "unknown config key"),
        (&["validate-config", "--config", "missing.toml"], 2, "missing config file"),
        (
            &["edit", "--latent", "data/latent/00000.npy", "--direction", "data/latent/00000.npy",
              "--alpha", "1", "--layer-range", "oops", "--config", "toy.toml"],
            2,
            "malformed layer range",
        ),
        // Adapter endpoints.
        (
            &["extract", "--config", "remote.toml", "--latent", "data/latent/00000.npy"],
            3,
            "remote generator",
        ),
        // Data problems.
        (&["train", "--config", "toy.toml", "--data", "empty"], 4, "empty dataset"),
        (&["train", "--config", "toy.toml", "--data", "nowhere"], 4, "missing dataset dir"),
        (
            &["extract", "--config", "toy.toml", "--latent", "nothere.npy"],
            4,
            "missing latent",
        ),
    ];
    for (args, want, label) in cases {
        let out = run_in(dir, args);
        assert_eq!(out.status.code(), Some(*want), "{label}: {}",
            String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty(), "{label}: expected an error message");
    }

    // clap usage errors share the validation exit code.
    let out = run_in(
        dir,
        &["extract", "--config", "toy.toml", "--latent", "x.npy", "--image", "y.png"],
    );
    assert_eq!(out.status.code(), Some(2), "image and latent together");
}

#[test]
fn every_command_accepts_seed_and_extract_reproduces_under_it() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_toy_config(dir);
    summary(&run_in(
        dir,
        &["toygen", "--config", "toy.toml", "--count", "1", "--seed", "3", "--out", "data"],
    ));

    // Fresh head parameters come from the seed: same seed, same sketch.
    for (out, seed) in [("a.png", "5"), ("b.png", "5"), ("c.png", "6")] {
        summary(&run_in(
            dir,
            &[
                "extract", "--config", "toy.toml", "--latent", "data/latent/00000.npy",
                "--seed", seed, "--out", out,
            ],
        ));
    }
    let a = std::fs::read(dir.join("a.png")).unwrap();
    let b = std::fs::read(dir.join("b.png")).unwrap();
    let c = std::fs::read(dir.join("c.png")).unwrap();
    assert_eq!(a, b, "identical seeds must render identical sketches");
    assert_ne!(a, c, "the seed must actually steer the fresh parameters");

    // The rest accept --seed even where nothing is random.
    let s = summary(&run_in(
        dir,
        &[
            "validate-config", "--config", cfg.to_str().unwrap(),
            "--seed", "42", "--out", "norm.toml",
        ],
    ));
    assert_eq!(s["normalized"], "norm.toml");
    let norm = std::fs::read_to_string(dir.join("norm.toml")).unwrap();
    assert!(norm.contains("seed = 42"));
    summary(&run_in(
        dir,
        &["eval", "--pred", "data/sketch", "--gt", "data/sketch", "--seed", "1", "--out", "e.csv"],
    ));
}

#[test]
fn train_resume_needs_matching_config_unless_forced() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_config(dir);
    summary(&run_in(
        dir,
        &["toygen", "--config", "toy.toml", "--count", "2", "--seed", "11", "--out", "data"],
    ));
    summary(&run_in(
        dir,
        &["train", "--config", "toy.toml", "--data", "data", "--out", "run"],
    ));

    // Same config, explicit resume from the mid-run checkpoint.
    let s = summary(&run_in(
        dir,
        &[
            "train", "--config", "toy.toml", "--data", "data", "--out", "run2",
            "--resume", "run/ckpt_000002.ckpt",
        ],
    ));
    assert_eq!(s["command"], "train");

    // A different seed changes the config fingerprint: refused, then forced.
    let refused = run_in(
        dir,
        &[
            "train", "--config", "toy.toml", "--data", "data", "--out", "run3",
            "--seed", "99", "--resume", "run/ckpt_000002.ckpt",
        ],
    );
    assert_eq!(refused.status.code(), Some(4), "foreign checkpoint must be refused");
    let forced = run_in(
        dir,
        &[
            "train", "--config", "toy.toml", "--data", "data", "--out", "run3",
            "--seed", "99", "--resume", "run/ckpt_000002.ckpt", "--force-resume",
        ],
    );
    assert!(forced.status.success(), "{}", String::from_utf8_lossy(&forced.stderr));
}

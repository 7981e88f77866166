use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use illumfield::hdr_io::{lower_hemisphere_mask, save_mask_png};
use tempfile::TempDir;

fn illumfield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_illumfield"))
        .current_dir(dir)
        .env_remove("ILLUMFIELD_OUT")
        .args(args)
        .output()
        .expect("spawn illumfield")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = illumfield(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn user_error(dir: &Path, args: &[&str]) -> String {
    let out = illumfield(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(!stderr.contains("panicked"), "{args:?} panicked: {stderr}");
    assert!(!stderr.is_empty());
    stderr
}

const TINY_TRAIN: &[&str] = &[
    "--arch",
    "small",
    "--steps",
    "30",
    "--batch-size",
    "128",
    "--log-every",
    "0",
];

fn train_tiny(dir: &Path, data: &str, out: &str, seed: &str) {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--out",
        out,
        "--seed",
        seed,
        "--mode",
        "so2",
        "--latent-dim",
        "9",
    ];
    args.extend_from_slice(TINY_TRAIN);
    ok(dir, &args);
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn end_to_end_workflow() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data", "--seed", "7", "--count", "4", "--size", "16x32", "--out", "data",
        ],
    );
    assert_eq!(
        files(&d.join("data")),
        [
            "env_0000.hdr",
            "env_0001.hdr",
            "env_0002.hdr",
            "env_0003.hdr",
            "manifest.toml"
        ]
    );

    train_tiny(d, "data", "model", "1");
    let loss = fs::read_to_string(d.join("model/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 31);
    let manifest = fs::read_to_string(d.join("model/manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"ok\""), "{manifest}");
    assert!(manifest.contains("[train]"));

    let audit = ok(
        d,
        &[
            "audit",
            "--ckpt",
            "model/model.ckpt",
            "--trials",
            "50",
            "--out",
            "audit",
        ],
    );
    let dev: f64 = audit.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(dev < 1e-4, "{audit}");

    save_mask_png(&lower_hemisphere_mask(32, 16), 32, 16, d.join("lower.png")).unwrap();
    ok(
        d,
        &[
            "fit",
            "--ckpt",
            "model/model.ckpt",
            "--image",
            "data/env_0000.hdr",
            "--mask",
            "lower.png",
            "--steps",
            "20",
            "--out",
            "fit",
        ],
    );
    for f in [
        "completed.hdr",
        "completed.png",
        "latent.ckpt",
        "fit_loss.csv",
    ] {
        assert!(d.join("fit").join(f).exists(), "missing {f}");
    }

    ok(
        d,
        &[
            "complete",
            "--ckpt",
            "model/model.ckpt",
            "--image",
            "data/env_0001.hdr",
            "--steps",
            "20",
            "--out",
            "complete",
        ],
    );
    assert!(d.join("complete/triptych.png").exists());

    ok(
        d,
        &[
            "sample",
            "--ckpt",
            "model/model.ckpt",
            "--count",
            "2",
            "--size",
            "8x16",
            "--out",
            "sample",
        ],
    );
    assert!(d.join("sample/sample_0001.hdr").exists());

    ok(
        d,
        &[
            "interpolate",
            "--ckpt",
            "model/model.ckpt",
            "--frames",
            "3",
            "--size",
            "8x16",
            "--out",
            "interp",
        ],
    );
    assert!(d.join("interp/frame_0002.png").exists());

    ok(
        d,
        &[
            "rotate",
            "--ckpt",
            "model/model.ckpt",
            "--latent",
            "fit/latent.ckpt",
            "--angle",
            "-45",
            "--size",
            "8x16",
            "--out",
            "rot",
        ],
    );
    assert!(d.join("rot/rotated.hdr").exists());

    ok(
        d,
        &[
            "invert",
            "--ckpt",
            "model/model.ckpt",
            "--index",
            "0",
            "--resolution",
            "16",
            "--env-height",
            "8",
            "--steps",
            "5",
            "--out",
            "inv",
        ],
    );
    let metrics = fs::read_to_string(d.join("inv/metrics.csv")).unwrap();
    assert!(
        metrics.starts_with("method,render_psnr,env_log_psnr\nneural,"),
        "{metrics}"
    );
    assert!(metrics.contains("\nsh2,"));

    ok(
        d,
        &[
            "baseline-fit",
            "sh",
            "--image",
            "data/env_0002.hdr",
            "--order",
            "2",
            "--out",
            "sh",
        ],
    );
    ok(
        d,
        &[
            "baseline-fit",
            "sg",
            "--image",
            "data/env_0002.hdr",
            "--lobes",
            "2",
            "--steps",
            "20",
            "--out",
            "sg",
        ],
    );
    assert!(fs::read_to_string(d.join("sg/metrics.csv"))
        .unwrap()
        .contains("sg2,12,"));

    ok(
        d,
        &[
            "eval",
            "--ckpt",
            "model/model.ckpt",
            "--data",
            "data",
            "--limit",
            "2",
            "--fit-steps",
            "10",
            "--sg-lobes",
            "1",
            "--out",
            "eval",
        ],
    );
    let metrics = fs::read_to_string(d.join("eval/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 3, "{metrics}");
    assert!(metrics.contains("sh0,mean,"), "{metrics}");
}

#[test]
fn training_is_byte_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data", "--count", "3", "--size", "8x16", "--out", "data",
        ],
    );
    train_tiny(d, "data", "a", "5");
    train_tiny(d, "data", "b", "5");
    train_tiny(d, "data", "c", "6");
    let a = fs::read(d.join("a/loss.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("b/loss.csv")).unwrap());
    assert_ne!(a, fs::read(d.join("c/loss.csv")).unwrap());
    assert_eq!(
        fs::read(d.join("a/model.ckpt")).unwrap(),
        fs::read(d.join("b/model.ckpt")).unwrap()
    );
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data", "--count", "2", "--size", "8x16", "--out", "data",
        ],
    );
    fs::write(
        d.join("run.toml"),
        "out = \"from-file\"\nseed = 3\n\n[train]\ndata = \"data\"\narch = \"small\"\nlatent-dim = 6\nsteps = 12\nbatch-size = 64\nlog-every = 0\n",
    )
    .unwrap();
    ok(d, &["--config", "run.toml", "train", "--steps", "15"]);
    let loss = fs::read_to_string(d.join("from-file/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 16);

    // The manifest replays the run.
    ok(
        d,
        &[
            "--config",
            "from-file/manifest.toml",
            "train",
            "--out",
            "replay",
        ],
    );
    assert_eq!(loss, fs::read_to_string(d.join("replay/loss.csv")).unwrap());

    fs::write(d.join("bad.toml"), "[train]\nstpes = 3\n").unwrap();
    let err = user_error(d, &["--config", "bad.toml", "train", "--data", "data"]);
    assert!(err.contains("stpes"), "{err}");
}

#[test]
fn out_defaults_to_environment_variable() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_illumfield"))
        .current_dir(d)
        .env("ILLUMFIELD_OUT", "envdir")
        .args(["gen-data", "--count", "1", "--size", "8x16"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(files(&d.join("envdir")), ["env_0000.hdr", "manifest.toml"]);
    assert_eq!(files(d), ["envdir"]);

    ok(d, &["gen-data", "--count", "1", "--size", "8x16"]);
    assert!(d.join("out/env_0000.hdr").exists());
}

#[test]
fn user_errors_exit_nonzero_without_panicking() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    user_error(d, &["train", "--bogus-flag"]);
    user_error(d, &["frobnicate"]);
    let e = user_error(d, &["audit", "--ckpt", "missing.ckpt"]);
    assert!(e.contains("missing.ckpt"), "{e}");
    let e = user_error(d, &["audit", "--latent-dim", "28"]);
    assert!(e.contains("multiple of 3"), "{e}");
    let e = user_error(d, &["gen-data", "--size", "big"]);
    assert!(e.contains("HxW"), "{e}");
    fs::write(d.join("junk.hdr"), b"not an image").unwrap();
    user_error(d, &["baseline-fit", "sh", "--image", "junk.hdr"]);
    let e = user_error(d, &["baseline-fit", "pca", "--image", "junk.hdr"]);
    assert!(e.contains("pca"), "{e}");
    let e = user_error(d, &["train"]);
    assert!(e.contains("--data"), "{e}");
    let manifest = fs::read_to_string(d.join("out/manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"failed\""), "{manifest}");
}

#[test]
fn fresh_models_pass_or_fail_the_audit_by_mode() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let dev = |mode: &str| -> f64 {
        let s = ok(
            d,
            &[
                "audit", "--mode", mode, "--arch", "small", "--trials", "100",
            ],
        );
        s.split_whitespace().nth(3).unwrap().parse().unwrap()
    };
    assert!(dev("so2") < 1e-4);
    assert!(dev("so3") < 1e-4);
    assert!(dev("none") > 1e-2);
}

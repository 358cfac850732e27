use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gnstode(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnstode"))
        .args(args)
        .current_dir(dir)
        .env("GNSTODE_THREADS", "1")
        .output()
        .unwrap()
}

#[test]
fn full_pipeline_and_error_exits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |out: Output| {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(gnstode(
        &["generate", "--n", "5", "--timesteps", "10", "--counts", "2,1,1", "--seed", "3", "--out-dir", "data"],
        d,
    ));
    ok(gnstode(
        &[
            "train", "--train", "data/train.bin", "--val", "data/val.bin", "--epochs", "2", "--batch-size", "4",
            "--hidden", "6", "--k", "3", "--method", "euler", "--out", "m.ckpt", "--quiet",
        ],
        d,
    ));
    assert!(d.join("m.csv").exists());
    let out = ok(gnstode(&["evaluate", "--test", "data/test.bin", "--ckpt", "m.ckpt", "--out", "r.json"], d));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("rmse "));
    ok(gnstode(&["rollout", "--ckpt", "m.ckpt", "--data", "data/test.bin", "--out", "r.csv"], d));
    assert_eq!(fs::read_to_string(d.join("r.csv")).unwrap().lines().count(), 2 * 10 * 5 + 1);

    let bad_index = gnstode(
        &["rollout", "--ckpt", "m.ckpt", "--data", "data/test.bin", "--traj-index", "5", "--out", "x.csv"],
        d,
    );
    assert!(!bad_index.status.success());
    assert!(String::from_utf8_lossy(&bad_index.stderr).contains("out of range"));

    let bad_counts = gnstode(&["generate", "--counts", "1,2", "--out-dir", "q"], d);
    assert!(!bad_counts.status.success());

    let bad_threads = Command::new(env!("CARGO_BIN_EXE_gnstode"))
        .args(["evaluate", "--test", "data/test.bin", "--ckpt", "m.ckpt", "--out", "y.json"])
        .current_dir(d)
        .env("GNSTODE_THREADS", "0")
        .output()
        .unwrap();
    assert!(!bad_threads.status.success());

    let missing = gnstode(&["evaluate", "--test", "nope.bin", "--ckpt", "m.ckpt", "--out", "z.json"], d);
    assert!(!missing.status.success());
    assert!(!d.join("z.json").exists());
}

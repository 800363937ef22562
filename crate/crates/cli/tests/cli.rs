use std::fs;
use std::io::Write;
use std::process::{Command, Output, Stdio};

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_immiscible-lab"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn lap_solve_reads_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "# costs\n4, 1, 3\n2, 0, 5\n3, 2, 2\n").unwrap();
    let out = stdout(&lab(&["lap-solve", path.to_str().unwrap()]));
    assert_eq!(out, "perm,1,0,2\ntotal_cost,5.0000000000000000e0\n");

    let mut child = Command::new(env!("CARGO_BIN_EXE_immiscible-lab"))
        .arg("lap-solve")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"1,2\n3,4\n").unwrap();
    let out = stdout(&child.wait_with_output().unwrap());
    assert!(out.starts_with("perm,0,1\n"));
}

#[test]
fn lap_solve_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "1,2\n3\n").unwrap();
    assert!(!lab(&["lap-solve", path.to_str().unwrap()]).status.success());
    fs::write(&path, "1,-2\n3,4\n").unwrap();
    assert!(!lab(&["lap-solve", path.to_str().unwrap()]).status.success());
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "batch_size = 64\nlearning_rate = 1\n").unwrap();
    let o = lab(&["train", "--config", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert!(!lab(&["train", "--metric", "cosine"]).status.success());
}

#[test]
fn keys_are_listed() {
    let out = stdout(&lab(&["keys"]));
    for key in ["batch_size", "mode", "metric", "quantize", "eval_every", "seed"] {
        assert!(out.lines().any(|l| l.starts_with(key)), "{key}");
    }
}

#[test]
fn train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("t.cfg");
    fs::write(
        &cfg,
        "batch_size = 32\ntotal_steps = 40\neval_every = 20\neval_samples = 64\nhidden_width = 16\nmode = immiscible_flipped\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    stdout(&lab(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let meta = fs::read_to_string(run.join("run.meta")).unwrap();
    assert!(meta.contains("mode = immiscible_flipped"));

    let ck = run.join("checkpoint.txt");
    let a = stdout(&lab(&["sample", "--checkpoint", ck.to_str().unwrap(), "--n", "5", "--seed", "3"]));
    let b = stdout(&lab(&["sample", "--checkpoint", ck.to_str().unwrap(), "--n", "5", "--seed", "3"]));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 5);
    assert!(a.lines().all(|l| l.split(',').count() == 2));
}

#[test]
fn cond_weights_and_bench_tables() {
    let out = stdout(&lab(&["cond-weights", "--rounds", "20", "--buckets", "4"]));
    assert!(out.starts_with("bucket_lo,bucket_hi,count,assigned,frequency\n"));
    assert!(out.contains("# spearman = "));
    let out = stdout(&lab(&["cond-weights", "--setup", "eight-point", "--batch-size", "16", "--rounds", "10"]));
    assert_eq!(out.lines().count(), 12);
    assert!(!lab(&["cond-weights", "--setup", "eight-point", "--batch-size", "12"]).status.success());

    let out = stdout(&lab(&["assign-bench", "--batch-sizes", "8,16", "--dim", "4", "--trials", "3"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "batch_size,reduction_pct_median,time_ms_median");
    assert_eq!(lines.len(), 3);
}

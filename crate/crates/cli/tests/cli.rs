use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sinkadmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinkadmm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, preset: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        format!("preset = \"{preset}\"\n\n[grid]\nbounds = [[-2.0, 2.0], [-2.0, 2.0]]\ncounts = [11, 11]\n"),
    )
    .unwrap();
    path
}

fn snapshot_names(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir.join("snapshots"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn fpk_preset_snapshot_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "fpk");
    let out = dir.path().join("fpk");
    let o = sinkadmm(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--max-iters",
        "10",
        "--snapshot-every",
        "4",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // k = 0, 4, 8 and the final iterate 10, for mu_1, mu_2 and zeta.
    assert_eq!(snapshot_names(&out).len(), 4 * 3);
    for k in [0, 4, 8, 10] {
        assert!(out.join(format!("snapshots/zeta_{k}.csv")).exists());
    }
    assert!(out.join("manifest").exists());
    let metrics = fs::read_to_string(out.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"summary\""));
}

#[test]
fn aggregation_case4_writes_three_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "aggregation-case4");
    let out = dir.path().join("agg");
    let o = sinkadmm(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--max-iters",
        "3",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let names = snapshot_names(&out);
    for i in 1..=3 {
        assert!(names.contains(&format!("mu_{i}_3.csv")));
    }
    assert!(!names.iter().any(|n| n.starts_with("mu_4")));
}

#[test]
fn threads_do_not_change_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "aggregation-case4");
    let run = |threads: &str| {
        let out = dir.path().join(format!("t{threads}"));
        let o = sinkadmm(&[
            "solve",
            "--config",
            cfg.to_str().unwrap(),
            "--max-iters",
            "6",
            "--snapshot-every",
            "3",
            "--threads",
            threads,
            "--output",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("1"), run("4"));
    let names = snapshot_names(&a);
    assert_eq!(names, snapshot_names(&b));
    for n in &names {
        let fa = fs::read(a.join("snapshots").join(n)).unwrap();
        let fb = fs::read(b.join("snapshots").join(n)).unwrap();
        assert!(fa == fb, "{n} differs");
    }
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "preset = \"fpk\"\nalpah = 3.0\n").unwrap();
    let o = sinkadmm(&["solve", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");

    let o = sinkadmm(&["solve", "--preset", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    let o = sinkadmm(&["solve", "--preset", "fpk", "--threads", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = sinkadmm(&["solve"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn enumerate_groupings_lists_partitions() {
    let o = sinkadmm(&["enumerate-groupings", "4", "--exclude-centralized"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("14 groupings"));
    assert_eq!(lines.count(), 14);
}

#[test]
fn validate_passes_and_detects_sign_flip() {
    let o = sinkadmm(&["validate"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert!(text.contains("newton (Dense) vs 2000 gradient steps"));

    let o = sinkadmm(&["validate", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(3));
    let text = String::from_utf8_lossy(&o.stdout);
    let flipped = text.lines().find(|l| l.contains("power-law")).unwrap();
    assert!(flipped.starts_with("FAIL"), "{flipped}");
    assert_eq!(text.lines().filter(|l| l.starts_with("FAIL")).count(), 1);
}

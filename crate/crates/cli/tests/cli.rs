use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn kronfrac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kronfrac"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kronfrac(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_csv() -> String {
    let mut s = String::from("userId,movieId,rating,timestamp\n");
    for u in 1..=40u32 {
        for i in 1..=60u32 {
            if (u + 2 * i) % 5 == 0 || (u * i) % 11 == 1 {
                let rating = (((u * 7 + i * 3) % 9) + 1) as f64 / 2.0;
                s.push_str(&format!("{u},{},{rating:?},{}\n", 100 + i, 1000 + u * i));
            }
        }
    }
    s
}

/// Ingests the small dataset and reduces it to 4x4.
fn small_pipeline() -> TempDir {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("ratings.csv"), small_csv()).unwrap();
    ok(dir.path(), &["ingest", "--input", "ratings.csv", "--output", "m.kfs"]);
    ok(dir.path(), &["reduce", "--matrix", "m.kfs", "--rows", "4", "--cols", "4", "--output", "r.kfr"]);
    dir
}

fn read_values(path: PathBuf) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn help_and_usage_exit_codes() {
    let dir = TempDir::new().unwrap();
    assert_eq!(kronfrac(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(kronfrac(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(kronfrac(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(kronfrac(dir.path(), &["expand", "--bogus"]).status.code(), Some(1));
    assert_eq!(kronfrac(dir.path(), &["verify", "--manifest", "x", "--memory-budget", "4XB"]).status.code(), Some(1));
}

#[test]
fn ingest_errors() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.csv"), "userId,movieId,rating,timestamp\n").unwrap();
    let out = kronfrac(dir.path(), &["ingest", "--input", "empty.csv", "--output", "m.kfs"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    fs::write(dir.path().join("bad.csv"), "userId,movieId,rating,timestamp\r\n1,2,3.5,9\r\n1,3,x,9\r\n").unwrap();
    let out = kronfrac(dir.path(), &["ingest", "--input", "bad.csv", "--output", "m.kfs"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));

    let out = kronfrac(dir.path(), &["ingest", "--input", "missing.csv", "--output", "m.kfs"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_report_and_reproducibility() {
    let dir = small_pipeline();
    let report: serde_json::Value =
        serde_json::from_str(&ok(dir.path(), &["ingest", "--input", "ratings.csv", "--output", "again.kfs"])).unwrap();
    assert_eq!(report["rows"], 40);
    assert_eq!(report["cols"], 60);
    assert!(report["divisor"].as_f64().unwrap() > 0.0);
    assert_eq!(fs::read(dir.path().join("m.kfs")).unwrap(), fs::read(dir.path().join("again.kfs")).unwrap());

    ok(dir.path(), &["reduce", "--matrix", "m.kfs", "--rows", "4", "--cols", "4", "--output", "r2.kfr"]);
    assert_eq!(fs::read(dir.path().join("r.kfr")).unwrap(), fs::read(dir.path().join("r2.kfr")).unwrap());
}

#[test]
fn reduce_argument_errors() {
    let dir = small_pipeline();
    let out = kronfrac(dir.path(), &["reduce", "--matrix", "m.kfs", "--rows", "0", "--cols", "4", "--output", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = kronfrac(dir.path(), &["reduce", "--matrix", "m.kfs", "--rows", "20", "--cols", "4", "--output", "x"]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    ok(p, &["ingest", "--synthetic", "--seed", "5", "--output", "m.kfs"]);
    ok(p, &["reduce", "--matrix", "m.kfs", "--rows", "4", "--cols", "4", "--output", "r.kfr"]);
    for (workers, out) in [("1", "w1"), ("8", "w8")] {
        ok(p, &["expand", "--reduced", "r.kfr", "--matrix", "m.kfs", "--seed", "9", "--workers", workers, "--output", out]);
    }
    let mut names: Vec<_> = fs::read_dir(p.join("w1")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 5);
    for name in names {
        assert_eq!(fs::read(p.join("w1").join(&name)).unwrap(), fs::read(p.join("w8").join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn dry_run_writes_manifest_only() {
    let dir = small_pipeline();
    let p = dir.path();
    let summary: serde_json::Value =
        serde_json::from_str(&ok(p, &["expand", "--reduced", "r.kfr", "--matrix", "m.kfs", "--dry-run", "--output", "dry"])).unwrap();
    let names: Vec<_> = fs::read_dir(p.join("dry")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["manifest.json"]);
    let matrix = fs::read_to_string(p.join("m.kfs")).unwrap();
    let base_nnz = matrix.lines().count() as u64 - 2;
    let reduced = fs::read_to_string(p.join("r.kfr")).unwrap();
    let reduced_nnz = reduced
        .lines()
        .skip(2)
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .filter(|&v| v != 0.0)
        .count() as u64;
    assert_eq!(summary["nnz_total"], reduced_nnz * base_nnz);
    assert_eq!(summary["dims"], serde_json::json!([160, 240]));

    let out = kronfrac(p, &["verify", "--manifest", "dry"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn verify_detects_tampering() {
    let dir = small_pipeline();
    let p = dir.path();
    ok(p, &["expand", "--reduced", "r.kfr", "--matrix", "m.kfs", "--output", "out"]);
    let stdout = ok(p, &["verify", "--manifest", "out/manifest.json"]);
    assert!(stdout.contains("\"row_sums\"") && !stdout.contains("fail"), "{stdout}");

    // one edited value
    let shard = p.join("out/part-r1.csv");
    let original = fs::read_to_string(&shard).unwrap();
    let first = original.lines().next().unwrap();
    let (prefix, value) = first.rsplit_once(',').unwrap();
    let edited = format!("{prefix},{:?}", value.parse::<f64>().unwrap() * 0.5);
    fs::write(&shard, original.replacen(first, &edited, 1)).unwrap();
    let out = kronfrac(p, &["verify", "--manifest", "out"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("checksum"));
    fs::write(&shard, &original).unwrap();
    ok(p, &["verify", "--manifest", "out"]);

    // edited entry count
    let manifest_path = p.join("out/manifest.json");
    let manifest = fs::read_to_string(&manifest_path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    json["nnz_total"] = serde_json::json!(json["nnz_total"].as_u64().unwrap() + 1);
    fs::write(&manifest_path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    let out = kronfrac(p, &["verify", "--manifest", "out"]);
    assert_eq!(out.status.code(), Some(3));

    // same edit on the streaming path used when the budget is too small for sums
    let out = kronfrac(p, &["verify", "--manifest", "out", "--memory-budget", "16"]);
    assert_eq!(out.status.code(), Some(3));
    fs::write(&manifest_path, manifest).unwrap();
    let stdout = ok(p, &["verify", "--manifest", "out", "--memory-budget", "16"]);
    assert!(stdout.contains("skipped"));
}

#[test]
fn analytic_stats_match_empirical_stats() {
    let dir = small_pipeline();
    let p = dir.path();
    ok(p, &["expand", "--reduced", "r.kfr", "--matrix", "m.kfs", "--output", "out"]);
    ok(p, &["stats", "--target", "out", "--mode", "analytic", "--k", "8", "--output", "analytic"]);
    ok(p, &["stats", "--target", "out", "--mode", "empirical", "--k", "8", "--output", "empirical"]);
    for table in ["row_sums.tsv", "col_sums.tsv"] {
        let a = read_values(p.join("analytic").join(table));
        let e = read_values(p.join("empirical").join(table));
        assert_eq!(a.len(), e.len());
        for (x, y) in a.iter().zip(&e) {
            assert!((x - y).abs() <= 1e-9, "{table}: {x} vs {y}");
        }
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("analytic/report.json")).unwrap()).unwrap();
    let certified = report["certified_singular_values"].as_u64().unwrap() as usize;
    assert!(certified >= 8);
    let a = read_values(p.join("analytic/singular_values.tsv"));
    let e = read_values(p.join("empirical/singular_values.tsv"));
    for (x, y) in a.iter().zip(&e).take(certified.min(e.len())) {
        assert!((x - y).abs() <= 1e-5 * x, "{x} vs {y}");
    }

    ok(p, &["stats", "--target", "m.kfs", "--k", "4", "--output", "base"]);
    ok(p, &["stats", "--target", "r.kfr", "--output", "reduced"]);
    let sv = read_values(p.join("reduced/singular_values.tsv"));
    assert!(sv.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn analytic_stats_refuse_shuffle() {
    let dir = small_pipeline();
    let p = dir.path();
    ok(p, &["expand", "--reduced", "r.kfr", "--matrix", "m.kfs", "--variant", "shuffle", "--output", "out"]);
    let out = kronfrac(p, &["stats", "--target", "out", "--mode", "analytic", "--output", "s"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = ok(p, &["verify", "--manifest", "out"]);
    assert!(stdout.contains("skipped"));
}

#[test]
fn sample_writes_ranked_table() {
    let dir = small_pipeline();
    let p = dir.path();
    ok(p, &["sample", "--reduced", "r.kfr", "--matrix", "m.kfs", "--count", "5000", "--seed", "3", "--output", "s.tsv"]);
    let values = read_values(p.join("s.tsv"));
    assert_eq!(values.len(), 5000);
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
    assert!(values.iter().all(|v| v.abs() <= 1.0));
    let first = fs::read(p.join("s.tsv")).unwrap();
    ok(p, &["sample", "--reduced", "r.kfr", "--matrix", "m.kfs", "--count", "5000", "--seed", "3", "--output", "s.tsv"]);
    assert_eq!(first, fs::read(p.join("s.tsv")).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("s.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["args"]["seed"], 3);

    let out = kronfrac(p, &["sample", "--reduced", "r.kfr", "--matrix", "m.kfs", "--count", "0", "--output", "z.tsv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn manifest_echoes_run_config() {
    let dir = small_pipeline();
    let p = dir.path();
    ok(p, &["expand", "--reduced", "r.kfr", "--matrix", "m.kfs", "--variant", "shuffle", "--seed", "77", "--output", "out"]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("out/manifest.json")).unwrap()).unwrap();
    let args = &manifest["config"]["args"];
    assert_eq!(args["seed"], 77);
    assert_eq!(args["variant"], "shuffle");
    assert_eq!(args["reduced"], "r.kfr");
    assert_eq!(args["matrix"], "m.kfs");
    assert_eq!(args["dry_run"], false);
    assert_eq!(manifest["master_seed"], 77);
}

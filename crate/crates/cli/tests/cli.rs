use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn unpci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unpci"))
        .args(args)
        .env_remove("UNPCI_THREADS")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

/// Two well separated groups of 20 rows in 3 features.
fn write_blobs(dir: &Path) -> String {
    let mut text = String::from("a,b,c\n");
    for i in 0..40 {
        let off = if i < 20 { 0.0 } else { 12.0 };
        let u = ((i * 37) % 11) as f64 / 11.0 - 0.5;
        let v = ((i * 53) % 13) as f64 / 13.0 - 0.5;
        let w = ((i * 29) % 7) as f64 / 7.0 - 0.5;
        text.push_str(&format!("{},{},{}\n", off + u, off + v, w + 0.1 * i as f64 / 40.0));
    }
    let path = dir.join("blobs.csv");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn test_subcommand_reports_significance() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path());
    let out = unpci(&["test", &data, "--b", "50", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["p_perm"], Value::from(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"p_perm\": 0,"));
    assert_eq!(v["n_selected"], 3);
    assert_eq!(v["replicates"], 50);
    assert_eq!(v["labels"].as_array().unwrap().len(), 40);
    for key in ["ci_data", "z", "p_normal", "mu_ci", "sigma_ci"] {
        assert!(v[key].is_number(), "{key}");
    }
    let m = &v["manifest"];
    assert_eq!(m["subcommand"], "test");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["replicates"], 50);
    assert_eq!(m["config"]["cluster_method"], "kmeans");
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn same_seed_same_report_across_threads() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path());
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_unpci"))
            .args(["test", &data, "--b", "40", "--seed", "9", "--method", "ward"])
            .env("UNPCI_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        let mut v = json(&out);
        // The pool size is part of the manifest; everything else must match.
        let recorded = v["manifest"]["config"].as_object_mut().unwrap().remove("threads");
        assert_eq!(recorded, Some(Value::from(threads.parse::<u64>().unwrap())));
        v
    };
    assert_eq!(run("1"), run("3"));

    let bad = Command::new(env!("CARGO_BIN_EXE_unpci"))
        .args(["test", &data, "--b", "5"])
        .env("UNPCI_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn manifest_digest_tracks_input_bytes() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path());
    let digest = |path: &str| {
        let v = json(&unpci(&["critbw", path, "--feature", "a"]));
        v["manifest"]["inputs"][0]["sha256"].as_str().unwrap().to_string()
    };
    let before = digest(&data);
    let mut bytes = fs::read(&data).unwrap();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'1' { b'2' } else { b'1' };
    let other = dir.path().join("changed.csv");
    fs::write(&other, bytes).unwrap();
    assert_ne!(before, digest(other.to_str().unwrap()));
    assert_eq!(before, digest(&data));
}

#[test]
fn dump_null_writes_b_rows() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path());
    let dump = dir.path().join("null.csv");
    let out = unpci(&["test", &data, "--b", "25", "--dump-null", dump.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = fs::read_to_string(&dump).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# manifest: {"));
    assert_eq!(lines.next().unwrap(), "replicate,ci");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 25);
    assert!(rows[0].starts_with("0,"));
}

#[test]
fn external_labels_with_hierarchical_method() {
    let dir = TempDir::new().unwrap();
    let data = write_blobs(dir.path());
    let labels = dir.path().join("labels.csv");
    let mut text = String::from("group\n");
    for i in 0..40 {
        text.push_str(if i < 20 { "left\n" } else { "right\n" });
    }
    fs::write(&labels, text).unwrap();
    let out = unpci(&[
        "test",
        &data,
        "--method",
        "ward",
        "--labels",
        labels.to_str().unwrap(),
        "--b",
        "30",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let l: Vec<u64> = v["labels"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
    assert_eq!(&l[..20], &[0; 20]);
    assert_eq!(&l[20..], &[1; 20]);
    assert_eq!(v["manifest"]["inputs"][1]["role"], "labels");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(unpci(&["test", "x.csv", "--b", "0"]).status.code(), Some(2));
    assert_eq!(unpci(&["test"]).status.code(), Some(2));
    assert_eq!(unpci(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(unpci(&["simulate", "--scenario", "7d_torus"]).status.code(), Some(2));
    assert_eq!(unpci(&["tci", "--lambdas", "1,2"]).status.code(), Some(2));
    assert_eq!(unpci(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_errors_exit_three() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.csv");
    assert_eq!(unpci(&["test", missing.to_str().unwrap()]).status.code(), Some(3));

    let data = write_blobs(dir.path());
    let unwritable = dir.path().join("no_such_dir").join("out.json");
    let out = unpci(&["test", &data, "--b", "5", "--output", unwritable.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn degenerate_feature_exits_one() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("flat.csv");
    fs::write(&path, "x,flat\n1,5\n2,5\n3,5\n4,5\n8,5\n9,5\n").unwrap();
    let out = unpci(&["test", path.to_str().unwrap(), "--b", "5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("flat"));
}

#[test]
fn critbw_reports_bandwidths() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("two.csv");
    fs::write(&path, "t\n-1\n1\n").unwrap();
    let out = unpci(&["critbw", path.to_str().unwrap(), "--feature", "t"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let h1 = v["features"][0]["h1"].as_f64().unwrap();
    assert!((h1 - 1.0).abs() < 1e-3, "{h1}");
    assert!(v["features"][0]["mode_location"].as_f64().unwrap().abs() < 0.01);

    let out = unpci(&["critbw", path.to_str().unwrap(), "--feature", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tci_prints_three_quantities() {
    let v = json(&unpci(&["tci", "--lambdas", "1,1", "--a", "2", "--eta", "0.5"]));
    let g = v["tci_gauss"].as_f64().unwrap();
    assert!((g - (1.0 - 1.0 / std::f64::consts::PI)).abs() < 1e-11);
    assert!((v["tci_mix"].as_f64().unwrap() - g / 2.0).abs() < 1e-11);
    assert!((v["tci_null_mixture"].as_f64().unwrap() - g).abs() < 1e-11);

    let v = json(&unpci(&["tci", "--lambdas", "1"]));
    assert!((v["tci_gauss"].as_f64().unwrap() - 0.363_380_227_632).abs() < 1e-11);
    assert!(v["tci_mix"].is_null());
    assert_eq!(unpci(&["tci", "--lambdas", "1,2"]).status.code(), Some(2));
}

#[test]
fn simulate_writes_rows_and_summary() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("reps.csv");
    let out = unpci(&[
        "simulate",
        "--scenario",
        "elongated_clusters",
        "--reps",
        "2",
        "--b",
        "20",
        "--scale-n",
        "0.5",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["scenario"], "elongated_clusters");
    assert_eq!(v["n"], 101);
    assert_eq!(v["reps"], 2);
    assert_eq!(v["significant"], 2);
    assert_eq!(v["manifest"]["config"]["scenario"]["cluster_method"], "kmeans");

    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# manifest: "));
    assert!(lines[1].starts_with("scenario,rep,"));
    assert_eq!(lines.len(), 4);
}

use std::path::Path;
use std::process::Command;

fn hindex(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hindex")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn report(dir: &Path) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    // wall-clock values are the only permitted difference between runs
    v.as_object_mut().unwrap().remove("timings");
    for c in v["checks"].as_array_mut().unwrap() {
        if c["name"].as_str().unwrap().ends_with("runtime_seconds") {
            c["value"] = serde_json::Value::Null;
            c["pass"] = serde_json::Value::Null;
        }
    }
    v
}

const SMALL_INDEX: &str = "suite = \"index\"\n[grid]\npoints = 9\nextent = 3.0\n";

#[test]
fn algebra_rerun_gives_identical_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "a.toml", "suite = \"algebra\"\n[algebra]\ncases = 500\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = hindex(&["run", &cfg, "--seed", "11", "--out", d.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    }
    assert_eq!(report(&a), report(&b));
    assert_eq!(report(&a)["config"]["seed"], 11);
}

#[test]
fn csv_is_byte_identical_across_runs_and_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "i.toml", SMALL_INDEX);
    let dirs: Vec<_> = ["p1", "p2", "s"].iter().map(|n| tmp.path().join(n)).collect();
    hindex(&["run", &cfg, "--out", dirs[0].to_str().unwrap()]);
    hindex(&["run", &cfg, "--out", dirs[1].to_str().unwrap()]);
    hindex(&["run", &cfg, "--threads", "1", "--out", dirs[2].to_str().unwrap()]);
    let csv: Vec<Vec<u8>> = dirs.iter().map(|d| std::fs::read(d.join("series.csv")).unwrap()).collect();
    assert!(csv[0].len() > "series,t,value,excluded\n".len());
    assert_eq!(csv[0], csv[1]);
    assert_eq!(csv[0], csv[2]);
    assert_eq!(report(&dirs[0]), report(&dirs[2]));
}

#[test]
fn exit_status_reflects_outcome() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    let bad_expr = write(tmp.path(), "e.toml", "suite = \"defects\"\n[defects]\na = \"exp(-\"\n");
    let o = hindex(&["run", &bad_expr, "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("defects.a"));
    let even = write(tmp.path(), "n.toml", "suite = \"index\"\n[grid]\npoints = 8\n");
    assert_eq!(hindex(&["run", &even, "--out", out]).status.code(), Some(2));
    assert_eq!(hindex(&["run", "/nonexistent/config.toml"]).status.code(), Some(2));
    // an unattainable threshold turns a passing suite into a failing one
    let strict = write(
        tmp.path(),
        "s.toml",
        "suite = \"algebra\"\n[algebra]\ncases = 200\n[tolerances]\nalgebra_max_error = -1.0\n",
    );
    let o = hindex(&["run", &strict, "--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[FAIL] algebra.associativity.max_error"));
}

#[test]
fn suite_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "x.toml", "suite = \"defects\"\n[algebra]\ncases = 100\n");
    let dir = tmp.path().join("o");
    let o = hindex(&["run", &cfg, "--suite", "algebra", "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(&dir);
    assert_eq!(r["config"]["suite"], "algebra");
    assert!(std::fs::read_to_string(dir.join("series.csv")).unwrap() == "series,t,value,excluded\n");
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        hindex_cli::config::parse_config(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        seen += 1;
    }
    assert_eq!(seen, 6);
}

use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segtransvae"))
        .args(args)
        .env("SEGTRANSVAE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `key=value` fields of a single output line.
fn field(line: &str, key: &str) -> String {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = bin(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn benchmark_prints_one_parsable_line() {
    let o = bin(&["benchmark", "--config", "desk", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    // layer-by-layer analytic count from the core model tests
    assert_eq!(field(&out, "params"), "225615");
    assert!(field(&out, "flops").parse::<u64>().unwrap() > 0);
    assert!(field(&out, "inference_s").parse::<f64>().unwrap() > 0.0);
}

#[test]
fn config_files_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "base_filters = 8\nlearning_rate = 0.1\n").unwrap();
    let o = bin(&["benchmark", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    std::fs::write(&cfg, "# wider\nbase_filters = 8\n").unwrap();
    let o = bin(&["benchmark", "--config", p(&cfg), "--reps", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let desk2x = bin(&["benchmark", "--config", "desk2x", "--reps", "1"]);
    assert_eq!(field(&stdout(&o), "params"), field(&stdout(&desk2x), "params"));
}

#[test]
fn gradcheck_reports_a_single_line() {
    let o = bin(&["gradcheck", "--samples", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    assert!(field(&out, "max_rel_error").parse::<f64>().unwrap() < 1e-6);

    let o = bin(&["gradcheck", "--full-model", "--samples", "20"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(field(&out, "max_rel_error").parse::<f64>().unwrap() < 1e-4);
    assert_eq!(field(&out, "coords"), "20");
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["eval", "--checkpoint", p(&dir.path().join("none.svck")), "--data-dir", p(dir.path()), "--report", "r.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.lines().count(), 1);

    let bad = dir.path().join("data");
    std::fs::create_dir(&bad).unwrap();
    std::fs::write(bad.join("x.svv"), b"SVVX....").unwrap();
    let o = bin(&["train", "--data-dir", p(&bad), "--out-dir", p(&dir.path().join("run")), "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("offset 0"));
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for sub in ["a", "b"] {
        let o = bin(&["gen-data", "--seed", "3", "--count", "2", "--size", "16", "--out-dir", p(&d.join(sub))]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["case_0000.svv", "case_0001.svv"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap());
    }

    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, "total_steps = 50\nlr0 = 0.002\ncheckpoint_interval = 2\n").unwrap();
    for run in ["r1", "r2"] {
        let o = bin(&[
            "train", "--data-dir", p(&d.join("a")), "--config", p(&cfg), "--out-dir", p(&d.join(run)),
            "--steps", "3", "--seed", "5",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |run: &str, f: &str| std::fs::read(d.join(run).join(f)).unwrap();
    assert_eq!(read("r1", "loss.csv"), read("r2", "loss.csv"));
    assert_eq!(read("r1", "checkpoint.svck"), read("r2", "checkpoint.svck"));
    let log = String::from_utf8(read("r1", "loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,dice,recon,kl,total,lr"));
    // flag beats file: 3 steps, not 50; file beats default: lr0 0.002
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().nth(1).unwrap().ends_with(",0.002"));
    let effective = String::from_utf8(read("r1", "config.txt")).unwrap();
    assert!(effective.contains("model_seed = 5") && effective.contains("train_seed = 5"));

    let report = d.join("report.csv");
    let o = bin(&["eval", "--checkpoint", p(&d.join("r1").join("checkpoint.svck")), "--data-dir", p(&d.join("a")), "--report", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "class,dice,hd95");
    assert_eq!(lines.len(), 5);
    for l in &lines[1..] {
        let cols: Vec<_> = l.split(',').collect();
        assert_eq!(cols.len(), 3);
        assert!(cols[1].parse::<f64>().unwrap().is_finite());
        assert!(cols[2] == "undefined" || cols[2].parse::<f64>().is_ok());
    }

    let o = bin(&[
        "train", "--data-dir", p(&d.join("a")), "--out-dir", p(&d.join("r1")), "--steps", "3", "--seed", "6", "--resume",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model_seed"));
}

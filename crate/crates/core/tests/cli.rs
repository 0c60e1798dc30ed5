use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dualstore");

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name).display().to_string()
}

fn dualstore(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn fresh_run(seed: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("e");
    let d = d.to_str().unwrap();
    stdout(&dualstore(&["--seed", seed, "init", d]));
    stdout(&dualstore(&["--seed", seed, "run", d, &data("acceptance.trace")]))
}

#[test]
fn run_is_byte_identical_across_runs() {
    let a = fresh_run("7");
    let b = fresh_run("7");
    assert_eq!(a, b);
    assert!(a.contains("#DATA metric name=ops"), "{a}");
    assert!(a.contains("not_found"), "{a}");
}

#[test]
fn init_then_stats_then_reinit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("e");
    let d = d.to_str().unwrap();
    let init = stdout(&dualstore(&["--format", "v1", "init", d]));
    let stats = stdout(&dualstore(&["stats", d]));
    assert_eq!(init, stats);
    assert!(stats.contains("logical_used"), "{stats}");
    let again = dualstore(&["init", d]);
    assert_eq!(again.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&again.stderr).contains("already initialized"));
    // the entry format is fixed at init
    assert_eq!(dualstore(&["--format", "v2", "stats", d]).status.code(), Some(2));
}

#[test]
fn bench_and_archive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("e");
    let d = d.to_str().unwrap();
    stdout(&dualstore(&["--zstd", "init", d]));
    let spec = dir.path().join("bench.toml");
    std::fs::write(&spec, "ops = 300\npages = 32\nseed = 4\n").unwrap();
    let bench = stdout(&dualstore(&["bench", d, spec.to_str().unwrap()]));
    assert!(bench.contains("#DATA metric"), "{bench}");
    let archive = stdout(&dualstore(&["archive", d, "0", "15"]));
    assert!(archive.contains("pages_archived"), "{archive}");
    let stats = stdout(&dualstore(&["stats", d]));
    assert!(stats.contains("#DATA"), "{stats}");
}

#[test]
fn sched_prints_in_range_fraction() {
    let out = stdout(&dualstore(&["sched", "--steps", "3"]));
    assert!(out.contains("#DATA in_range_fraction="), "{out}");
    assert_eq!(out, stdout(&dualstore(&["sched", "--steps", "3"])));
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "replicas = 3\nno_such_key = 1\n").unwrap();
    let d = dir.path().join("e");
    let d = d.to_str().unwrap();
    assert_eq!(dualstore(&["init", d, "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&cfg, "replicas = 2\n").unwrap();
    assert_eq!(dualstore(&["init", d, "--config", cfg.to_str().unwrap()]).status.code(), Some(2));

    // trace ops that fail are counted in the report; a command that fails
    // outright exits with its class code
    std::fs::write(&cfg, "[device]\nlogical_capacity = 1048576\nphysical_capacity = 262144\n").unwrap();
    stdout(&dualstore(&["init", d, "--config", cfg.to_str().unwrap()]));
    let bench = stdout(&dualstore(&["bench", d]));
    assert!(bench.contains("errors.out_of_physical_space"), "{bench}");
    let full = dualstore(&["archive", d, "0", "255"]);
    assert_eq!(full.status.code(), Some(3), "{}", String::from_utf8_lossy(&full.stderr));

    let missing = dir.path().join("nope");
    assert_ne!(dualstore(&["stats", missing.to_str().unwrap()]).status.code(), Some(0));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sovsim::attestation::AttestationReport;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sovsim"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.json"))
}

fn sovsim(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn check_passes_on_a_cooperative_scenario() {
    let out = sovsim(&["check", scenario("cooperative_single").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for id in ["P1", "P2", "P3", "P4", "P5"] {
        assert!(text.contains(&format!("{id} PASS")), "{text}");
    }
}

#[test]
fn check_fails_with_counterexample_when_isolation_is_broken() {
    let out = sovsim(&["check", scenario("unlockable_entry").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("P3 FAIL"), "{text}");
    assert!(text.contains("violated at t="), "{text}");
}

#[test]
fn malformed_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"ram_size\": 4096,").unwrap();
    let out = sovsim(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    std::fs::write(&bad, "{\"unknown_field\": 1}").unwrap();
    assert_eq!(sovsim(&["check", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_file_exits_2() {
    let out = sovsim(&["run", "/nonexistent/scenario.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trace_file_matches_stdout() {
    let path = scenario("default");
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("trace.txt");
    let to_file = sovsim(&["run", path.to_str().unwrap(), "--trace", file.to_str().unwrap()]);
    assert!(to_file.status.success());
    assert!(to_file.stdout.is_empty());
    let to_stdout = sovsim(&["run", path.to_str().unwrap()]);
    assert_eq!(std::fs::read(&file).unwrap(), to_stdout.stdout);
}

#[test]
fn seed_and_until_overrides_take_effect() {
    let path = scenario("default");
    let p = path.to_str().unwrap();
    let base = stdout(&sovsim(&["run", p]));
    let reseeded = stdout(&sovsim(&["run", p, "--seed", "99"]));
    assert_ne!(base, reseeded);
    let short = stdout(&sovsim(&["run", p, "--until", "50"]));
    let last_t: u64 = short
        .lines()
        .filter_map(|l| l.strip_prefix("t=")?.split(' ').next()?.parse().ok())
        .max()
        .unwrap();
    assert!(last_t <= 50, "{last_t}");
}

#[test]
fn every_trace_line_has_the_fixed_prefix() {
    let text = stdout(&sovsim(&["run", scenario("peripheral_lifecycle").to_str().unwrap()]));
    let re = regex::Regex::new(r"^t=\d+ actor=(SM|LOS|s[0-9a-f]{16}) event=\S+( \w+=\S+)*$").unwrap();
    for line in text.lines() {
        assert!(re.is_match(line), "{line}");
    }
}

#[test]
fn attest_prints_a_parseable_report() {
    let nonce = "ab".repeat(32);
    let out = sovsim(&[
        "attest",
        scenario("attest").to_str().unwrap(),
        "--sapp",
        "0",
        "--nonce",
        &nonce,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let line = stdout(&out);
    let report: AttestationReport = line.trim().parse().unwrap();
    assert_eq!(hex::encode(report.nonce), nonce);
    assert_eq!(report.to_string(), line.trim());
    // Deterministic for a fixed scenario.
    let again = sovsim(&[
        "attest",
        scenario("attest").to_str().unwrap(),
        "--sapp",
        "0",
        "--nonce",
        &nonce,
    ]);
    assert_eq!(again.stdout, out.stdout);
}

#[test]
fn attest_rejects_bad_arguments() {
    let p = scenario("attest");
    let p = p.to_str().unwrap();
    let short_nonce = sovsim(&["attest", p, "--sapp", "0", "--nonce", "abcd"]);
    assert_eq!(short_nonce.status.code(), Some(2));
    let nonce = "00".repeat(32);
    let no_sapp = sovsim(&["attest", p, "--sapp", "42", "--nonce", &nonce]);
    assert_eq!(no_sapp.status.code(), Some(2));
}

#[test]
fn every_corpus_scenario_loads() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        sovsim::sim::load_scenario(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 20);
}

use std::process::Command;

use retroheap::harness::explore::{explore, ExploreConfig};
use retroheap::harness::report::{read_csv, write_csv, CsvRow, CSV_HEADER};
use retroheap::harness::workloads::{run_workload, Workload, WorkloadSpec};
use retroheap::protocol::ProtocolFaults;
use retroheap::MinorVariant;

fn small(workload: Workload, domains: usize, minor: MinorVariant) -> WorkloadSpec {
    let mut s = WorkloadSpec::new(workload, domains);
    s.minor = minor;
    s.arena_words = 4096;
    s.min_slice = Some(512);
    s.iterations = s.iterations / 10;
    s.retained = 5000;
    s
}

fn csv_bytes(spec: &WorkloadSpec) -> Vec<u8> {
    let r = run_workload(spec).unwrap();
    let mut out = Vec::new();
    write_csv(&mut out, &[CsvRow::from_result(&r)]).unwrap();
    out
}

#[test]
fn single_domain_treechurn_is_reproducible() {
    let mut spec = small(Workload::Treechurn, 1, MinorVariant::Stw);
    spec.logical_clock = true;
    spec.seed = 1234;
    let a = csv_bytes(&spec);
    let b = csv_bytes(&spec);
    assert_eq!(a, b);
    let rows = read_csv(&a[..]).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].minor_gcs > 0 && rows[0].pause_max_ns > 0, "{rows:?}");
}

#[test]
fn read_faults_only_under_the_concurrent_variant() {
    let conc = run_workload(&small(Workload::Chanshare, 2, MinorVariant::Conc)).unwrap();
    assert!(conc.report.read_faults > 0, "{:?}", conc.report);
    let stw = run_workload(&small(Workload::Chanshare, 2, MinorVariant::Stw)).unwrap();
    assert_eq!(stw.report.read_faults, 0);
    assert_eq!(conc.checksum, stw.checksum);
}

#[test]
fn every_workload_runs_clean_under_the_oracle() {
    for w in [Workload::Treechurn, Workload::Chanshare, Workload::Ephecache, Workload::Lazymemo] {
        for minor in [MinorVariant::Stw, MinorVariant::Conc] {
            let mut spec = small(w, 2, minor);
            spec.debug_oracle = true;
            let r = run_workload(&spec).unwrap();
            assert!(r.report.oracle_checks > 0, "{w:?} {minor:?}");
            assert!(r.report.oracle_violations.is_empty(), "{w:?} {minor:?}: {:?}", r.report.oracle_violations);
        }
    }
}

#[test]
fn bad_specs_are_rejected() {
    let mut s = small(Workload::Treechurn, 0, MinorVariant::Stw);
    assert!(run_workload(&s).is_err());
    s.domains = 1;
    s.arena_words = 1000;
    assert!(run_workload(&s).is_err());
}

#[test]
fn explorer_examples() {
    let one = explore(&ExploreConfig { domains: 1, revivals: 0, ..Default::default() });
    assert!(one.ok() && one.complete && one.cycled_states > 0);
    let two = explore(&ExploreConfig { domains: 2, revivals: 1, ..Default::default() });
    assert!(two.ok() && two.complete);
    let bug = explore(&ExploreConfig {
        domains: 2,
        revivals: 1,
        faults: ProtocolFaults { skip_barrier_recheck: true, ..ProtocolFaults::NONE },
        ..Default::default()
    });
    assert!(!bug.ok());
    assert!(!bug.violations[0].schedule.is_empty());
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retroheap"))
}

#[test]
fn cli_run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.csv");
    let hist = dir.path().join("h.dat");
    let json = dir.path().join("r.json");
    let st = cli()
        .args(["run", "--workload", "treechurn", "--domains", "1", "--arena-words", "4096", "--iterations", "50"])
        .args(["--seed", "9", "--max-slice", "2048", "--logical-clock"])
        .arg("--out")
        .arg(&out)
        .arg("--histogram")
        .arg(&hist)
        .arg("--json")
        .arg(&json)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert!(text.lines().nth(1).unwrap().starts_with("treechurn,stw,1,9,"));
    assert!(std::fs::read_to_string(&hist).unwrap().lines().count() > 1);
    let j: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(j["spec"]["seed"], 9);

    let again = dir.path().join("r2.csv");
    let st = cli()
        .args(["run", "--workload", "treechurn", "--domains", "1", "--arena-words", "4096", "--iterations", "50"])
        .args(["--seed", "9", "--max-slice", "2048", "--logical-clock"])
        .arg("--out")
        .arg(&again)
        .status()
        .unwrap();
    assert!(st.success());
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn cli_reports_configuration_errors() {
    let st = cli().args(["run", "--workload", "treechurn", "--arena-words", "1000"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("power of two"), "{}", String::from_utf8_lossy(&st.stderr));
}

#[test]
fn cli_explore_exit_codes() {
    let ok = cli().args(["explore", "--domains", "2", "--revivals", "1"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("no violations"));
    let bad = cli().args(["explore", "--domains", "2", "--revivals", "1", "--fault", "skip-round-compare"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.contains("violation:") && text.contains("start slice"), "{text}");
}

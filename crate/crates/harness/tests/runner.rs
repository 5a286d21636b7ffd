use std::process::Command;

use qsafe_core::ids::LinkId;
use qsafe_core::level::SecurityLevel;
use qsafe_harness::{load_topology, run_case, HarnessError, Mode, TestCase, TopologyConfig};

const FIG2: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/topologies/fig2.json");

#[test]
fn same_seed_yields_same_qkd_keys() {
    let keys = |seed| {
        let bed = load_topology(FIG2, Mode::InProc, seed).unwrap();
        let case = TestCase::from_config(&bed, "T1").unwrap();
        let run = run_case(&bed, &case, 3).unwrap();
        let kms = bed.kms("E").unwrap();
        let snapshot = kms.link_snapshot(&LinkId::from("L-EF")).unwrap();
        (run.samples.len(), snapshot.into_iter().map(|b| b.key).collect::<Vec<_>>())
    };
    assert_eq!(keys(5), keys(5));
    assert_eq!(keys(5).0, 6);
}

#[test]
fn removed_link_is_reported_as_mismatch() {
    let bed = load_topology(FIG2, Mode::InProc, 1).unwrap();
    bed.remove_link(&LinkId::from("L-DE")).unwrap();
    let case = TestCase::from_config(&bed, "T2").unwrap();
    match run_case(&bed, &case, 1) {
        Err(HarnessError::AssignmentMismatch { expected, assigned, .. }) => {
            assert_eq!(expected, SecurityLevel::L2);
            assert_eq!(assigned, SecurityLevel::L4);
        }
        other => panic!("expected a mismatch, got {other:?}"),
    }
}

#[test]
fn unknown_case_is_rejected() {
    let bed = load_topology(FIG2, Mode::InProc, 1).unwrap();
    assert!(matches!(TestCase::from_config(&bed, "T9"), Err(HarnessError::UnknownCase(_))));
}

#[test]
fn net_mode_runs_every_case() {
    let bed = load_topology(FIG2, Mode::Net, 1).unwrap();
    for case in TestCase::all_from_config(&bed) {
        let run = run_case(&bed, &case, 2).unwrap();
        assert_eq!(run.accuracy(), 1.0, "{}", case.id);
    }
}

#[test]
fn cli_run_and_check() {
    let bin = env!("CARGO_BIN_EXE_qsafe");
    let dir = tempfile::tempdir().unwrap();

    let out = Command::new(bin)
        .args(["run", "--topology", FIG2, "--iterations", "3", "--case", "T1", "--case", "T4", "--report"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("T1 APP_E->APP_F L1: PASS 3/3"), "{stdout}");
    assert!(stdout.contains("T4 APP_A->APP_B L4: PASS 3/3"), "{stdout}");
    assert!(dir.path().join("samples.csv").exists());
    assert!(dir.path().join("summary.json").exists());

    let out = Command::new(bin).args(["check", "--topology", FIG2]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("6 nodes (3 QN), 2 links, 4 cases"));

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "").unwrap();
    let out = Command::new(bin).arg("check").arg("--topology").arg(&empty).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(TopologyConfig::load(&empty).is_err());

    let out = Command::new(bin)
        .args(["run", "--topology", FIG2, "--case", "T9"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hydrokam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydrokam"))
        .args(args)
        .env_remove("HYDROKAM_WORKERS")
        .output()
        .expect("binary runs")
}

fn write_manifest(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(
        dir.path(),
        "m.json",
        r#"{"name": "x", "kind": "heps", "output_dir": "out", "params": {"epsilonn": 0.1}}"#,
    );
    let o = hydrokam(&["run", &m]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilonn"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn negative_particle_count_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(
        dir.path(),
        "m.json",
        r#"{"name": "x", "kind": "particles", "output_dir": "out", "params": {"sweep": [[0.1, -5]]}}"#,
    );
    let o = hydrokam(&["run", &m]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("params.sweep[0][1]"), "{err}");
    assert!(err.contains(">= 2"), "{err}");
}

#[test]
fn cell_run_is_reproducible_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(
        dir.path(),
        "cell.json",
        r#"{"name": "cell", "kind": "cell", "output_dir": "out", "emit": {"svg": true},
            "params": {"kappas": [0.2, 0.1]}}"#,
    );
    let o = hydrokam(&["run", &m]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let csv = fs::read(out.join("cell.csv")).unwrap();
    let header = String::from_utf8_lossy(&csv).lines().next().unwrap().to_string();
    assert_eq!(header, "alpha,beta,P,kappa,E_kappa,E_closed,abs_diff");
    // 27 lattice specs times 2 kappas
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 1 + 54);
    let svg = fs::read_to_string(out.join("cell.svg")).unwrap();
    assert!(svg.contains(">1e-1<") && svg.contains(">2e-1<"));
    assert!(out.join("results.json").exists());

    let o = hydrokam(&["run", &m]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(out.join("cell.csv")).unwrap(), csv);

    let o = hydrokam(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    fs::write(out.join("cell.csv"), b"tampered\n").unwrap();
    let o = hydrokam(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("hash mismatch"));
}

#[test]
fn invariants_filter_matching_nothing_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_manifest(
        dir.path(),
        "inv.json",
        r#"{"name": "inv", "kind": "invariants", "output_dir": "out", "emit": {"json": false},
            "params": {"filter": "no such check"}}"#,
    );
    let o = hydrokam(&["run", &m]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/invariants.csv")).unwrap();
    assert_eq!(csv, "check,value,relation,threshold,passed\n");
    assert!(!dir.path().join("out/results.json").exists());
}

#[test]
fn check_subcommand_passes() {
    let o = hydrokam(&["check", "--filter", "seed"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS seed split distinct"));
}

#[test]
fn report_without_records_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(hydrokam(&["report", dir.path().to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn particle_checkpoints_resume_to_the_same_table() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"{"name": "p", "kind": "particles", "seed": 5, "output_dir": "out",
        "params": {"sweep": [[0.2, 2000]], "replicas": 2, "horizon": 0.02, "grid_m": 32,
                   "reference_dt": 0.001, "checkpoint_every": 5}}"#;
    let m = write_manifest(dir.path(), "p.json", body);
    let o = hydrokam(&["run", &m]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let first = fs::read(out.join("particles.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().next().unwrap(), "eps,N,replica,error,stderr");
    // drop one finished row so the job is recomputed from scratch
    let ck = out.join("checkpoints");
    let done: Vec<_> = fs::read_dir(&ck)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".row.json"))
        .collect();
    assert_eq!(done.len(), 2);
    fs::remove_file(&done[0]).unwrap();
    let o = hydrokam(&["run", &m]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(out.join("particles.csv")).unwrap(), first);
}

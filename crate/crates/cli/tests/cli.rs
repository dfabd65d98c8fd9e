//! The `qrd` binary: exit codes, outputs and consistency between subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qutrit_readout::dataset::Split;
use qutrit_readout::dataset_file::read_dataset;
use qutrit_readout::pipeline::{load_bundle, BUNDLE_FILE, DATASET_FILE};

fn qrd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrd")).args(args).output().expect("qrd runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, n_qubits: usize) -> String {
    let path = dir.join(format!("run{n_qubits}.json"));
    let cfg = format!(
        r#"{{"seed": 21, "n_qubits": {n_qubits}, "states": "all", "shots_per_state": 120,
            "cluster": {{"subsample": 400}}, "train": {{"max_epochs": 30}}, "out_dir": "out{n_qubits}"}}"#
    );
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_seed_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = qrd(&["simulate", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("seed"));
}

#[test]
fn malformed_config_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"seed": 1, "sweep": [500, 100]}"#).unwrap();
    assert_eq!(code(&qrd(&["pipeline", "--config", p.to_str().unwrap()])), 2);
    assert_eq!(code(&qrd(&["pipeline", "--config", dir.path().join("absent.json").to_str().unwrap()])), 2);
}

#[test]
fn unreadable_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    assert_eq!(code(&qrd(&["pipeline", "--config", &cfg])), 0);
    let junk = dir.path().join("junk.qrt");
    fs::write(&junk, b"QRT1 but not really").unwrap();
    let o = qrd(&["classify", "--config", &cfg, "--dataset", junk.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn subcommands_agree_and_mismatches_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg2 = write_config(dir.path(), 2);
    let out2 = dir.path().join("out2");

    let sim = qrd(&["simulate", "--config", &cfg2]);
    assert_eq!(code(&sim), 0, "{}", stderr(&sim));
    assert!(String::from_utf8_lossy(&sim.stdout).contains("9 states"));
    let run = qrd(&["pipeline", "--config", &cfg2, "--labels", "truth", "--threads", "1"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));

    // The sweep table has one row per default trace length.
    let sw = qrd(&["sweep", "--config", &cfg2]);
    assert_eq!(code(&sw), 0, "{}", stderr(&sw));
    let sweep = fs::read_to_string(out2.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    let at_400: f64 = rows.iter().find(|r| r.starts_with("400,")).unwrap().split(',').nth(2).unwrap().parse().unwrap();

    // Classifying at 400 samples reproduces that sweep point on the test split.
    let cl = qrd(&["classify", "--config", &cfg2, "--n-keep", "400"]);
    assert_eq!(code(&cl), 0, "{}", stderr(&cl));
    let (bundle, _) = load_bundle(&out2.join(BUNDLE_FILE)).unwrap();
    let labels = bundle.reference_labels().unwrap();
    let ds = read_dataset(out2.join(DATASET_FILE)).unwrap();
    let mut reader = csv::Reader::from_path(out2.join("classify_400.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.iter().take(6).collect::<Vec<_>>(), ["shot", "split", "q0_level", "q0_p0", "q0_p1", "q0_p2"]);
    let mut correct = [0usize; 2];
    let mut total = 0usize;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let shot: usize = rec[0].parse().unwrap();
        if &rec[1] != "test" {
            continue;
        }
        assert_eq!(ds.split[shot], Split::Test);
        total += 1;
        for (q, c) in correct.iter_mut().enumerate() {
            let level: u8 = rec[2 + 4 * q].parse().unwrap();
            *c += (level == labels[q][shot]) as usize;
        }
    }
    let mean = correct.iter().map(|&c| c as f64 / total as f64).sum::<f64>() / 2.0;
    assert!((mean - at_400).abs() < 1e-12, "classify {mean} vs sweep {at_400}");

    let rep = qrd(&["report", "--config", &cfg2]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    assert!(String::from_utf8_lossy(&rep.stdout).contains("mlp"));

    // A one-qubit bundle cannot read a two-qubit dataset.
    let cfg1 = write_config(dir.path(), 1);
    assert_eq!(code(&qrd(&["pipeline", "--config", &cfg1])), 0);
    let o = qrd(&["classify", "--config", &cfg1, "--dataset", out2.join(DATASET_FILE).to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("qubit count mismatch: bundle has 1, dataset has 2"), "{}", stderr(&o));
}

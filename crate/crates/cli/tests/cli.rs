use std::path::{Path, PathBuf};
use std::process::Command;

use aphomlab::manifest::sha256_hex;
use aphomlab::{run, CliError, ExperimentConfig, RunManifest, RunOptions, MANIFEST_NAME};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(text, &root().join("configs")).unwrap()
}

fn run_in(cfg: &ExperimentConfig, dir: &Path) -> RunManifest {
    run(cfg, &RunOptions { out_dir: Some(dir.to_path_buf()), ..Default::default() }).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aphomlab"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn modulus_without_sigma_is_invalid() {
    let cfg = config(r#"{"schema_version":1,"kind":"modulus","field":"periodic-1d","params":{"s_max":64}}"#);
    assert!(matches!(cfg.validate(), Err(CliError::ConfigInvalid(m)) if m.contains("sigma")));
    let dir = tempfile::tempdir().unwrap();
    let e = run(&cfg, &RunOptions { out_dir: Some(dir.path().into()), ..Default::default() });
    assert!(matches!(e, Err(CliError::ConfigInvalid(_))));
    // nothing is written for a refused run
    assert!(!dir.path().join(MANIFEST_NAME).exists());
}

#[test]
fn malformed_configs_are_refused() {
    let dir = Path::new(".");
    for text in [
        r#"{"schema_version":2,"kind":"rate","field":"constant-1d","params":{"eps_list":[0.5,0.25],"sigma":0.5}}"#,
        r#"{"schema_version":1,"kind":"rate","field":"no-such-field","params":{"eps_list":[0.5,0.25],"sigma":0.5}}"#,
        r#"{"schema_version":1,"kind":"rate","field":"constant-1d","params":{"eps_list":[0.5,0.25]}}"#,
        r#"{"schema_version":1,"kind":"rate","field":"constant-1d","params":{"eps_list":[2.0],"sigma":0.5}}"#,
        r#"{"schema_version":1,"kind":"rate","field":"constant-2d","params":{"eps_list":[0.5,0.25],"sigma":0.5}}"#,
        r#"{"schema_version":1,"kind":"corrector","field":"constant-1d","params":{"s_list":[4],"checks":["slope"]}}"#,
        r#"{"schema_version":1,"kind":"corrector","field":"constant-1d","params":{"s_list":[4],"checks":["sup-bound"]}}"#,
        r#"{"schema_version":1,"kind":"flux","field":"periodic-1d","params":{"s_list":[4]}}"#,
    ] {
        let e = ExperimentConfig::from_json(text, dir).and_then(|c| c.validate());
        assert!(matches!(e, Err(CliError::ConfigInvalid(_))), "{text}: {e:?}");
    }
    for text in [
        r#"{"schema_version":1,"kind":"rate","field":"constant-1d","params":{"eps_list":[0.5],"sigma":0.5,"typo":1}}"#,
        r#"{"schema_version":1,"kind":"nope"}"#,
        r#"not json"#,
    ] {
        assert!(matches!(ExperimentConfig::from_json(text, dir), Err(CliError::ConfigInvalid(_))), "{text}");
    }
}

#[test]
fn under_resolved_eps_grid_is_refused() {
    // h = 1/64 puts only four nodes in an ε = 1/16 cell
    let cfg = config(r#"{"schema_version":1,"kind":"holder","field":"periodic-1d","params":{"eps_list":[0.0625],"h":0.015625}}"#);
    assert!(matches!(cfg.validate(), Err(CliError::ConfigInvalid(m)) if m.contains("h=")));
    let ok = config(r#"{"schema_version":1,"kind":"holder","field":"periodic-1d","params":{"eps_list":[0.0625],"h":0.00390625}}"#);
    ok.validate().unwrap();
}

#[test]
fn periodic_corrector_run_lists_dump_diagnostics_and_passes_the_oracle() {
    let cfg = config(r#"{"schema_version":1,"kind":"corrector","field":"periodic-1d","params":{"s_list":[16],"h":0.00390625}}"#);
    let dir = tempfile::tempdir().unwrap();
    let m = run_in(&cfg, dir.path());
    for f in ["corrector.csv", "chi_S16.csv", "diagnostics.json", "corrector.svg"] {
        assert!(m.file(f).is_some(), "{f} missing from {:?}", m.files);
    }
    let hm = m.check("harmonic-mean").expect("harmonic-mean runs by default on a periodic field");
    assert!(hm.passed, "{hm:?}");
    assert!(m.passed);
    // a(y) = 1/(1 + 0.5cos2πy) has ⟨1/a⟩ = 1, so the harmonic mean is 1
    let csv = std::fs::read_to_string(dir.path().join("corrector.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "a_hat_0").unwrap();
    let a_hat: f64 = row[col].parse().unwrap();
    assert!((a_hat - 1.0).abs() <= 0.05, "{a_hat}");
    let dump = std::fs::read_to_string(dir.path().join("chi_S16.csv")).unwrap();
    assert_eq!(dump.lines().next().unwrap(), "t,y0,chi_0");
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag[0]["diagnostics"]["S"], 16.0);
}

#[test]
fn manifest_lists_every_output_with_its_hash() {
    let cfg = config(r#"{"schema_version":1,"kind":"effective","field":"periodic-1d","params":{"s_list":[2,4],"h":0.0078125}}"#);
    let dir = tempfile::tempdir().unwrap();
    let m = run_in(&cfg, dir.path());
    let on_disk: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != MANIFEST_NAME)
        .collect();
    assert_eq!(on_disk.len(), m.files.len());
    for f in &m.files {
        let bytes = std::fs::read(dir.path().join(&f.path)).unwrap();
        assert_eq!(f.sha256, sha256_hex(&bytes));
        assert_eq!(f.bytes, bytes.len() as u64);
    }
    let stored: RunManifest = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap()).unwrap();
    assert_eq!(stored.files, m.files);
    assert_eq!(stored.config_hash, cfg.hash());
    assert_eq!(stored.software_version, env!("CARGO_PKG_VERSION"));
}

#[test]
fn config_hash_is_reproducible_and_ignores_the_output_directory() {
    let text = r#"{"schema_version":1,"kind":"rate","field":"constant-1d","seed":3,"params":{"eps_list":[0.5,0.25],"sigma":0.5}}"#;
    let a = config(text);
    let mut b = config(text);
    assert_eq!(a.hash(), b.hash());
    b.output = Some("elsewhere".into());
    assert_eq!(a.hash(), b.hash());
    b.seed = 4;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn constant_field_rate_study_sits_at_the_floor() {
    let cfg = config(r#"{"schema_version":1,"kind":"rate","field":"constant-1d","params":{"eps_list":[0.125,0.0625,0.03125],"sigma":0.5}}"#);
    let dir = tempfile::tempdir().unwrap();
    let m = run_in(&cfg, dir.path());
    assert!(m.check("floor").unwrap().passed);
    assert!(m.check("slope").is_none());
    assert!(m.passed);
    let csv = std::fs::read_to_string(dir.path().join("rate.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let err: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(err <= 1e-10);
    }
}

#[test]
fn jobs_do_not_change_the_csvs() {
    let cfg = config(r#"{"schema_version":1,"kind":"effective","field":"periodic-1d","params":{"s_list":[2,4,8],"h":0.0078125}}"#);
    let (d1, d3) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = run_in(&cfg, d1.path());
    let m3 = run(&cfg, &RunOptions { out_dir: Some(d3.path().into()), jobs: 3, seed: None }).unwrap();
    assert_eq!(m1.files, m3.files);
    assert_eq!(m3.jobs, 3);
}

#[test]
fn seed_override_is_recorded() {
    let cfg = config(r#"{"schema_version":1,"kind":"smoothing","seed":1,"params":{"eps_list":[0.0625],"checks":["young"]}}"#);
    let dir = tempfile::tempdir().unwrap();
    let m = run(&cfg, &RunOptions { out_dir: Some(dir.path().into()), seed: Some(99), ..Default::default() }).unwrap();
    assert_eq!(m.seed, 99);
    assert_ne!(m.config_hash, cfg.hash());
}

#[test]
fn binary_list_matches_the_golden_catalog() {
    let out = bin().arg("list").output().unwrap();
    assert!(out.status.success());
    let golden = std::fs::read_to_string(root().join("crates/cli/tests/golden/catalog.txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // 0: pass
    let ok = write_config(dir.path(), r#"{"schema_version":1,"kind":"corrector","field":"constant-1d","params":{"s_list":[4]}}"#);
    let out = bin().args(["run", ok.to_str().unwrap(), "--out", dir.path().join("ok").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS zero-corrector"));
    assert_eq!(bin().args(["validate", ok.to_str().unwrap()]).status().unwrap().code(), Some(0));

    // 1: a check fails (a single ε gives no slope)
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version":1,"kind":"smoothing","params":{"eps_list":[0.0625],"checks":["gradient-order"]}}"#).unwrap();
    let out = bin().args(["run", bad.to_str().unwrap(), "--out", dir.path().join("bad").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL gradient-order"));
    assert!(dir.path().join("bad").join(MANIFEST_NAME).exists());

    // 2: invalid config
    let inv = dir.path().join("inv.json");
    std::fs::write(&inv, r#"{"schema_version":1,"kind":"modulus","field":"periodic-1d"}"#).unwrap();
    assert_eq!(bin().args(["run", inv.to_str().unwrap()]).status().unwrap().code(), Some(2));
    assert_eq!(bin().args(["validate", inv.to_str().unwrap()]).status().unwrap().code(), Some(2));
    assert_eq!(bin().args(["run", dir.path().join("missing.json").to_str().unwrap()]).status().unwrap().code(), Some(2));
}

#[test]
fn config_output_resolves_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), r#"{"schema_version":1,"kind":"corrector","field":"constant-1d","output":"results","params":{"s_list":[2]}}"#);
    let cfg = ExperimentConfig::load(&p).unwrap();
    let m = run(&cfg, &RunOptions::default()).unwrap();
    assert!(m.passed);
    assert!(dir.path().join("results").join(MANIFEST_NAME).exists());
}

#[test]
fn svg_plots_are_written_with_labeled_axes() {
    let cfg = config(r#"{"schema_version":1,"kind":"effective","field":"periodic-1d","params":{"s_list":[2,4],"h":0.0078125}}"#);
    let dir = tempfile::tempdir().unwrap();
    run_in(&cfg, dir.path());
    let svg = std::fs::read_to_string(dir.path().join("effective.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains(">S</text>"));
}

use std::fs;
use std::path::Path;
use std::process::Command;

fn annihilate() -> Command {
    Command::new(env!("CARGO_BIN_EXE_annihilate"))
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|_| panic!("missing artifact {name}"))
}

#[test]
fn run_twice_writes_byte_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = annihilate()
            .args([
                "run",
                "--graph",
                "torus:d=1,L=512",
                "--nu",
                "+1:0.25,-1:0.25,0:0.5",
                "--da",
                "1",
                "--db",
                "1",
                "--tmax",
                "50",
                "--replicas",
                "4",
                "--seed",
                "7",
                "--fit-window",
                "1,50",
                "--out",
            ])
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(read(&a, "density.csv"), read(&b, "density.csv"));
    assert_eq!(read(&a, "fit.json"), read(&b, "fit.json"));
    // Manifests agree except for wall time.
    let strip = |dir: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_slice(&read(dir, "manifest.json")).unwrap();
        v.as_object_mut().unwrap().remove("wall_seconds");
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn spec_echo_reruns_to_identical_artifacts() {
    // Feed the normalized spec echoed in a manifest back in as a config
    // file: the artifacts must reproduce bit for bit.
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let out = annihilate()
        .args([
            "run",
            "--graph",
            "complete:n=12",
            "--nu",
            "+1:0.3,-1:0.3,0:0.4",
            "--tmax",
            "20",
            "--replicas",
            "3",
            "--seed",
            "11",
            "--mode",
            "coupled-general",
            "--db",
            "0.5",
            "--m",
            "0.1",
            "--out",
        ])
        .arg(&first)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&read(&first, "manifest.json")).unwrap();
    let config = tmp.path().join("echo.json");
    fs::write(&config, serde_json::to_string(&manifest["spec"]).unwrap()).unwrap();

    let second = tmp.path().join("second");
    let out = annihilate()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&second)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["density.csv", "density_shifted.csv", "tracers.jsonl"] {
        assert_eq!(read(&first, artifact), read(&second, artifact), "{artifact}");
    }
}

#[test]
fn invalid_specs_exit_two_with_diagnostics() {
    // Asymmetric kernel.
    let out = annihilate()
        .args([
            "validate",
            "--graph",
            "torus:d=1,L=8,kernel=1:0.7,-1:0.3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("negation-symmetric"));

    // Oversized coupling density: the diagnostic carries the bound.
    let out = annihilate()
        .args([
            "validate",
            "--mode",
            "coupled-equal",
            "--nu",
            "+1:0.25,-1:0.25,0:0.5",
            "--m",
            "0.9",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds 2*min"));

    // Both rates zero.
    let out = annihilate()
        .args(["validate", "--da", "0", "--db", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("must be positive"));

    // Unknown config keys are hard errors.
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.json");
    fs::write(&config, r#"{"graph":"complete:n=4","nu":"1:1.0","da":1,"db":1,"tmax":1,"mode":"plain","replicas":1,"seed":1,"typo_field":3}"#).unwrap();
    let out = annihilate()
        .args(["validate", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_field"));
}

#[test]
fn validate_echoes_fully_explicit_spec() {
    let out = annihilate()
        .args([
            "validate",
            "--mode",
            "coupled-general",
            "--nu",
            "+1:0.25,-1:0.25,0:0.5",
            "--db",
            "0.5",
            "--tmax",
            "10",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let spec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    // Defaults are filled in explicitly: the m-schedule, n, K, delta.
    assert_eq!(spec["n"], 0);
    assert_eq!(spec["k"], 1);
    assert_eq!(spec["delta"], 0.25);
    let m = spec["m"].as_f64().unwrap();
    assert!((m - 0.25 * 0.25 / 10.0).abs() < 1e-15);
}

#[test]
fn env_var_sets_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("from-env");
    let out = annihilate()
        .env("ANNIHILATE_OUT", &dir)
        .args([
            "run",
            "--graph",
            "complete:n=8",
            "--nu",
            "1:0.5,-1:0.5",
            "--tmax",
            "5",
            "--replicas",
            "2",
            "--seed",
            "1",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("density.csv").exists());
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn entangled_mode_runs_on_infinite_trees() {
    // The standalone entangled mode needs no coupled-init preconditions and
    // works on lazy infinite graphs.
    let tmp = tempfile::tempdir().unwrap();
    let out = annihilate()
        .args([
            "run",
            "--mode",
            "entangled",
            "--graph",
            "tree:r=3",
            "--nu",
            "0:1.0",
            "--da",
            "1",
            "--tmax",
            "8",
            "--replicas",
            "3",
            "--seed",
            "5",
            "--out",
        ])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(tmp.path().join("entangled.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(first["path_y"].as_array().unwrap().len() > 1);
}

#[test]
fn oracle_check_passes_on_k4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = annihilate()
        .args([
            "oracle-check",
            "--graph",
            "complete:n=4",
            "--max-steps",
            "3",
            "--replicas",
            "20000",
            "--out",
        ])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 4);
    assert!(tmp.path().join("oracle_report.json").exists());
}

#[test]
fn entangle_demo_traces_the_construction() {
    let out = annihilate()
        .args([
            "entangle-demo",
            "--graph",
            "torus:d=1,L=6",
            "--y",
            "0",
            "--z",
            "3",
            "--z-path",
            "0;1;2",
            "--ell",
            "1,2",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let demo: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let steps = demo["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    assert_eq!(steps[2]["distance"], 1);
    assert_eq!(steps[2]["switched"], true);
}

#[test]
fn fit_subcommand_reads_density_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let out = annihilate()
        .args([
            "run",
            "--graph",
            "torus:d=1,L=1024",
            "--nu",
            "+1:0.25,-1:0.25,0:0.5",
            "--tmax",
            "100",
            "--replicas",
            "4",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let fit_path = tmp.path().join("fit.json");
    let out = annihilate()
        .args(["fit", "--density"])
        .arg(dir.join("density.csv"))
        .args(["--window", "5,100", "--out"])
        .arg(&fit_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_slice(&fs::read(&fit_path).unwrap()).unwrap();
    assert!(fit["slope"].as_f64().unwrap() < 0.0);
}

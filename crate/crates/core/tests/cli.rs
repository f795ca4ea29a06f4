use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use thermopiezo::config::ExperimentConfig;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_thermopiezo"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small nondimensional variant of the inversion config, written into `dir`.
fn small_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = json(&config("inversion.json"));
    v["grid"]["n_elem"] = 8.into();
    v["time"]["n_step"] = 16.into();
    edit(&mut v);
    let p = dir.join("small.json");
    std::fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

#[test]
fn default_config_file_matches_builtin_default() {
    let file = ExperimentConfig::load(&config("default.json")).unwrap();
    assert_eq!(file, ExperimentConfig::default());
}

#[test]
fn every_bundled_config_validates() {
    let dir = tempfile::tempdir().unwrap();
    let mut count = 0;
    for entry in std::fs::read_dir(config("")).unwrap() {
        let path = entry.unwrap().path();
        let out = dir.path().join(path.file_stem().unwrap());
        assert_eq!(run(&["validate"], &path, &out), 0, "{path:?}");
        assert_eq!(json(&out.join("validation.json"))["passed"], Value::Bool(true));
        count += 1;
    }
    assert_eq!(count, 10);
}

#[test]
fn resolved_config_echoes_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("hot_spot.json");
    assert_eq!(run(&["validate"], &cfg, dir.path()), 0);
    let echoed = ExperimentConfig::load(&dir.path().join("resolved_config.json")).unwrap();
    let mut expected = ExperimentConfig::load(&cfg).unwrap();
    expected.output = dir.path().to_path_buf();
    assert_eq!(echoed, expected);
}

#[test]
fn zero_data_forward_run_stays_at_rest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["forward"], &config("zero_excitation.json"), dir.path()), 0);
    for name in ["u.csv", "v.csv", "theta.csv", "phi0.csv"] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("time,"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 513);
        for row in rows {
            assert!(
                row.split(',').skip(1).all(|x| x.parse::<f64>().unwrap() == 0.0),
                "{name}"
            );
        }
    }
    let summary = json(&dir.path().join("summary.json"));
    assert_eq!(summary["energy_aggregate_residual"].as_f64(), Some(0.0));
    assert_eq!(summary["theta_nonnegative"], Value::Bool(true));
    assert!(dir.path().join("energy.csv").exists());
    assert!(dir.path().join("weak_residual.csv").exists());
    assert!(dir.path().join("apriori.json").exists());
}

#[test]
fn derivative_check_is_exact_on_nondimensional_config() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["derivative-check"], &config("inversion.json"), dir.path()), 0);
    let r = json(&dir.path().join("derivative_check.json"));
    assert!(r["param_exactness"].as_f64().unwrap() <= 1e-12);
    assert!(r["state_taylor"].as_f64().unwrap() <= 1e-12);
    assert_eq!(r["triples"].as_u64(), Some(20));
}

#[test]
fn outputs_are_deterministic_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("inversion.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run(&["observe", "--seed", "5"], &cfg, out), 0);
        assert_eq!(run(&["invert", "--seed", "5"], &cfg, out), 0);
    }
    for name in [
        "observation.csv",
        "observation_clean.csv",
        "observation.json",
        "reconstruction.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = dir.path().join("c");
    assert_eq!(run(&["observe", "--seed", "6"], &cfg, &c), 0);
    assert_ne!(
        std::fs::read(a.join("observation.csv")).unwrap(),
        std::fs::read(c.join("observation.csv")).unwrap()
    );
}

#[test]
fn inversion_report_records_the_stop() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["invert"], &config("inversion.json"), dir.path()), 0);
    let r = json(&dir.path().join("reconstruction.json"));
    assert_eq!(r["stop_reason"], Value::String("discrepancy".into()));
    assert!(r["parameter_error"].as_f64().unwrap() <= 0.1);
}

#[test]
fn studies_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = dir.path().join("out");
    assert_eq!(run(&["epsilon-study"], &cfg, &out), 0);
    let r = json(&out.join("epsilon_study.json"));
    assert_eq!(r["epsilons"].as_array().unwrap().len(), 4);
    assert_eq!(run(&["convergence"], &cfg, &out), 0);
    assert!(json(&out.join("convergence.json")).is_object());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        "{\n  \"grid\": {\"length\": 1.0, \"n_elem\": 8, \"bogus\": 1}\n}\n",
    )
    .unwrap();
    assert_eq!(run(&["forward"], &bad, &dir.path().join("x")), 1);

    let envelope = small_config(dir.path(), |v| v["coefficients"]["gamma_max"] = 0.02.into());
    assert_eq!(run(&["forward"], &envelope, &dir.path().join("y")), 1);

    let overshoot = small_config(dir.path(), |v| {
        v["inversion"]["step"] = 2.5.into();
        v["inversion"]["max_halvings"] = 0.into();
        v["observation"]["delta"] = 0.0.into();
    });
    let out = dir.path().join("z");
    assert_eq!(run(&["invert"], &overshoot, &out), 3);
    assert_eq!(
        json(&out.join("reconstruction.json"))["stop_reason"],
        Value::String("divergence".into())
    );
}

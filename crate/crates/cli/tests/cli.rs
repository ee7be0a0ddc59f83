use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ddspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddspec"))
        .args(args)
        .env_remove("DDSPEC_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", stderr(&o));
    o
}

fn json(p: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn deviation<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["deviations"]
        .as_array()
        .unwrap()
        .iter()
        .find(|d| d["parameter"] == name)
        .unwrap()
}

#[test]
fn ramsey_without_noise_is_one_row_at_full_coherence() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "simulate",
        "--config",
        &config("ramsey.json"),
        "--out",
        path(dir.path()),
    ]));
    let text = std::fs::read_to_string(dir.path().join("traces.csv")).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows,
        [
            "family,t1_us,n,total_time_us,p,sigma_p",
            "custom,,0,1.0,1.0,0.002"
        ]
    );
    assert!(text.contains("# config_sha256: "));
    assert!(text.contains("# seed: 0"));
}

#[test]
fn simulation_is_reproducible_from_its_own_output() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(ddspec(&[
        "simulate",
        "--config",
        &config("simulate_635g.json"),
        "--out",
        path(&a),
    ]));
    ok(ddspec(&[
        "simulate",
        "--config",
        &config("simulate_635g.json"),
        "--out",
        path(&b),
    ]));
    let first = std::fs::read(a.join("traces.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.join("traces.csv")).unwrap());
    ok(ddspec(&[
        "simulate",
        "--config",
        path(&a.join("traces.csv")),
        "--out",
        path(&c),
    ]));
    assert_eq!(first, std::fs::read(c.join("traces.csv")).unwrap());

    ok(ddspec(&[
        "simulate",
        "--config",
        &config("simulate_635g.json"),
        "--seed",
        "9",
        "--out",
        path(&b),
    ]));
    let reseeded = std::fs::read_to_string(b.join("traces.csv")).unwrap();
    assert!(reseeded.contains("# seed: 9"));
    assert_ne!(first, reseeded.into_bytes());
}

#[test]
fn schema_errors_exit_1_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let out = dir.path().join("out");
    std::fs::write(
        &bad,
        r#"{"model": {"b_field_gauss": 700.0, "nsd": {"type": "gaussian", "y0": 1.0, "a": 1.0, "nu_l_khz": 750.0, "sigma_khz": 9.0}},
            "experiments": [{"kind": "decay", "family": "xy8", "t1_us": 0.3, "n": [8, -1]}]}"#,
    )
    .unwrap();
    let o = ddspec(&["simulate", "--config", path(&bad), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("experiments[0]") && stderr(&o).contains("-1"),
        "{}",
        stderr(&o)
    );
    assert!(!out.exists());

    std::fs::write(&bad, "{\n  \"nu_l_khz\": 750,\n  \"harmonics\": [1,\n}").unwrap();
    let o = ddspec(&["scan-plan", "--config", path(&bad), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn bad_trace_files_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.csv");
    std::fs::write(&traces, "# comment\nfamily,t1_us,n,total_time_us,p,sigma_p\nxy8,0.3,8,4.8,0.9,0.01\nxy8,0.3,16,9.6,oops,0.01\n").unwrap();
    let o = ddspec(&[
        "validate",
        "--config",
        &config("validate_635g.json"),
        "--traces",
        path(&traces),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(
        msg.contains("line 4") && msg.contains("column `p`"),
        "{msg}"
    );
}

#[test]
fn usage() {
    assert_eq!(ddspec(&["--help"]).status.code(), Some(0));
    assert_eq!(ddspec(&["simulate"]).status.code(), Some(1));
    assert_eq!(
        ddspec(&["simulate", "--config", "x.json", "--frobnicate"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(ddspec(&["bogus"]).status.code(), Some(1));
    assert_eq!(
        ddspec(&["simulate", "--config", "/nonexistent/config.json"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn numerical_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim.json");
    std::fs::write(
        &sim,
        r#"{"model": {"b_field_gauss": 700.0, "nsd": {"type": "gaussian", "y0": 5.0, "a": 600.0, "nu_l_khz": 750.0, "sigma_khz": 9.0}},
            "experiments": [{"kind": "decay", "family": "xy8", "t1_us": 1.0, "n": [8, 16, 24]},
                            {"kind": "decay", "family": "xy8", "t1_us": 1.01, "n": [8, 16, 24]}]}"#,
    )
    .unwrap();
    ok(ddspec(&[
        "simulate",
        "--config",
        path(&sim),
        "--out",
        path(dir.path()),
    ]));
    let rec = dir.path().join("rec.json");
    std::fs::write(&rec, r#"{"nu_l_khz_guess": 750.0}"#).unwrap();
    let out = dir.path().join("out");
    let o = ddspec(&[
        "reconstruct",
        "--config",
        path(&rec),
        "--traces",
        path(&dir.path().join("traces.csv")),
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage reconstruct"));
    assert!(!out.exists());
}

#[test]
fn pipeline_recovers_the_700_gauss_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "pipeline",
        "--config",
        &config("pipeline_700g.json"),
        "--out",
        path(dir.path()),
    ]));
    let model = json(dir.path().join("model.json"));
    let e = &model["estimate"];
    assert!((e["nu_l_khz"].as_f64().unwrap() - 750.0).abs() <= 0.5);
    assert!((e["a"].as_f64().unwrap() - 600.0).abs() <= 0.05 * 600.0);
    assert!((e["sigma_khz"].as_f64().unwrap() - 9.0).abs() <= 0.03 * 9.0);
    assert_eq!(model["provenance"]["seed"], 7);
    assert_eq!(model["provenance"]["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(
        model["provenance"]["config_sha256"].as_str().unwrap().len(),
        64
    );

    // The pipeline's traces go back through the standalone commands.
    let traces = dir.path().join("traces.csv");
    let rec = dir.path().join("rec.json");
    std::fs::write(&rec, r#"{"nu_l_khz_guess": 750.0}"#).unwrap();
    let again = dir.path().join("again");
    ok(ddspec(&[
        "reconstruct",
        "--config",
        path(&rec),
        "--traces",
        path(&traces),
        "--out",
        path(&again),
    ]));
    let e2 = json(again.join("model.json"))["estimate"].clone();
    assert!((e2["a"].as_f64().unwrap() - e["a"].as_f64().unwrap()).abs() < 1e-6 * 600.0);
    assert!(std::fs::read_to_string(again.join("rates.csv"))
        .unwrap()
        .contains("rate_per_ms"));
    assert_eq!(
        json(again.join("model.json"))["provenance"]["inputs"][0]["sha256"]
            .as_str()
            .unwrap()
            .len(),
        64
    );
}

#[test]
fn flat_noise_gives_no_peak() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "pipeline",
        "--config",
        &config("pipeline_flat.json"),
        "--out",
        path(dir.path()),
    ]));
    let a = deviation(&json(dir.path().join("report.json")), "A").clone();
    assert!(
        a["estimate"].as_f64().unwrap() <= 2.0 * a["error"].as_f64().unwrap(),
        "{a}"
    );
}

#[test]
fn strong_coupling_pipeline_flags_method_1() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "pipeline",
        "--config",
        &config("pipeline_strong.json"),
        "--threads",
        "1",
        "--out",
        path(dir.path()),
    ]));
    let report = json(dir.path().join("report.json"));
    let strong = &report["strong_coupling"];
    assert_eq!(strong["method1_high_n_failure"], true, "{strong}");
    assert!(strong["regime"]["groups"].as_array().unwrap().len() == 2);
}

#[test]
fn harmonics_flag_overrides_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "scan-plan",
        "--config",
        &config("scan_plan.json"),
        "--harmonics",
        "2",
        "--out",
        path(dir.path()),
    ]));
    let text = std::fs::read_to_string(dir.path().join("scan_plan.csv")).unwrap();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    assert_eq!(rows.len(), 33);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("2")));
    assert!(text.contains("\"harmonics\":[2]"));
    let o = ddspec(&[
        "scan-plan",
        "--config",
        &config("scan_plan.json"),
        "--harmonics",
        "1,x",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn coupling_fit_from_simulated_modulation() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "simulate",
        "--config",
        &config("simulate_coupling.json"),
        "--out",
        path(dir.path()),
    ]));
    let out = dir.path().join("fit");
    ok(ddspec(&[
        "nuclei",
        "--config",
        &config("nuclei_635g.json"),
        "--traces",
        path(&dir.path().join("traces.csv")),
        "--out",
        path(&out),
    ]));
    let c = &json(out.join("coupling.json"))["couplings"][0];
    assert!(
        (c["omega_par_khz"].as_f64().unwrap() + 698.0).abs() <= 16.0,
        "{c}"
    );
    assert!(
        (c["omega_perp_khz"].as_f64().unwrap() - 148.0).abs() <= 26.0,
        "{c}"
    );
}

#[test]
fn direct_fit_and_validation_on_mixed_sequences() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "simulate",
        "--config",
        &config("simulate_635g.json"),
        "--out",
        path(dir.path()),
    ]));
    let traces = dir.path().join("traces.csv");
    let fit = dir.path().join("fit");
    ok(ddspec(&[
        "fit-direct",
        "--config",
        &config("fit_direct_635g.json"),
        "--traces",
        path(&traces),
        "--out",
        path(&fit),
    ]));
    let model = json(fit.join("model.json"));
    assert_eq!(model["estimate"]["nu_l_khz"].as_f64().unwrap(), 679.9);

    // Score the fitted model as the high-n model next to the generating one.
    let cfg = json(PathBuf::from(config("validate_635g.json")));
    let mut cfg = cfg.as_object().unwrap().clone();
    cfg.insert("high_n_model".into(), model["model"].clone());
    let cfg_path = dir.path().join("validate.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let val = dir.path().join("val");
    let o = ok(ddspec(&[
        "validate",
        "--config",
        path(&cfg_path),
        "--traces",
        path(&traces),
        "--out",
        path(&val),
    ]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("combined"));
    let report = json(val.join("report.json"));
    assert!(report["chi_nu"].as_f64().unwrap() < 2.0);
    assert!(report["regime"]["combined"].as_f64().is_some());
}

#[test]
fn filter_and_oracle_tables() {
    let dir = tempfile::tempdir().unwrap();
    ok(ddspec(&[
        "filter",
        "--config",
        &config("filter_xy8.json"),
        "--out",
        path(dir.path()),
    ]));
    let summary = json(dir.path().join("filter.json"));
    assert_eq!(summary["n_pulses"], 128);
    assert!(summary["chi"].as_f64().unwrap() > 0.0);
    let table = std::fs::read_to_string(dir.path().join("filter.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 2002);

    ok(ddspec(&[
        "oracle",
        "--config",
        &config("oracle_weak.json"),
        "--out",
        path(dir.path()),
    ]));
    let table = std::fs::read_to_string(dir.path().join("oracle.csv")).unwrap();
    let worst = table
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Some((f[1].parse::<f64>().ok()? - f[2].parse::<f64>().ok()?).abs())
        })
        .fold(0.0, f64::max);
    assert!(worst <= 0.01, "{worst}");
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ddspec"))
        .args(["simulate", "--config", &config("ramsey.json")])
        .env("DDSPEC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    ok(o);
    assert!(dir.path().join("traces.csv").exists());
}

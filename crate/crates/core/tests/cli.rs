use std::fs;
use std::process::Command;

use voltvar::cli::{run, solve_report, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE};
use voltvar::dispatch::DEFAULT_QP_TOL;
use voltvar::powerflow::{Model, DEFAULT_AC_MAX_ITER, DEFAULT_AC_TOL};
use voltvar::{generate_circuit, Policy, ScenarioParams};

fn call(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["voltvar"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

#[test]
fn generate_then_solve_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let p = path.to_str().unwrap();
    let (code, _, err) = call(&[
        "generate", "--seed", "11", "--r", "0.7", "--s", "1.3", "--out", p,
    ]);
    assert_eq!(code, EXIT_OK, "{err}");

    let params = ScenarioParams {
        seed: 11,
        penetration_r: 0.7,
        s_value: 1.3,
        ..Default::default()
    };
    let circuit = generate_circuit(&params).unwrap();
    for (flag, policy) in [
        ("zero", Policy::Zero),
        ("local", Policy::Local),
        ("optimal", Policy::Optimal),
    ] {
        let (code, out, err) = call(&["solve", "--circuit", p, "--policy", flag]);
        assert_eq!(code, EXIT_OK, "{err}");
        let expect = solve_report(
            &circuit,
            policy,
            Model::Ac,
            params.epsilon,
            DEFAULT_AC_TOL,
            DEFAULT_AC_MAX_ITER,
            DEFAULT_QP_TOL,
        )
        .unwrap();
        assert_eq!(out.as_bytes(), expect.as_slice(), "policy {flag}");
    }
}

#[test]
fn solve_prints_nodes_and_losses() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let p = path.to_str().unwrap();
    assert_eq!(call(&["generate", "--n", "4", "--out", p]).0, EXIT_OK);
    let (code, out, _) = call(&["solve", "--circuit", p, "--model", "lin"]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "node,v_squared,v,P_out,Q_out");
    assert_eq!(lines.len(), 1 + 5 + 1);
    assert!(lines[6].starts_with("# losses_kw,"));
}

#[test]
fn dispatch_exports_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let p = path.to_str().unwrap();
    assert_eq!(
        call(&["generate", "--n", "10", "--r", "0.5", "--out", p]).0,
        EXIT_OK
    );
    let (code, out, _) = call(&["dispatch", "--circuit", p]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["status"], "OPTIMAL");
    assert_eq!(v["q_g"].as_array().unwrap().len(), 10);
    assert!(v["kkt_residual"].as_f64().unwrap() <= DEFAULT_QP_TOL);

    let (code, out, _) = call(&["dispatch", "--circuit", p, "--policy", "local"]);
    assert_eq!(code, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["policy"], "LOCAL");
}

#[test]
fn infeasible_band_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let p = path.to_str().unwrap();
    // Forty heavy loads on long spans pull the far end well below the band.
    let code = call(&[
        "generate",
        "--n",
        "40",
        "--p-c-max",
        "60",
        "--r",
        "0.1",
        "--out",
        p,
    ])
    .0;
    assert_eq!(code, EXIT_OK);
    let (code, _, err) = call(&["dispatch", "--circuit", p]);
    assert_eq!(code, EXIT_NUMERICAL, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "infeasible");
    assert_eq!(v["exit_code"], EXIT_NUMERICAL);
}

#[test]
fn bad_input_exits_one() {
    let (code, _, err) = call(&["generate", "--r", "1.5"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("penetration_r"));
    let (code, _, _) = call(&["solve", "--circuit", "/nonexistent/c.json"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, err) = call(&["sweep-s", "--s", "2:1:0.1"]);
    assert_eq!(code, EXIT_USAGE, "{err}");
    let (code, _, _) = call(&["solve", "--policy", "greedy"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"params": {"n": 6, "seed": 3, "penetration_r": 0.5}}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();

    let (_, from_file, _) = call(&["--config", cfg, "generate"]);
    let expect = generate_circuit(&ScenarioParams {
        n: 6,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(from_file, expect.to_json().unwrap());

    let (_, flagged, _) = call(&["--config", cfg, "generate", "--seed", "4"]);
    let expect = generate_circuit(&ScenarioParams {
        n: 6,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(flagged, expect.to_json().unwrap());

    fs::write(dir.path().join("bad.json"), r#"{"sede": 3}"#).unwrap();
    let bad = dir.path().join("bad.json");
    let (code, _, err) = call(&["--config", bad.to_str().unwrap(), "generate"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("json"));
}

#[test]
fn sweep_is_byte_identical_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |out: &str| {
        vec![
            "sweep-s".to_string(),
            "--n".into(),
            "30".into(),
            "--r".into(),
            "1.0".into(),
            "--s".into(),
            "1.0:1.4:0.2".into(),
            "--realizations".into(),
            "3".into(),
            "--out".into(),
            out.into(),
        ]
    };
    let mut first = args(a.to_str().unwrap());
    first.push("--parallel".into());
    let run_with = |v: Vec<String>| {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let mut argv = vec!["voltvar".to_string()];
        argv.extend(v);
        run(argv, &mut o, &mut e)
    };
    assert_eq!(run_with(first), EXIT_OK);
    assert_eq!(run_with(args(b.to_str().unwrap())), EXIT_OK);
    let (ta, tb) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    let text = String::from_utf8(ta).unwrap();
    assert!(text.starts_with("s_kva,r,policy,n,"));
    assert_eq!(text.lines().count(), 1 + 3 * 3);
    assert!(text.contains("\n1.2,1,LOCAL,3,"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "sweep-s");
    assert_eq!(manifest["rows"], 27);
    assert_eq!(manifest["spec"]["base_params"]["n"], 30);
}

#[test]
fn profile_writes_one_line_per_node() {
    let (code, out, err) = call(&["profile", "--r", "0.9", "--s", "2.0", "--seed", "7"]);
    assert_eq!(code, EXIT_OK, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "node,v_ratio_baseline,v_ratio_optimal,q_g_kvar");
    assert_eq!(lines.len(), 102);
}

#[test]
fn binary_reports_errors_as_json() {
    let exe = env!("CARGO_BIN_EXE_voltvar");
    let out = Command::new(exe).arg("--bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"], "usage");

    let out = Command::new(exe).arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));

    let out = Command::new(exe)
        .args(["generate", "--n", "3"])
        .env("VOLTVAR_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let expect = generate_circuit(&ScenarioParams {
        n: 3,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        expect.to_json().unwrap()
    );
}

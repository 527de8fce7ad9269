mod common;

use common::{read_csv, run};

#[test]
fn invalid_correlation_points_at_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let r = run("lq", dir.path(), "[problem]\nrho = 1.5\n", &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("problem.rho"), "{}", r.stderr);
}

#[test]
fn unknown_keys_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = run("lq", dir.path(), "[grid]\nspacing = 0.1\n", &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("spacing"), "{}", r.stderr);
}

#[test]
fn risk_neutral_efforts_coincide_with_first_best() {
    let dir = tempfile::tempdir().unwrap();
    let r = run("lq", dir.path(), "[problem]\nrisk_aversion = 0.0\nk1 = 1.5\ngamma1 = 0.2\n", &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let t = read_csv(&dir.path().join("out/lq.csv"));
    for (a, b, c) in [("nu1", "nua1", "fb1"), ("nu2", "nua2", "fb2")] {
        assert_eq!(t.f(0, a), t.f(0, b));
        assert_eq!(t.f(0, a), t.f(0, c));
    }
    assert!((t.f(0, "fb1") - 1.5 * 1.2).abs() < 1e-15);
    assert!(t.f(0, "first_best_wage").is_nan());
    assert_eq!(t.header, "# common-agency lq schema 1");
}

#[test]
fn benchmark_rows_are_ordered_by_effort() {
    let dir = tempfile::tempdir().unwrap();
    run("lq", dir.path(), "", &[]);
    let t = read_csv(&dir.path().join("out/lq_benchmark.csv"));
    let total = t.column("total_effort");
    assert!(total[0] < total[1] && total[1] < total[2], "{total:?}");
}

#[test]
fn json_tables_carry_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let r = run("lq", dir.path(), "", &["--format", "json"]);
    assert_eq!(r.code, 0);
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/lq.json")).unwrap()).unwrap();
    assert_eq!(v["schema"], "lq");
    assert_eq!(v["schema_version"], 1);
    let cols = v["columns"].as_array().unwrap();
    let i = cols.iter().position(|c| c == "nu1").unwrap();
    assert!((v["rows"][0][i].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    run("lq", dir.path(), "seed = 1\nformat = \"json\"\n", &["--seed", "9", "--format", "csv"]);
    let echo = std::fs::read_to_string(dir.path().join("out/resolved_config.toml")).unwrap();
    let cfg: toml::Table = echo.parse().unwrap();
    assert_eq!(cfg["seed"].as_integer(), Some(9));
    assert_eq!(cfg["format"].as_str(), Some("csv"));
    assert!(dir.path().join("out/lq.csv").exists());
}

#[test]
fn failing_inversion_surfaces_as_solver_error() {
    // A tight effort box saturates the best response, so Id + Phi cannot be inverted.
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[effort]\nmodel = \"quartic\"\nkappa = 1.0\nbound = 0.2\n[grid]\nn_x = 21\nsave_layers = 1\n";
    let r = run("hjb", dir.path(), cfg, &[]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("did not converge"), "{}", r.stderr);
}

#[test]
fn quartic_grid_solve_reports_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[effort]\nmodel = \"quartic\"\nkappa = 0.5\n[grid]\nn_x = 21\nsave_layers = 2\n";
    let r = run("hjb", dir.path(), cfg, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let s = read_csv(&dir.path().join("out/hjb_summary.csv"));
    assert!(!s.rows[0].contains_key("err_v"));
    assert!(s.f(0, "decomposition_gap") < 1e-10);
    assert!(s.f(0, "foc_residual") < 1e-8);
    let g = read_csv(&dir.path().join("out/hjb_grid.csv"));
    assert_eq!(g.rows.len(), 3 * 21 * 21);
}

#[test]
fn deterministic_wage_gives_exact_utility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[sim]\nn_paths = 200\ndt = 0.1\ncontract = \"deterministic\"\nwage = 0.7\ndump_paths = 2\n";
    let r = run("simulate", dir.path(), cfg, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let t = read_csv(&dir.path().join("out/sim_estimates.csv"));
    let row = t.find("quantity", "agent_utility");
    assert!((t.f(row, "estimate") + (-0.7f64).exp()).abs() < 1e-15);
    assert!(t.f(row, "se") < 1e-15);
    let p = read_csv(&dir.path().join("out/paths.csv"));
    assert_eq!(p.rows.len(), 2 * 11);
    assert!(p.column("xi_1").iter().all(|v| *v == 0.35));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/sim_report.json")).unwrap()).unwrap();
    assert_eq!(report["schema"], "sim_report");
    assert!(report["equilibrium_residuals"].is_null());
}

#[test]
fn equilibrium_residuals_vanish_for_closed_form_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let r = run("simulate", dir.path(), "[sim]\nn_paths = 1000\ndt = 1e-2\ncheck_best_response = true\n", &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let t = read_csv(&dir.path().join("out/sim_estimates.csv"));
    for q in ["residual_y", "residual_alpha", "residual_beta"] {
        assert!(t.f(t.find("quantity", q), "estimate") <= 1e-12);
    }
    let br = read_csv(&dir.path().join("out/sim_best_response.csv"));
    assert_eq!(br.rows.len(), 1 + 8);
    for i in 1..br.rows.len() {
        assert!(br.f(i, "delta") <= 2.0 * br.f(i, "delta_se"));
    }
}

#[test]
fn dominance_flips_at_the_efficiency_ratio() {
    // k1 / k2 = 1.5 = (1 + x) / (1 - x) at x = gamma2 - gamma1 = 0.2.
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[problem]\nrisk_aversion = 0.0\nk1 = 1.5\n\
               [sweep]\nparameter = \"gamma_diff\"\nlo = -0.5\nhi = 0.5\ncount = 41\n";
    let r = run("sensitivity", dir.path(), cfg, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let t = read_csv(&dir.path().join("out/sensitivity.csv"));
    for (i, row) in t.rows.iter().enumerate() {
        let x = t.f(i, "value");
        assert_eq!(row["works_more_for_1"], row["dominance_condition"], "x = {x}");
        let expected = x < 0.2 - 1e-12;
        if (x - 0.2).abs() > 1e-9 {
            assert_eq!(row["works_more_for_1"], expected.to_string(), "x = {x}");
        }
        assert!((t.f(i, "threshold") - (1.0 + x) / (1.0 - x)).abs() < 1e-12);
    }
}

#[test]
fn equal_appetence_gives_zero_gap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "[problem]\ngamma2 = 0.4\n[sweep]\nparameter = \"gamma1\"\nlo = 0.0\nhi = 0.8\ncount = 3\n";
    run("sensitivity", dir.path(), cfg, &[]);
    let t = read_csv(&dir.path().join("out/sensitivity.csv"));
    assert_eq!(t.f(1, "value"), 0.4);
    assert_eq!(t.f(1, "d"), 0.0);
    assert!(t.f(0, "d") < 0.0 && t.f(2, "d") > 0.0);
    assert_eq!(t.column("index"), vec![0.0, 1.0, 2.0]);
}

#[test]
fn sensitivity_requires_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let r = run("sensitivity", dir.path(), "", &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("sweep"));
}

#[test]
fn nash_check_deviates_only_the_chosen_principal() {
    let dir = tempfile::tempdir().unwrap();
    let r = run(
        "nash-check",
        dir.path(),
        "seed = 2\n[sim]\nn_paths = 2000\ndt = 0.05\n[nash]\nprincipal = 2\noffsets = [-0.2, 0.2]\nfree_ride = false\n",
        &[],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    let t = read_csv(&dir.path().join("out/nash_deviations.csv"));
    assert_eq!(t.rows.len(), 1 + 4);
    assert!(t.rows.iter().all(|r| r["principal"] == "2"));
    let bad = run("nash-check", dir.path(), "[nash]\nprincipal = 3\n", &[]);
    assert_eq!(bad.code, 2);
}

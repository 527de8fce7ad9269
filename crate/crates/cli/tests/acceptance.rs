//! End-to-end acceptance checks. Each criterion prints one `PASS` or `FAIL`
//! line; the test fails if any criterion does.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{read_csv, run};
use common_agency::lq::{self, LQParams, SigmaSpec};
use rand::{rngs::StdRng, Rng, SeedableRng};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn random_params(rng: &mut StdRng, identity: bool, equal_k: bool) -> LQParams {
    let k1 = rng.random_range(0.2..3.0);
    LQParams {
        k1,
        k2: if equal_k { k1 } else { rng.random_range(0.2..3.0) },
        sigma: SigmaSpec::Correlation(if identity { 0.0 } else { rng.random_range(-0.95..0.95) }),
        gamma1: rng.random_range(0.0..1.0),
        gamma2: rng.random_range(0.0..1.0),
        risk_aversion: rng.random_range(0.0..3.0),
        reservation_utility: rng.random_range(-2.0..-0.1),
        horizon: rng.random_range(0.1..3.0),
        x0: [0.0, 0.0],
    }
}

fn golden_values(dir: &Path) -> Outcome {
    let p = LQParams::default();
    let start = Instant::now();
    let sol = lq::solve(&p).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let expected = [
        (sol.nu_star[0], 1.0 / 3.0),
        (sol.nu_star[1], 1.0 / 3.0),
        (sol.nu_aggregated[0], 0.5),
        (sol.nu_aggregated[1], 0.5),
        (sol.lambda, 4.0 / 9.0),
        (sol.lambda_tilde, 2.0 / 9.0),
        (sol.delta, 2.0 / 9.0),
        (sol.delta_a, 0.5),
    ];
    let err = expected.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let r = run("lq", dir, "", &[]);
    let t = read_csv(&dir.join("out/lq.csv"));
    let cli_err = [("nu1", 1.0 / 3.0), ("nua1", 0.5), ("delta", 2.0 / 9.0), ("delta_a", 0.5), ("lambda", 4.0 / 9.0)]
        .iter()
        .map(|(c, v)| (t.f(0, c) - v).abs())
        .fold(0.0, f64::max);
    check(
        err <= 1e-12 && cli_err <= 1e-12 && r.code == 0 && elapsed < Duration::from_millis(1),
        format!("max error {err:.1e} (cli {cli_err:.1e}), solve {elapsed:?}"),
    )
}

fn risk_neutral_limit() -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    for e in 0..=6 {
        let p = LQParams {
            risk_aversion: 10f64.powi(-e),
            ..LQParams::default()
        };
        let s = lq::solve(&p).map_err(|e| e.to_string())?;
        gaps.push((s.nu_star[0] - s.nu_aggregated[0]).hypot(s.nu_star[1] - s.nu_aggregated[1]));
    }
    let p0 = LQParams {
        risk_aversion: 0.0,
        ..LQParams::default()
    };
    let s0 = lq::solve(&p0).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let kg = [p0.k1 * p0.gamma_vector()[0], p0.k2 * p0.gamma_vector()[1]];
    let exact = s0.nu_star == s0.nu_aggregated && s0.nu_star == kg;
    check(
        decreasing && gaps[6] < 1e-5 && exact && elapsed < Duration::from_millis(10),
        format!(
            "gaps {:.1e} .. {:.1e}, decreasing {decreasing}, R_A = 0 coincides {exact}, {elapsed:?}",
            gaps[0], gaps[6]
        ),
    )
}

fn decomposition() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let (mut gap, mut res, mut lam) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let p = random_params(&mut rng, false, false);
        let s = lq::solve(&p).map_err(|e| e.to_string())?;
        let t = rng.random_range(0.0..p.horizon);
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let v = lq::value_v(t, &x, &s, &p);
        let sum = lq::value_vi(0, t, &x, &s, &p) + lq::value_vi(1, t, &x, &s, &p);
        gap = gap.max((sum - v).abs() / v.abs().max(1.0));
        lam = lam.max((2.0 * s.lambda_tilde - s.lambda).abs());
        let r = lq::hjb_residuals(t, &x, &s, &p);
        res = res.max(r[0].abs()).max(r[1].abs());
    }
    check(
        gap <= 1e-12 && lam <= 1e-12 && res <= 1e-10,
        format!("|v1 + v2 - V| {gap:.1e}, |2 lambda_tilde - lambda| {lam:.1e}, HJB residual {res:.1e}"),
    )
}

fn grid_oracle(dir: &Path) -> Outcome {
    let lq_cfg = "[grid]\nlo = -3.0\nhi = 3.0\nn_x = 61\nsave_layers = 10\n";
    let a = run("hjb", &dir.join("lq"), lq_cfg, &["--threads", "1"]);
    if a.code != 0 {
        return Err(a.stderr);
    }
    let s = read_csv(&dir.join("lq/out/hjb_summary.csv"));
    let errs: Vec<f64> = ["err_v", "err_u1", "err_beta_bar", "err_beta1"].iter().map(|c| s.f(0, c)).collect();
    let worst = errs.iter().cloned().fold(0.0, f64::max);

    // The LQ solution is affine in x, so the scheme reproduces it to rounding
    // and no order is visible; the order comes from the curved instance.
    let bump_cfg = "[problem]\nhorizon = 0.5\n[grid]\nlo = -3.0\nhi = 3.0\nn_x = 61\nsave_layers = 1\n\
                    refinement_levels = 2\nbump_amplitude = 1.0\nbump_width = 0.5\n";
    let b = run("hjb", &dir.join("bump"), bump_cfg, &["--threads", "1"]);
    if b.code != 0 {
        return Err(b.stderr);
    }
    let r = read_csv(&dir.join("bump/out/hjb_refinement.csv"));
    let order = r.f(1, "order");
    let elapsed = a.elapsed + b.elapsed;
    check(
        worst <= 1e-3 && order >= 1.8 && elapsed < Duration::from_secs(30),
        format!(
            "max interior error {worst:.1e}, refinement errors {:.2e} -> {:.2e} (order {order:.3}), {elapsed:.1?}",
            r.f(0, "max_error"),
            r.f(1, "max_error")
        ),
    )
}

fn participation_by_simulation(dir: &Path) -> Outcome {
    let r = run("simulate", dir, "seed = 5\n[sim]\nn_paths = 100000\ndt = 1e-3\n", &[]);
    if r.code != 0 {
        return Err(r.stderr);
    }
    let t = read_csv(&dir.join("out/sim_estimates.csv"));
    let row = t.find("quantity", "agent_utility");
    let (mean, se) = (t.f(row, "estimate"), t.f(row, "se"));
    let z = (mean + 1.0).abs() / se;
    check(
        z <= 3.0 && se < 5e-3 && r.elapsed < Duration::from_secs(60),
        format!("utility {mean:.5} +- {se:.1e} vs R0 = -1 ({z:.2} SE), {:.1?}", r.elapsed),
    )
}

fn nash(dir: &Path) -> Outcome {
    let r = run("nash-check", dir, "seed = 6\n[sim]\nn_paths = 20000\ndt = 1e-2\n", &[]);
    if r.code != 0 {
        return Err(format!("exit {}: {}", r.code, r.stderr));
    }
    let t = read_csv(&dir.join("out/nash_deviations.csv"));
    let (mut worst, mut offsets) = (f64::NEG_INFINITY, 0);
    for (i, row) in t.rows.iter().enumerate() {
        if row["deviation"].starts_with("beta_offset") {
            offsets += 1;
            worst = worst.max(t.f(i, "delta") - 2.0 * t.f(i, "delta_se"));
        }
    }
    let id = t.find("deviation", "identity");
    let fr = t.find("deviation", "free_ride");
    let (fd, fse) = (t.f(fr, "delta"), t.f(fr, "delta_se"));
    let fit = read_csv(&dir.join("out/nash_fit.csv"));
    let concave = fit.rows[0]["concave"] == "true";
    let vertex = fit.f(0, "vertex1").hypot(fit.f(0, "vertex2"));
    check(
        offsets == 16 && worst <= 0.0 && t.f(id, "delta") == 0.0 && concave && vertex < 0.05 && fd < -2.0 * fse,
        format!(
            "{offsets} offsets, max delta - 2 SE {worst:.1e}, concave {concave}, |vertex| {vertex:.3}, \
             free ride {fd:.4} +- {fse:.1e}"
        ),
    )
}

fn stylized_facts(dir: &Path) -> Outcome {
    let cfg = "[problem]\ngamma1 = 0.6\ngamma2 = 0.2\n[sweep]\nparameter = \"rho\"\nlo = -0.99\nhi = 0.99\ncount = 100\n";
    let r = run("sensitivity", dir, cfg, &[]);
    if r.code != 0 {
        return Err(r.stderr);
    }
    let d = read_csv(&dir.join("out/sensitivity.csv")).column("d");
    let increasing = d.windows(2).all(|w| w[1] > w[0]);
    let min_second = d.windows(3).map(|w| w[2] - 2.0 * w[1] + w[0]).fold(f64::INFINITY, f64::min);

    let mut rng = StdRng::seed_from_u64(7);
    let mut dominance = true;
    let mut sign = true;
    for _ in 0..1000 {
        let p = random_params(&mut rng, true, false);
        let s = lq::solve(&p).map_err(|e| e.to_string())?;
        dominance &= s.delta_a >= s.delta;
        let p = random_params(&mut rng, false, true);
        let s = lq::solve(&p).map_err(|e| e.to_string())?;
        let (dn, dg) = (s.nu_star[0] - s.nu_star[1], p.gamma1 - p.gamma2);
        sign &= dn.signum() == dg.signum() || (dg == 0.0 && dn.abs() < 1e-12);
    }
    check(
        increasing && min_second >= -1e-9 && dominance && sign,
        format!(
            "d increasing {increasing}, min second difference {min_second:.1e}, delta_a >= delta {dominance}, sign rule {sign}"
        ),
    )
}

fn printed_formula_discrepancy(dir: &Path) -> Outcome {
    let r = run("lq", dir, "[problem]\nrho = 0.0\n", &[]);
    if r.code != 0 {
        return Err(r.stderr);
    }
    let t = read_csv(&dir.join("out/lq.csv"));
    let disc = t.f(0, "printed_discrepancy");
    let m = (t.f(0, "nu1") - 1.0 / 3.0).abs().max((t.f(0, "nu2") - 1.0 / 3.0).abs());
    check(
        disc.is_finite() && disc > 0.0 && m <= 1e-12,
        format!(
            "matrix route ({}, {}), printed ({}, {}), discrepancy {disc:.4}",
            t.f(0, "nu1"),
            t.f(0, "nu2"),
            t.f(0, "printed_nu1"),
            t.f(0, "printed_nu2")
        ),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism(dir: &Path) -> Outcome {
    let runs = [
        ("lq", ""),
        ("hjb", "[grid]\nn_x = 31\nsave_layers = 3\n"),
        ("simulate", "seed = 11\n[sim]\nn_paths = 2000\ndt = 1e-2\ndump_paths = 3\ncheck_best_response = true\n"),
        ("nash-check", "seed = 11\n[sim]\nn_paths = 2000\ndt = 1e-2\n"),
        (
            "sensitivity",
            "[problem]\ngamma1 = 0.3\n[sweep]\nparameter = \"risk_aversion\"\nlo = 1e-3\nhi = 10.0\ncount = 40\nlog_scale = true\n",
        ),
    ];
    let mut files = 0;
    for (cmd, cfg) in runs {
        let mut snaps = Vec::new();
        for threads in ["4", "4", "1"] {
            let d = dir.join(cmd);
            let _ = std::fs::remove_dir_all(&d);
            let r = run(cmd, &d, cfg, &["--threads", threads]);
            if r.code != 0 {
                return Err(format!("{cmd}: exit {}: {}", r.code, r.stderr));
            }
            snaps.push(snapshot(&d.join("out")));
        }
        if snaps[0] != snaps[1] {
            return Err(format!("{cmd}: outputs differ between identical runs"));
        }
        // Only the config echo records the thread count.
        let data = |s: &[(String, Vec<u8>)]| -> Vec<(String, Vec<u8>)> {
            s.iter().filter(|f| f.0 != "resolved_config.toml").cloned().collect()
        };
        if data(&snaps[0]) != data(&snaps[2]) {
            return Err(format!("{cmd}: outputs depend on the thread count"));
        }
        files += snaps[0].len();
    }
    Ok(format!("{files} files byte-identical across repeated runs; data unchanged with 1 thread"))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("closed-form golden values", Box::new(|| golden_values(&root.join("c1")))),
        ("risk-neutral coincidence", Box::new(risk_neutral_limit)),
        ("value decomposition", Box::new(decomposition)),
        ("grid solver vs closed form", Box::new(|| grid_oracle(&root.join("c4")))),
        ("participation by simulation", Box::new(|| participation_by_simulation(&root.join("c5")))),
        ("Nash non-deviation", Box::new(|| nash(&root.join("c6")))),
        ("stylized facts", Box::new(|| stylized_facts(&root.join("c7")))),
        ("explicit formula discrepancy", Box::new(|| printed_formula_discrepancy(&root.join("c8")))),
        ("determinism", Box::new(|| determinism(&root.join("c9")))),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let (tag, msg) = match &outcome {
            Ok(m) => ("PASS", m),
            Err(m) => ("FAIL", m),
        };
        writeln!(std::io::stderr(), "{tag} criterion {} ({name}): {msg}", i + 1).unwrap();
        if outcome.is_err() {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

use std::sync::Arc;

use common_agency::hjb::{self, Grid, SolveOptions, Terminal, TimeScheme};
use common_agency::lq::{self, LQParams, SigmaSpec};
use common_agency::model::{EffortPolicy, ScalarField, VectorField};
use common_agency::sim::{
    self, aggregate_sensitivity, lq_equilibrium_contracts, ContractTriple, Deviation, EquilibriumReference, SimConfig,
};
use common_agency::AgencyError;

fn config(n_paths: usize, dt: f64, seed: u64) -> SimConfig {
    SimConfig {
        n_paths,
        dt,
        seed,
        antithetic: false,
        budget: sim::DEFAULT_BUDGET,
    }
}

fn instances() -> Vec<LQParams> {
    vec![
        LQParams::default(),
        LQParams {
            k1: 1.2,
            k2: 0.8,
            sigma: SigmaSpec::Correlation(0.4),
            gamma1: 0.3,
            gamma2: 0.1,
            risk_aversion: 0.5,
            reservation_utility: -0.8,
            ..LQParams::default()
        },
    ]
}

#[test]
fn constant_effort_moves_the_mean() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let sol = lq::solve(&p).unwrap();
    let o = sim::simulate_outcomes(
        &params,
        &p.drift_cost_spec(),
        &EffortPolicy::constant(sol.nu_star.to_vec()),
        &[],
        config(20_000, 1e-2, 1),
    )
    .unwrap();
    // E[X_T] = x0 + T K nu.
    for k in 0..2 {
        let target = p.x0[k] + p.horizon * sol.nu_star[k] * [p.k1, p.k2][k];
        assert!(o.terminal_mean(|x| x[k]).covers(target, 3.0));
    }
}

#[test]
fn equilibrium_agent_utility_binds() {
    for p in instances() {
        let params = p.model_params().unwrap();
        let spec = p.drift_cost_spec();
        let sol = lq::solve(&p).unwrap();
        let contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
        let policy = EffortPolicy::best_response(aggregate_sensitivity(&contracts));
        let o = sim::simulate_outcomes(&params, &spec, &policy, &contracts, config(40_000, 1e-2, 2)).unwrap();
        let u = o.agent_utility(&params);
        assert!(u.covers(p.reservation_utility, 3.0), "{u:?} vs {}", p.reservation_utility);
        // Total pay: r0 + delta T.
        let wages: Vec<f64> = (0..o.n_paths).map(|i| o.xi[0][i] + o.xi[1][i]).collect();
        let w = sim::Estimate::from_samples(&wages, false);
        let r0 = p.reservation_wage().unwrap();
        assert!(w.covers(r0 + sol.delta * p.horizon, 3.0), "{w:?}");
    }
}

#[test]
fn small_risk_aversion_is_first_order() {
    let p = LQParams {
        risk_aversion: 1e-3,
        reservation_utility: -1.0,
        ..LQParams::default()
    };
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
    let policy = EffortPolicy::best_response(aggregate_sensitivity(&contracts));
    let o = sim::simulate_outcomes(&params, &spec, &policy, &contracts, config(20_000, 1e-2, 3)).unwrap();
    let u = o.agent_utility(&params).mean;
    let net: Vec<f64> = (0..o.n_paths).map(|i| o.xi[0][i] + o.xi[1][i] - o.cost[i]).collect();
    let m = sim::Estimate::from_samples(&net, false).mean;
    assert!((u - (-1.0 + 1e-3 * m)).abs() < 1e-5, "{u} vs {}", -1.0 + 1e-3 * m);
}

#[test]
fn best_response_beats_effort_offsets() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
    let grid = sim::standard_effort_grid(&contracts);
    assert_eq!(grid.len(), 1 + 4 * 2);
    let report = sim::agent_best_response_check(&contracts, &p.drift_cost_spec(), &params, config(20_000, 1e-2, 4), &grid).unwrap();
    assert!(report.alternatives.iter().all(|r| r.delta.mean < 0.0));

    // Zero contracts: zero effort is optimal.
    let zero = vec![ContractTriple::constant(0.0, 0.0, vec![0.0, 0.0]); 2];
    let report = sim::agent_best_response_check(&zero, &spec, &params, config(2_000, 1e-2, 4), &sim::standard_effort_grid(&zero)).unwrap();
    assert!(report.alternatives.iter().all(|r| r.delta.mean < 0.0));
}

#[test]
fn doubled_sensitivity_doubles_effort() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let mut contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
    for c in contracts.iter_mut() {
        c.beta = VectorField::Constant(c.beta.as_constant().unwrap().iter().map(|b| 2.0 * b).collect());
    }
    let doubled: Vec<f64> = sol.nu_star.iter().map(|v| 2.0 * v).collect();
    let nu = EffortPolicy::best_response(aggregate_sensitivity(&contracts)).eval(0.0, &[0.0, 0.0], &spec).unwrap();
    assert!(nu.iter().zip(&doubled).all(|(a, b)| (a - b).abs() < 1e-14));
    let grid = vec![
        ("doubled".to_string(), EffortPolicy::constant(doubled)),
        ("original".to_string(), EffortPolicy::constant(sol.nu_star.to_vec())),
    ];
    let report = sim::agent_best_response_check(&contracts, &spec, &params, config(20_000, 1e-2, 5), &grid).unwrap();
    assert!(report.alternatives[0].delta.mean < -2.0 * report.alternatives[0].delta.se);
    // The original effort as candidate must be flagged.
    let swapped = vec![grid[1].clone(), grid[0].clone()];
    let err = sim::agent_best_response_check(&contracts, &spec, &params, config(20_000, 1e-2, 5), &swapped).unwrap_err();
    assert!(matches!(err, AgencyError::BestResponseViolation { .. }));
}

#[test]
fn nash_offsets_and_free_riding() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
    let mut devs: Vec<(usize, Deviation)> = sim::standard_deviations(2).into_iter().map(|d| (0, d)).collect();
    devs.push((0, Deviation::FreeRide));
    let table = sim::nash_deviation_check(&contracts, &devs, &spec, &params, config(20_000, 1e-2, 6)).unwrap();
    let fit = &table.fits[0];
    assert!(fit.concave);
    let v = fit.vertex.as_ref().unwrap();
    assert!(v.iter().all(|c| c.abs() < 0.05), "{v:?}");
    let free = table.rows.last().unwrap();
    assert!(free.delta.mean < -2.0 * free.delta.se);
    // Exact value: delta = -5/9 for the symmetric instance.
    assert!(free.delta.covers(-5.0 / 9.0, 3.0), "{:?}", free.delta);
}

#[test]
fn residuals_vanish_for_lq_equilibrium() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let mut contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
    let policy = EffortPolicy::best_response(aggregate_sensitivity(&contracts));
    let paths = sim::simulate_paths(&params, &spec, &policy, config(100, 1e-2, 7)).unwrap();
    let reference = EquilibriumReference {
        y0: p.reservation_wage().unwrap(),
        z: VectorField::Constant(sol.beta_bar.to_vec()),
    };
    let r = sim::equilibrium_residuals(&contracts, &spec, &params, &paths, &reference).unwrap();
    assert!(r.iter().all(|v| *v <= 1e-12), "{r:?}");
    contracts[0].alpha = ScalarField::Constant(sol.alpha_split[0] + 0.1);
    let r = sim::equilibrium_residuals(&contracts, &spec, &params, &paths, &reference).unwrap();
    assert!((r[1] - 0.1).abs() < 1e-12);
}

#[test]
fn grid_contracts_track_closed_form() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let grid = Grid::with_stable_steps(&params, -3.0, 3.0, 31, TimeScheme::Explicit).unwrap();
    let gs = hjb::solve(&grid, &spec, &params, &Terminal::competitive(&params), SolveOptions::with_layers(&grid, 10)).unwrap();
    let contracts = sim::grid_equilibrium_contracts(&gs, &spec, &params).unwrap();
    let policy = EffortPolicy::best_response(aggregate_sensitivity(&contracts));
    let paths = sim::simulate_paths(&params, &spec, &policy, config(100, 1e-2, 8)).unwrap();
    let reference = EquilibriumReference {
        y0: p.reservation_wage().unwrap(),
        z: VectorField::Dynamic(Arc::new(gs.beta_bar_interpolant())),
    };
    let r = sim::equilibrium_residuals(&contracts, &spec, &params, &paths, &reference).unwrap();
    assert!(r.iter().all(|v| *v < 1e-6), "{r:?}");
    let b = contracts[0].beta.eval(0.5, &[0.2, -0.1]);
    assert!((b[0] - sol.beta1[0]).abs() < 1e-6 && (b[1] - sol.beta1[1]).abs() < 1e-6);
}

#[test]
fn antithetic_variance_is_smaller() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
    let policy = EffortPolicy::best_response(aggregate_sensitivity(&contracts));
    let plain = sim::simulate_outcomes(&params, &spec, &policy, &contracts, config(20_000, 1e-2, 9)).unwrap();
    let anti = sim::simulate_outcomes(&params, &spec, &policy, &contracts, SimConfig { antithetic: true, ..config(20_000, 1e-2, 9) }).unwrap();
    for i in 0..2 {
        assert!(anti.principal_payoffs(&params)[i].se <= plain.principal_payoffs(&params)[i].se);
    }
    assert!(anti.agent_utility(&params).se <= plain.agent_utility(&params).se);
}

#[test]
fn halving_the_step_moves_utility_less_than_one_se() {
    let p = LQParams::default();
    let params = p.model_params().unwrap();
    let spec = p.drift_cost_spec();
    let sol = lq::solve(&p).unwrap();
    let contracts = lq_equilibrium_contracts(&p, &sol).unwrap();
    let policy = EffortPolicy::best_response(aggregate_sensitivity(&contracts));
    let a = sim::simulate_outcomes(&params, &spec, &policy, &contracts, config(20_000, 1e-2, 10)).unwrap();
    let b = sim::simulate_outcomes(&params, &spec, &policy, &contracts, config(20_000, 5e-3, 10)).unwrap();
    let (ua, ub) = (a.agent_utility(&params), b.agent_utility(&params));
    assert!((ua.mean - ub.mean).abs() < ua.se.max(ub.se), "{ua:?} {ub:?}");
}

use common_agency::hjb::{self, benchmark::BumpBenchmark, Grid, GridSolution, SolveOptions, Terminal};
use common_agency::lq::{self, LQParams, LQRecord, LQSolution, SigmaSpec};
use common_agency::model::{DriftCostSpec, EffortPolicy, ModelParams, VectorField};
use common_agency::sim::{self, ContractTriple, Deviation, EquilibriumReference, SimConfig, MIN_PATHS};
use common_agency::AgencyError;
use rayon::prelude::*;

use crate::config::{ContractKind, RunConfig};
use crate::output::{self, Cell, Table};
use crate::CliError;

fn agency(e: AgencyError) -> CliError {
    CliError::from_agency(e, "problem")
}

struct Problem {
    lq: LQParams,
    params: ModelParams,
    spec: DriftCostSpec,
}

impl Problem {
    fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let lq = cfg.problem.lq_params()?;
        let params = lq.model_params().map_err(agency)?;
        let spec = cfg.effort.spec(&lq)?;
        Ok(Self { lq, params, spec })
    }

    fn is_lq(&self) -> bool {
        self.spec.is_linear_quadratic()
    }

    fn grid(&self, cfg: &RunConfig, n_x: usize) -> Result<Grid, CliError> {
        let g = &cfg.grid;
        match g.n_t {
            Some(n_t) => Grid::new(&self.params, g.lo, g.hi, n_x, n_t, g.scheme.into()),
            None => Grid::with_stable_steps(&self.params, g.lo, g.hi, n_x, g.scheme.into()),
        }
        .map_err(agency)
    }

    fn grid_solve(&self, cfg: &RunConfig, grid: &Grid) -> Result<GridSolution, CliError> {
        hjb::solve(
            grid,
            &self.spec,
            &self.params,
            &Terminal::competitive(&self.params),
            SolveOptions::with_layers(grid, cfg.grid.save_layers),
        )
        .map_err(agency)
    }

    /// Equilibrium contracts plus the aggregate reference they should match.
    fn equilibrium(&self, cfg: &RunConfig) -> Result<(Vec<ContractTriple>, EquilibriumReference), CliError> {
        let y0 = self.params.reservation_wage().ok_or_else(|| {
            CliError::Config("problem.risk_aversion: equilibrium contracts need R_A > 0".into())
        })?;
        if self.is_lq() {
            let sol = lq::solve(&self.lq).map_err(agency)?;
            let contracts = sim::lq_equilibrium_contracts(&self.lq, &sol).map_err(agency)?;
            let z = VectorField::Constant(sol.beta_bar.to_vec());
            return Ok((contracts, EquilibriumReference { y0, z }));
        }
        let grid = self.grid(cfg, cfg.grid.n_x)?;
        let sol = self.grid_solve(cfg, &grid)?;
        let contracts = sim::grid_equilibrium_contracts(&sol, &self.spec, &self.params).map_err(agency)?;
        let z = VectorField::Dynamic(std::sync::Arc::new(sol.beta_bar_interpolant()));
        Ok((contracts, EquilibriumReference { y0, z }))
    }

    fn sim_config(&self, cfg: &RunConfig) -> Result<SimConfig, CliError> {
        let c = cfg.sim.config(cfg.seed);
        c.validate(self.params.horizon)
            .map_err(|e| CliError::from_agency(e, "sim"))?;
        Ok(c)
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Closed-form record, first-best comparison and the explicit-formula check.
pub fn lq(cfg: &RunConfig) -> Result<(), CliError> {
    let p = cfg.problem.lq_params()?;
    let sol = lq::solve(&p).map_err(agency)?;
    let (fb_effort, fb_wage) = match lq::first_best(&p) {
        Ok((e, w)) => (e, w),
        Err(_) => (sol.nu_first_best, f64::NAN),
    };
    let printed = match p.sigma {
        SigmaSpec::Correlation(_) => Some(lq::effort_components_correlated(&p).map_err(agency)?),
        SigmaSpec::Matrix(_) => None,
    };
    let extra = [
        "fb1",
        "fb2",
        "first_best_wage",
        "reservation_wage",
        "generator",
        "alpha_rate",
        "printed_nu1",
        "printed_nu2",
        "printed_discrepancy",
    ];
    let mut record = Table::new("lq", LQRecord::COLUMNS.iter().chain(&extra).copied());
    let mut row: Vec<Cell> = LQRecord::from(&sol).values().iter().map(|v| Cell::from(*v)).collect();
    let nan = f64::NAN;
    let (p1, p2, pd) = printed.map_or((nan, nan, nan), |c| (c.printed_route[0], c.printed_route[1], c.discrepancy));
    row.extend(
        [
            fb_effort[0],
            fb_effort[1],
            fb_wage,
            p.reservation_wage().unwrap_or(nan),
            sol.generator,
            sol.alpha_rate,
            p1,
            p2,
            pd,
        ]
        .map(Cell::from),
    );
    record.push(row);
    record.write(cfg)?;

    let mut bench = Table::new("lq_benchmark", ["regime", "nu1", "nu2", "total_effort", "delta"]);
    let fb_delta = 0.5 * norm_sq(&sol.nu_first_best);
    for (name, nu, delta) in [
        ("competitive", sol.nu_star, sol.delta),
        ("aggregated", sol.nu_aggregated, sol.delta_a),
        ("first_best", sol.nu_first_best, fb_delta),
    ] {
        bench.push(vec![
            name.into(),
            nu[0].into(),
            nu[1].into(),
            (nu[0] + nu[1]).into(),
            delta.into(),
        ]);
    }
    bench.write(cfg)?;
    Ok(())
}

/// Grid solve, residual summary, closed-form errors for LQ and the optional
/// refinement study.
pub fn hjb(cfg: &RunConfig) -> Result<(), CliError> {
    let pb = Problem::load(cfg)?;
    let grid = pb.grid(cfg, cfg.grid.n_x)?;
    let sol = pb.grid_solve(cfg, &grid)?;

    let mut fields = Table::new("hjb_grid", sol.columns());
    for r in sol.rows() {
        fields.push(r.into_iter().map(Cell::from).collect());
    }
    fields.write(cfg)?;

    let r = &sol.residuals;
    let mut cols = vec![
        "n_x",
        "n_t",
        "h",
        "dt",
        "decomposition_gap",
        "foc_residual",
        "sum_residual",
        "pde_residual",
        "hamiltonian_growth",
        "uniqueness_verified",
    ];
    let mut row: Vec<Cell> = vec![
        grid.n_x.into(),
        grid.n_t.into(),
        grid.h.into(),
        grid.dt.into(),
        r.decomposition_gap.into(),
        r.foc_residual.into(),
        r.sum_residual.into(),
        r.pde_residual.into(),
        r.hamiltonian_growth.into(),
        r.uniqueness_verified.into(),
    ];
    if pb.is_lq() {
        cols.extend(["err_v", "err_u1", "err_u2", "err_beta_bar", "err_beta1", "err_beta2"]);
        row.extend(closed_form_errors(&pb.lq, &sol)?.map(Cell::from));
    }
    let mut summary = Table::new("hjb_summary", cols);
    summary.push(row);
    summary.write(cfg)?;

    if cfg.grid.refinement_levels >= 2 {
        refinement(cfg, &pb)?.write(cfg)?;
    }
    Ok(())
}

/// Max interior errors of `V`, `u^1`, `u^2`, `beta_bar`, `beta^1`, `beta^2`
/// against the closed form over every stored layer.
fn closed_form_errors(p: &LQParams, sol: &GridSolution) -> Result<[f64; 6], CliError> {
    let cf = lq::solve(p).map_err(agency)?;
    let grid = &sol.grid;
    let mut err = [0.0f64; 6];
    let mut x = [0.0; 2];
    for (l, &t) in sol.times.iter().enumerate() {
        for node in grid.interior_nodes() {
            grid.node_coords(node, &mut x);
            let mut bump = |k: usize, v: f64| err[k] = err[k].max(v.abs());
            bump(0, sol.v[l][node] - lq::value_v(t, &x, &cf, p));
            for i in 0..2 {
                bump(1 + i, sol.u_tilde[i][l][node] - lq::value_vi(i, t, &x, &cf, p));
            }
            for a in 0..2 {
                bump(3, sol.beta_bar[l][node * 2 + a] - cf.beta_bar[a]);
                for i in 0..2 {
                    bump(4 + i, sol.beta[i][l][node * 2 + a] - cf.beta(i)[a]);
                }
            }
        }
    }
    Ok(err)
}

/// Errors of `V(0, .)` against the curved closed-form instance on nested
/// grids, measured on the central half of the box.
fn refinement(cfg: &RunConfig, pb: &Problem) -> Result<Table, CliError> {
    let bench = BumpBenchmark::new(&pb.params, &pb.spec, cfg.grid.bump_amplitude, cfg.grid.bump_width)
        .map_err(agency)?;
    let terminals = bench.terminals();
    let radius = 0.25 * (cfg.grid.hi - cfg.grid.lo);
    let mut table = Table::new("hjb_refinement", ["level", "n_x", "n_t", "h", "max_error", "order"]);
    let mut prev: Option<f64> = None;
    for level in 0..cfg.grid.refinement_levels {
        let n_x = (cfg.grid.n_x - 1) * (1 << level) + 1;
        let grid = pb.grid(cfg, n_x)?;
        let sol = hjb::solve(&grid, &pb.spec, &pb.params, &terminals, SolveOptions::with_layers(&grid, 1))
            .map_err(agency)?;
        let mut x = vec![0.0; grid.dim];
        let mut e = 0.0f64;
        for node in grid.interior_nodes() {
            grid.node_coords(node, &mut x);
            if x.iter().zip(&pb.params.x0).all(|(a, c)| (a - c).abs() <= radius) {
                e = e.max((sol.v[0][node] - bench.value(0.0, &x)).abs());
            }
        }
        let order = prev.map_or(f64::NAN, |p| hjb::convergence_order(p, e, 2.0));
        table.push(vec![level.into(), n_x.into(), grid.n_t.into(), grid.h.into(), e.into(), order.into()]);
        prev = Some(e);
    }
    Ok(table)
}

fn estimate_row(name: &str, e: sim::Estimate) -> Vec<Cell> {
    vec![name.into(), e.mean.into(), e.se.into()]
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let pb = Problem::load(cfg)?;
    let sc = pb.sim_config(cfg)?;
    let (contracts, reference) = match cfg.sim.contract {
        ContractKind::Equilibrium => {
            let (c, r) = pb.equilibrium(cfg)?;
            (c, Some(r))
        }
        ContractKind::Deterministic => (
            (0..2)
                .map(|_| ContractTriple::constant(0.5 * cfg.sim.wage, 0.0, vec![0.0; 2]))
                .collect(),
            None,
        ),
    };
    let mut report =
        sim::simulate_report(&contracts, &pb.spec, &pb.params, sc, reference.as_ref()).map_err(agency)?;
    if let Some(r0) = pb.params.reservation_wage() {
        report.notes.push(format!(
            "participation binds at the certainty-equivalent level r0 = -ln(-R0)/R_A = {r0:.16e}, not at R0"
        ));
    }

    let mut est = Table::new("sim_estimates", ["quantity", "estimate", "se"]);
    est.push(estimate_row("agent_utility", report.agent_utility));
    est.push(vec![
        "predicted_agent_utility".into(),
        report.predicted_agent_utility.into(),
        0.0.into(),
    ]);
    for (i, e) in report.principal_payoffs.iter().enumerate() {
        est.push(estimate_row(&format!("principal_payoff_{}", i + 1), *e));
    }
    if let Some(res) = report.equilibrium_residuals {
        for (name, v) in ["residual_y", "residual_alpha", "residual_beta"].iter().zip(res) {
            est.push(vec![(*name).into(), v.into(), 0.0.into()]);
        }
    }

    if cfg.sim.check_best_response {
        let grid = sim::standard_effort_grid(&contracts);
        let br = sim::best_response_table(&contracts, &pb.spec, &pb.params, sc, &grid).map_err(agency)?;
        let mut t = Table::new("sim_best_response", ["policy", "utility", "utility_se", "delta", "delta_se"]);
        for r in std::iter::once(&br.candidate).chain(&br.alternatives) {
            t.push(vec![
                r.policy.clone().into(),
                r.utility.mean.into(),
                r.utility.se.into(),
                r.delta.mean.into(),
                r.delta.se.into(),
            ]);
        }
        t.write(cfg)?;
        if let Some(v) = br.violation() {
            report.notes.push(v.to_string());
        }
    }

    output::write_json(cfg, "sim_report", &report)?;
    est.write(cfg)?;
    if cfg.sim.dump_paths > 0 {
        dump_paths(cfg, &pb, &contracts, sc)?.write(cfg)?;
    }
    Ok(())
}

/// Per-step states and running contract values for the first paths.
fn dump_paths(cfg: &RunConfig, pb: &Problem, contracts: &[ContractTriple], sc: SimConfig) -> Result<Table, CliError> {
    let count = cfg.sim.dump_paths;
    let sub = SimConfig {
        n_paths: count.max(MIN_PATHS).next_multiple_of(2),
        ..sc
    };
    let policy = EffortPolicy::best_response(sim::aggregate_sensitivity(contracts));
    let paths = sim::simulate_paths(&pb.params, &pb.spec, &policy, sub).map_err(agency)?;
    let n = paths.dim;
    let mut cols = vec!["path_id".to_string(), "t".to_string()];
    cols.extend((1..=n).map(|a| format!("x{a}")));
    cols.extend((1..=contracts.len()).map(|i| format!("xi_{i}")));
    let mut t = Table::new("paths", cols);
    let mut beta = vec![0.0; n];
    for p in 0..count.min(paths.n_paths) {
        let mut xi: Vec<f64> = contracts.iter().map(|c| c.y).collect();
        for s in 0..=paths.n_steps {
            let time = paths.time(s);
            let x = paths.state(p, s);
            let mut row: Vec<Cell> = vec![p.into(), time.into()];
            row.extend(x.iter().map(|v| Cell::from(*v)));
            row.extend(xi.iter().map(|v| Cell::from(*v)));
            t.push(row);
            if s < paths.n_steps {
                let next = paths.state(p, s + 1);
                for (c, acc) in contracts.iter().zip(xi.iter_mut()) {
                    c.beta.eval_into(time, x, &mut beta);
                    let dx: f64 = beta.iter().zip(next.iter().zip(x)).map(|(b, (a, c))| b * (a - c)).sum();
                    *acc += c.alpha.eval(time, x) * paths.dt + dx;
                }
            }
        }
    }
    Ok(t)
}

/// Unilateral deviations of one principal from the equilibrium contracts.
pub fn nash_check(cfg: &RunConfig) -> Result<(), CliError> {
    let pb = Problem::load(cfg)?;
    let sc = pb.sim_config(cfg)?;
    let nc = &cfg.nash;
    if !(1..=2).contains(&nc.principal) {
        return Err(CliError::Config("nash.principal: must be 1 or 2".into()));
    }
    let i = nc.principal - 1;
    let (contracts, _) = pb.equilibrium(cfg)?;
    let mut deviations = vec![(i, Deviation::Identity)];
    for a in &nc.offsets {
        for b in &nc.offsets {
            deviations.push((i, Deviation::BetaOffset { offset: vec![*a, *b] }));
        }
    }
    if nc.free_ride {
        deviations.push((i, Deviation::FreeRide));
    }
    let table = sim::deviation_table(&contracts, &deviations, &pb.spec, &pb.params, sc).map_err(agency)?;

    let mut rows = Table::new(
        "nash_deviations",
        [
            "principal",
            "deviation",
            "offset1",
            "offset2",
            "payoff",
            "payoff_se",
            "delta",
            "delta_se",
            "agent_utility",
            "agent_utility_se",
        ],
    );
    for r in &table.rows {
        let (o1, o2) = match &r.deviation {
            Deviation::BetaOffset { offset } => (offset[0], offset[1]),
            _ => (f64::NAN, f64::NAN),
        };
        rows.push(vec![
            (r.principal + 1).into(),
            r.label.clone().into(),
            o1.into(),
            o2.into(),
            r.payoff.mean.into(),
            r.payoff.se.into(),
            r.delta.mean.into(),
            r.delta.se.into(),
            r.agent_utility.mean.into(),
            r.agent_utility.se.into(),
        ]);
    }
    rows.write(cfg)?;

    let mut fits = Table::new(
        "nash_fit",
        ["principal", "a11", "a12", "a21", "a22", "b1", "b2", "concave", "vertex1", "vertex2"],
    );
    for f in &table.fits {
        let v = f.vertex.clone().unwrap_or_else(|| vec![f64::NAN; 2]);
        let mut row: Vec<Cell> = vec![(f.principal + 1).into()];
        row.extend(f.hessian.iter().chain(&f.linear).map(|v| Cell::from(*v)));
        row.push(f.concave.into());
        row.extend(v.iter().map(|v| Cell::from(*v)));
        fits.push(row);
    }
    fits.write(cfg)?;

    match table.violation() {
        Some(e) => Err(CliError::Solver(e)),
        None => Ok(()),
    }
}

/// One closed-form solve per sweep point, rows in sweep order.
pub fn sensitivity(cfg: &RunConfig) -> Result<(), CliError> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep: section is required".into()))?;
    let points = sweep.points()?;
    let rows: Vec<Vec<Cell>> = points
        .par_iter()
        .enumerate()
        .map(|(idx, &value)| -> Result<Vec<Cell>, CliError> {
            let p = sweep.apply(&cfg.problem, value).lq_params().map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("sweep point {idx} ({value}): {m}")),
                other => other,
            })?;
            sweep_row(idx, value, &p)
        })
        .collect::<Result<_, _>>()?;
    let mut table = Table::new(
        "sensitivity",
        [
            "index",
            "value",
            "nu1",
            "nu2",
            "d",
            "delta",
            "delta_a",
            "works_more_for_1",
            "dominance_condition",
            "threshold",
        ],
    );
    for r in rows {
        table.push(r);
    }
    table.write(cfg)?;
    Ok(())
}

fn sweep_row(idx: usize, value: f64, p: &LQParams) -> Result<Vec<Cell>, CliError> {
    let sol: LQSolution = lq::solve(p).map_err(agency)?;
    let nu = sol.nu_star;
    let total = nu[0] + nu[1];
    let d = if total == 0.0 { f64::NAN } else { (nu[0] - nu[1]) / total };
    // The ratio test only applies to a risk-neutral agent with Sigma = I.
    let (cond, threshold) = match lq::dominance_condition(p) {
        Ok(dm) => (Cell::from(dm.works_more_for_1), Cell::from(dm.threshold)),
        Err(_) => (Cell::from(""), Cell::from(f64::NAN)),
    };
    Ok(vec![
        idx.into(),
        value.into(),
        nu[0].into(),
        nu[1].into(),
        d.into(),
        sol.delta.into(),
        sol.delta_a.into(),
        (nu[0] > nu[1]).into(),
        cond,
        threshold,
    ])
}

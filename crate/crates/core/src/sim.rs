//! Monte Carlo verification of contracts.
//!
//! Output paths follow an Euler–Maruyama scheme. Path `p` draws its
//! Gaussians from a ChaCha8 stream selected by `(seed, p)` (antithetic pairs
//! share a stream with flipped sign), so every estimate is independent of the
//! worker count, and two runs with the same seed share their noise exactly.
//! Contracts accrue with left-endpoint sums, the Itô convention.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{AgencyError, Result};
use crate::hjb::GridSolution;
use crate::lq::{LQParams, LQSolution};
use crate::model::{generator_g, DriftCostSpec, EffortPolicy, ModelParams, ScalarFeedback, ScalarField, VectorField};

/// Paths leaving `[-OVERFLOW_LIMIT, OVERFLOW_LIMIT]^N` abort the run.
pub const OVERFLOW_LIMIT: f64 = 1e9;
pub const MIN_PATHS: usize = 100;
/// Default cap on `n_paths * n_steps`.
pub const DEFAULT_BUDGET: u64 = 500_000_000;
/// Cap on stored floats in a [`PathEnsemble`].
pub const STORED_FLOAT_LIMIT: usize = 50_000_000;
/// Offsets used for effort and sensitivity perturbations.
pub const STANDARD_OFFSETS: [f64; 4] = [-0.2, -0.05, 0.05, 0.2];

/// `xi = y + int alpha dt + int beta . dX`.
#[derive(Debug, Clone)]
pub struct ContractTriple {
    pub y: f64,
    pub alpha: ScalarField,
    pub beta: VectorField,
}

impl ContractTriple {
    pub fn constant(y: f64, alpha: f64, beta: Vec<f64>) -> Self {
        Self {
            y,
            alpha: ScalarField::Constant(alpha),
            beta: VectorField::Constant(beta),
        }
    }

    /// Largest `|alpha|` and `|beta|` over a regular sample of the box.
    pub fn sampled_bound(&self, horizon: f64, lo: f64, hi: f64, per_axis: usize) -> Result<(f64, f64)> {
        let n = self.beta.dim();
        let per_axis = per_axis.max(2);
        let mut x = vec![0.0; n];
        let mut b = vec![0.0; n];
        let (mut ma, mut mb) = (0.0f64, 0.0f64);
        for ti in 0..per_axis {
            let t = horizon * ti as f64 / (per_axis - 1) as f64;
            for flat in 0..per_axis.pow(n as u32) {
                let mut rem = flat;
                for xi in x.iter_mut() {
                    *xi = lo + (hi - lo) * (rem % per_axis) as f64 / (per_axis - 1) as f64;
                    rem /= per_axis;
                }
                let a = self.alpha.eval(t, &x);
                self.beta.eval_into(t, &x, &mut b);
                let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !a.is_finite() || !bn.is_finite() {
                    return Err(AgencyError::invalid("contract", format!("non-finite value at t = {t}, x = {x:?}")));
                }
                ma = ma.max(a.abs());
                mb = mb.max(bn);
            }
        }
        Ok((ma, mb))
    }
}

/// Sum of sensitivities, collapsed to a constant when possible.
pub fn aggregate_sensitivity(contracts: &[ContractTriple]) -> VectorField {
    let sum = VectorField::Sum(contracts.iter().map(|c| c.beta.clone()).collect());
    match sum.as_constant() {
        Some(v) => VectorField::Constant(v),
        None => sum,
    }
}

/// `weight * G(t, x, Z(t, x)) - sum_j alpha_j(t, x)`.
///
/// Used for drift rates that keep `sum_i alpha^i = G(sum_i beta^i)`.
pub struct GeneratorShare {
    pub params: ModelParams,
    pub spec: DriftCostSpec,
    pub sensitivity: VectorField,
    pub weight: f64,
    pub minus: Vec<ScalarField>,
}

impl ScalarFeedback for GeneratorShare {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let z = self.sensitivity.eval(t, x);
        // A failed maximisation becomes NaN and aborts the path.
        let g = generator_g(t, x, &z, &self.params, &self.spec).unwrap_or(f64::NAN);
        self.weight * g - self.minus.iter().map(|a| a.eval(t, x)).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub antithetic: bool,
    /// Upper bound on `n_paths * n_steps`.
    pub budget: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            dt: 1e-3,
            seed: 0,
            antithetic: false,
            budget: DEFAULT_BUDGET,
        }
    }
}

impl SimConfig {
    /// Number of Euler steps; `T / dt` is rounded to the nearest integer.
    pub fn n_steps(&self, horizon: f64) -> usize {
        ((horizon / self.dt).round() as usize).max(1)
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if self.n_paths < MIN_PATHS {
            return Err(AgencyError::invalid("sim.n_paths", format!("must be >= {MIN_PATHS}")));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(AgencyError::invalid("sim.n_paths", "must be even with antithetic pairs"));
        }
        if !(self.dt > 0.0 && self.dt <= horizon) {
            return Err(AgencyError::invalid("sim.dt", "need 0 < dt <= T"));
        }
        let steps = self.n_steps(horizon);
        if ((horizon / steps as f64) - self.dt).abs() > 1e-9 * self.dt.max(1.0) {
            return Err(AgencyError::invalid("sim.dt", "T / dt must be an integer"));
        }
        let work = self.n_paths as u64 * steps as u64;
        if work > self.budget {
            return Err(AgencyError::invalid(
                "sim.n_paths",
                format!("n_paths * n_steps = {work} exceeds the budget {}", self.budget),
            ));
        }
        Ok(())
    }
}

/// Mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Treats consecutive antithetic pairs as one sample.
    pub fn from_samples(samples: &[f64], antithetic: bool) -> Self {
        if antithetic {
            let pairs: Vec<f64> = samples.chunks(2).map(|c| 0.5 * (c[0] + c[c.len() - 1])).collect();
            return Self::iid(&pairs);
        }
        Self::iid(samples)
    }

    fn iid(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = pairwise_sum(samples) / n;
        let dev: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = if samples.len() > 1 { pairwise_sum(&dev) / (n - 1.0) } else { 0.0 };
        Self {
            mean,
            se: (var / n).sqrt(),
        }
    }

    /// Whether `target` lies within `k` standard errors.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// Pairwise summation; the result depends only on the input order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

fn path_rng(seed: u64, path: usize, antithetic: bool) -> (ChaCha8Rng, f64) {
    let (stream, sign) = if antithetic {
        ((path / 2) as u64, if path % 2 == 1 { -1.0 } else { 1.0 })
    } else {
        (path as u64, 1.0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (rng, sign)
}

/// Per-path results of a streaming run.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub dim: usize,
    pub n_paths: usize,
    pub antithetic: bool,
    /// `[path * dim + axis]`.
    pub terminal: Vec<f64>,
    /// `[contract][path]`.
    pub xi: Vec<Vec<f64>>,
    /// `int c(t, X_t, nu_t) dt` per path.
    pub cost: Vec<f64>,
}

impl Outcomes {
    pub fn terminal_state(&self, path: usize) -> &[f64] {
        &self.terminal[path * self.dim..(path + 1) * self.dim]
    }

    fn agent_samples(&self, risk_aversion: f64) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| {
                let wage: f64 = self.xi.iter().map(|x| x[p]).sum();
                -(-risk_aversion * (wage - self.cost[p])).exp()
            })
            .collect()
    }

    /// `E[-exp(-R_A (sum_i xi^i - int c dt))]`.
    pub fn agent_utility(&self, params: &ModelParams) -> Estimate {
        Estimate::from_samples(&self.agent_samples(params.risk_aversion), self.antithetic)
    }

    fn principal_samples(&self, i: usize, params: &ModelParams) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| params.liquidation(i, self.terminal_state(p)) - self.xi[i][p])
            .collect()
    }

    /// `E[l_i(X_T) - xi^i]` for each contract.
    pub fn principal_payoffs(&self, params: &ModelParams) -> Vec<Estimate> {
        (0..self.xi.len())
            .map(|i| Estimate::from_samples(&self.principal_samples(i, params), self.antithetic))
            .collect()
    }

    /// Mean of `f` over terminal states.
    pub fn terminal_mean(&self, f: impl Fn(&[f64]) -> f64) -> Estimate {
        let s: Vec<f64> = (0..self.n_paths).map(|p| f(self.terminal_state(p))).collect();
        Estimate::from_samples(&s, self.antithetic)
    }
}

/// Common-random-number difference `mean(b - a)` with its standard error.
pub fn paired_difference(a: &[f64], b: &[f64], antithetic: bool) -> Estimate {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    Estimate::from_samples(&d, antithetic)
}

struct PathEngine<'a> {
    params: &'a ModelParams,
    spec: &'a DriftCostSpec,
    policy: &'a EffortPolicy,
    contracts: &'a [ContractTriple],
    sigma: DMatrix<f64>,
    config: SimConfig,
    n_steps: usize,
    dt: f64,
}

struct PathRecord {
    terminal: Vec<f64>,
    xi: Vec<f64>,
    cost: f64,
    states: Vec<f64>,
}

impl<'a> PathEngine<'a> {
    fn new(
        params: &'a ModelParams,
        spec: &'a DriftCostSpec,
        policy: &'a EffortPolicy,
        contracts: &'a [ContractTriple],
        config: SimConfig,
    ) -> Result<Self> {
        config.validate(params.horizon)?;
        let n = params.dim();
        if policy.dim() != n {
            return Err(AgencyError::invalid("policy", "dimension must match the state"));
        }
        if contracts.iter().any(|c| c.beta.dim() != n) {
            return Err(AgencyError::invalid("contract.beta", "dimension must match the state"));
        }
        let n_steps = config.n_steps(params.horizon);
        Ok(Self {
            params,
            spec,
            policy,
            contracts,
            sigma: params.sigma.clone(),
            config,
            n_steps,
            dt: params.horizon / n_steps as f64,
        })
    }

    fn run(&self, path: usize, store: bool) -> Result<PathRecord> {
        let n = self.params.dim();
        let (mut rng, sign) = path_rng(self.config.seed, path, self.config.antithetic);
        let sqdt = self.dt.sqrt();
        let mut x = self.params.x0.clone();
        let mut xi: Vec<f64> = self.contracts.iter().map(|c| c.y).collect();
        let mut cost = 0.0;
        let mut nu = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut g = DVector::zeros(n);
        let mut dx = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut beta = vec![0.0; n];
        let mut alpha = vec![0.0; self.contracts.len()];
        let mut states = Vec::new();
        if store {
            states.reserve((self.n_steps + 1) * n);
            states.extend_from_slice(&x);
        }
        for s in 0..self.n_steps {
            let t = s as f64 * self.dt;
            self.policy.eval_into(t, &x, self.spec, &mut scratch, &mut nu)?;
            self.spec.drift_into(t, &x, &nu, &mut b);
            cost += self.spec.cost(t, &x, &nu) * self.dt;
            for gi in g.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *gi = sign * z;
            }
            let noise = &self.sigma * &g;
            // Increments are taken as differences of stored states so that
            // accrual on stored paths reproduces these values bit for bit.
            for k in 0..n {
                next[k] = x[k] + (b[k] * self.dt + noise[k] * sqdt);
                dx[k] = next[k] - x[k];
            }
            for (c, (contract, a)) in self.contracts.iter().zip(alpha.iter_mut()).enumerate() {
                *a = contract.alpha.eval(t, &x);
                contract.beta.eval_into(t, &x, &mut beta);
                xi[c] += *a * self.dt + beta.iter().zip(&dx).map(|(u, v)| u * v).sum::<f64>();
            }
            x.copy_from_slice(&next);
            if x.iter().any(|v| !(v.abs() <= OVERFLOW_LIMIT)) || !cost.is_finite() || xi.iter().any(|v| !v.is_finite()) {
                return Err(AgencyError::NumericOverflow { path, step: s + 1 });
            }
            if store {
                states.extend_from_slice(&x);
            }
        }
        Ok(PathRecord {
            terminal: x,
            xi,
            cost,
            states,
        })
    }

    fn outcomes(&self) -> Result<Outcomes> {
        let records: Vec<PathRecord> = (0..self.config.n_paths)
            .into_par_iter()
            .map(|p| self.run(p, false))
            .collect::<Result<_>>()?;
        let n = self.params.dim();
        let mut out = Outcomes {
            dim: n,
            n_paths: self.config.n_paths,
            antithetic: self.config.antithetic,
            terminal: Vec::with_capacity(n * records.len()),
            xi: vec![Vec::with_capacity(records.len()); self.contracts.len()],
            cost: Vec::with_capacity(records.len()),
        };
        for r in records {
            out.terminal.extend(r.terminal);
            for (c, v) in r.xi.into_iter().enumerate() {
                out.xi[c].push(v);
            }
            out.cost.push(r.cost);
        }
        Ok(out)
    }
}

/// Streams paths under `policy` and accrues `contracts` along them.
pub fn simulate_outcomes(
    params: &ModelParams,
    spec: &DriftCostSpec,
    policy: &EffortPolicy,
    contracts: &[ContractTriple],
    config: SimConfig,
) -> Result<Outcomes> {
    PathEngine::new(params, spec, policy, contracts, config)?.outcomes()
}

/// Stored trajectories together with the effort cost each path incurred.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub dim: usize,
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub antithetic: bool,
    /// `[(path * (n_steps + 1) + step) * dim + axis]`.
    pub states: Vec<f64>,
    pub cost: Vec<f64>,
    pub policy: EffortPolicy,
}

impl PathEnsemble {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let k = (path * (self.n_steps + 1) + step) * self.dim;
        &self.states[k..k + self.dim]
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Terminal states, contract values and costs in streaming form.
    pub fn outcomes(&self, contracts: &[ContractTriple]) -> Outcomes {
        let mut terminal = Vec::with_capacity(self.n_paths * self.dim);
        for p in 0..self.n_paths {
            terminal.extend_from_slice(self.state(p, self.n_steps));
        }
        Outcomes {
            dim: self.dim,
            n_paths: self.n_paths,
            antithetic: self.antithetic,
            terminal,
            xi: contracts.iter().map(|c| accrue_contract(self, c)).collect(),
            cost: self.cost.clone(),
        }
    }
}

/// Simulates and stores full trajectories; intended for small ensembles.
pub fn simulate_paths(
    params: &ModelParams,
    spec: &DriftCostSpec,
    policy: &EffortPolicy,
    config: SimConfig,
) -> Result<PathEnsemble> {
    let engine = PathEngine::new(params, spec, policy, &[], config)?;
    let floats = config.n_paths * (engine.n_steps + 1) * params.dim();
    if floats > STORED_FLOAT_LIMIT {
        return Err(AgencyError::invalid(
            "sim.n_paths",
            format!("storing {floats} values exceeds {STORED_FLOAT_LIMIT}; use the streaming runner"),
        ));
    }
    let records: Vec<PathRecord> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| engine.run(p, true))
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(floats);
    let mut cost = Vec::with_capacity(records.len());
    for r in records {
        states.extend(r.states);
        cost.push(r.cost);
    }
    Ok(PathEnsemble {
        dim: params.dim(),
        n_paths: config.n_paths,
        n_steps: engine.n_steps,
        dt: engine.dt,
        antithetic: config.antithetic,
        states,
        cost,
        policy: policy.clone(),
    })
}

/// `xi = y + sum_t alpha(t, X_t) dt + sum_t beta(t, X_t) . (X_{t+dt} - X_t)` per path.
pub fn accrue_contract(paths: &PathEnsemble, contract: &ContractTriple) -> Vec<f64> {
    let n = paths.dim;
    (0..paths.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut xi = contract.y;
            let mut beta = vec![0.0; n];
            for s in 0..paths.n_steps {
                let t = paths.time(s);
                let x = paths.state(p, s);
                let next = paths.state(p, s + 1);
                contract.beta.eval_into(t, x, &mut beta);
                xi += contract.alpha.eval(t, x) * paths.dt
                    + (0..n).map(|k| beta[k] * (next[k] - x[k])).sum::<f64>();
            }
            xi
        })
        .collect()
}

/// Agent utility on stored paths under the recorded policy.
pub fn agent_utility(paths: &PathEnsemble, contracts: &[ContractTriple], params: &ModelParams) -> Estimate {
    paths.outcomes(contracts).agent_utility(params)
}

/// `-exp(-R_A Y_0)`, the utility the verification result predicts.
pub fn predicted_agent_utility(params: &ModelParams, y0: f64) -> f64 {
    -(-params.risk_aversion * y0).exp()
}

#[derive(Debug, Clone, Serialize)]
pub struct PolicyRow {
    pub policy: String,
    pub utility: Estimate,
    /// `utility - candidate utility` under common random numbers.
    pub delta: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct BestResponseReport {
    pub candidate: PolicyRow,
    pub alternatives: Vec<PolicyRow>,
}

impl BestResponseReport {
    /// The alternative with the largest gain above 2 SE, if any.
    pub fn violation(&self) -> Option<AgencyError> {
        self.alternatives
            .iter()
            .filter(|r| r.delta.mean > 2.0 * r.delta.se)
            .max_by(|a, b| a.delta.mean.total_cmp(&b.delta.mean))
            .map(|r| AgencyError::BestResponseViolation {
                policy: r.policy.clone(),
                gain: r.delta.mean,
                two_se: 2.0 * r.delta.se,
            })
    }
}

/// Best response to `sum_i beta^i` plus constant offsets `eps e_k` for
/// `eps` in [`STANDARD_OFFSETS`] and each unit vector `e_k`.
pub fn standard_effort_grid(contracts: &[ContractTriple]) -> Vec<(String, EffortPolicy)> {
    let z = aggregate_sensitivity(contracts);
    let n = z.dim();
    let mut grid = vec![("best_response".to_string(), EffortPolicy::best_response(z.clone()))];
    for k in 0..n {
        for eps in STANDARD_OFFSETS {
            let mut offset = vec![0.0; n];
            offset[k] = eps;
            grid.push((
                format!("best_response{eps:+}e{}", k + 1),
                EffortPolicy::BestResponse {
                    sensitivity: z.clone(),
                    offset,
                },
            ));
        }
    }
    grid
}

/// Agent utility under each policy with common random numbers; the first
/// entry of `effort_grid` is the candidate.
pub fn best_response_table(
    contracts: &[ContractTriple],
    spec: &DriftCostSpec,
    params: &ModelParams,
    config: SimConfig,
    effort_grid: &[(String, EffortPolicy)],
) -> Result<BestResponseReport> {
    let (first, rest) = effort_grid
        .split_first()
        .ok_or_else(|| AgencyError::invalid("effort_grid", "must contain the candidate policy"))?;
    let base = simulate_outcomes(params, spec, &first.1, contracts, config)?;
    let base_s = base.agent_samples(params.risk_aversion);
    let candidate = PolicyRow {
        policy: first.0.clone(),
        utility: base.agent_utility(params),
        delta: Estimate { mean: 0.0, se: 0.0 },
    };
    let mut alternatives = Vec::with_capacity(rest.len());
    for (name, policy) in rest {
        let o = simulate_outcomes(params, spec, policy, contracts, config)?;
        let s = o.agent_samples(params.risk_aversion);
        alternatives.push(PolicyRow {
            policy: name.clone(),
            utility: o.agent_utility(params),
            delta: paired_difference(&base_s, &s, config.antithetic),
        });
    }
    Ok(BestResponseReport { candidate, alternatives })
}

/// [`best_response_table`] that fails when an alternative wins by more than 2 SE.
pub fn agent_best_response_check(
    contracts: &[ContractTriple],
    spec: &DriftCostSpec,
    params: &ModelParams,
    config: SimConfig,
    effort_grid: &[(String, EffortPolicy)],
) -> Result<BestResponseReport> {
    let report = best_response_table(contracts, spec, params, config, effort_grid)?;
    match report.violation() {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// A unilateral change of one principal's contract.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Deviation {
    /// The equilibrium contract itself.
    Identity,
    /// `beta^i + offset`, with `alpha^i` reset so that the drift rates still
    /// sum to `G(sum_j beta^j)`; `y^i` is unchanged so `sum_j y^j` is too.
    BetaOffset { offset: Vec<f64> },
    /// `beta^i = 0` and `alpha^i = 0`.
    FreeRide,
}

impl Deviation {
    pub fn label(&self) -> String {
        match self {
            Deviation::Identity => "identity".into(),
            Deviation::BetaOffset { offset } => {
                let parts: Vec<String> = offset.iter().map(|v| format!("{v:+}")).collect();
                format!("beta_offset({})", parts.join(","))
            }
            Deviation::FreeRide => "free_ride".into(),
        }
    }

    /// Contracts after principal `i` deviates.
    pub fn apply(
        &self,
        contracts: &[ContractTriple],
        i: usize,
        spec: &DriftCostSpec,
        params: &ModelParams,
    ) -> Vec<ContractTriple> {
        let mut out = contracts.to_vec();
        match self {
            Deviation::Identity => {}
            Deviation::FreeRide => {
                out[i].alpha = ScalarField::Constant(0.0);
                out[i].beta = VectorField::Constant(vec![0.0; contracts[i].beta.dim()]);
            }
            Deviation::BetaOffset { offset } => {
                let beta = match contracts[i].beta.as_constant() {
                    Some(b) => VectorField::Constant(b.iter().zip(offset).map(|(a, d)| a + d).collect()),
                    None => VectorField::Sum(vec![contracts[i].beta.clone(), VectorField::Constant(offset.clone())]),
                };
                out[i].beta = beta;
                let sensitivity = aggregate_sensitivity(&out);
                let minus: Vec<ScalarField> = contracts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, c)| c.alpha.clone())
                    .collect();
                out[i].alpha = constant_generator_share(&sensitivity, &minus, spec, params).unwrap_or_else(|| {
                    ScalarField::Dynamic(Arc::new(GeneratorShare {
                        params: params.clone(),
                        spec: spec.clone(),
                        sensitivity,
                        weight: 1.0,
                        minus,
                    }))
                });
            }
        }
        out
    }
}

/// Folds `G(Z) - sum minus` to a constant when everything is constant and
/// the generator does not depend on `(t, x)` (the LQ case).
fn constant_generator_share(
    sensitivity: &VectorField,
    minus: &[ScalarField],
    spec: &DriftCostSpec,
    params: &ModelParams,
) -> Option<ScalarField> {
    if !spec.is_linear_quadratic() {
        return None;
    }
    let z = sensitivity.as_constant()?;
    let mut rest = 0.0;
    for m in minus {
        rest += m.as_constant()?;
    }
    let g = generator_g(0.0, &params.x0, &z, params, spec).ok()?;
    Some(ScalarField::Constant(g - rest))
}

/// `(beta^i offsets) x (principals)` grid from [`STANDARD_OFFSETS`]: every
/// offset vector in `STANDARD_OFFSETS^N`.
pub fn standard_deviations(dim: usize) -> Vec<Deviation> {
    let k = STANDARD_OFFSETS.len();
    (0..k.pow(dim as u32))
        .map(|flat| {
            let mut rem = flat;
            let offset = (0..dim)
                .map(|_| {
                    let v = STANDARD_OFFSETS[rem % k];
                    rem /= k;
                    v
                })
                .collect();
            Deviation::BetaOffset { offset }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationRow {
    pub principal: usize,
    pub deviation: Deviation,
    pub label: String,
    pub payoff: Estimate,
    /// Deviation payoff minus equilibrium payoff under common random numbers.
    pub delta: Estimate,
    /// Agent utility under the deviation and the re-optimised effort.
    pub agent_utility: Estimate,
}

/// Least-squares fit `delta(o) = o^T A o + b . o` over the offset rows.
#[derive(Debug, Clone, Serialize)]
pub struct QuadraticFit {
    pub principal: usize,
    /// Row-major `A`.
    pub hessian: Vec<f64>,
    pub linear: Vec<f64>,
    pub concave: bool,
    /// Maximiser `-A^-1 b / 2` when `A` is definite.
    pub vertex: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviationTable {
    pub equilibrium_payoffs: Vec<Estimate>,
    pub rows: Vec<DeviationRow>,
    pub fits: Vec<QuadraticFit>,
    /// Only the tested perturbations are certified, not every admissible
    /// contract.
    pub scope: String,
}

impl DeviationTable {
    pub fn violation(&self) -> Option<AgencyError> {
        self.rows
            .iter()
            .filter(|r| r.delta.mean > 2.0 * r.delta.se)
            .max_by(|a, b| a.delta.mean.total_cmp(&b.delta.mean))
            .map(|r| AgencyError::NashViolation {
                principal: r.principal,
                deviation: r.label.clone(),
                gain: r.delta.mean,
                two_se: 2.0 * r.delta.se,
            })
    }
}

/// Payoff deltas for each deviation of each listed principal. The agent
/// re-optimises pointwise against the new aggregate sensitivity.
pub fn deviation_table(
    contracts: &[ContractTriple],
    deviations: &[(usize, Deviation)],
    spec: &DriftCostSpec,
    params: &ModelParams,
    config: SimConfig,
) -> Result<DeviationTable> {
    let eq_policy = EffortPolicy::best_response(aggregate_sensitivity(contracts));
    let base = simulate_outcomes(params, spec, &eq_policy, contracts, config)?;
    let equilibrium_payoffs = base.principal_payoffs(params);
    let mut rows = Vec::with_capacity(deviations.len());
    for (i, dev) in deviations {
        if *i >= contracts.len() {
            return Err(AgencyError::invalid("deviation", format!("principal {i} does not exist")));
        }
        let dc = dev.apply(contracts, *i, spec, params);
        let policy = EffortPolicy::best_response(aggregate_sensitivity(&dc));
        let o = simulate_outcomes(params, spec, &policy, &dc, config)?;
        let a = base.principal_samples(*i, params);
        let b = o.principal_samples(*i, params);
        rows.push(DeviationRow {
            principal: *i,
            deviation: dev.clone(),
            label: dev.label(),
            payoff: Estimate::from_samples(&b, config.antithetic),
            delta: paired_difference(&a, &b, config.antithetic),
            agent_utility: o.agent_utility(params),
        });
    }
    let mut principals: Vec<usize> = rows.iter().map(|r| r.principal).collect();
    principals.dedup();
    principals.sort_unstable();
    principals.dedup();
    let fits = principals
        .into_iter()
        .filter_map(|i| fit_quadratic(i, &rows, params.dim()))
        .collect();
    Ok(DeviationTable {
        equilibrium_payoffs,
        rows,
        fits,
        scope: "local: constant sensitivity offsets and free riding only".into(),
    })
}

/// [`deviation_table`] that fails when a deviation gains more than 2 SE.
pub fn nash_deviation_check(
    contracts: &[ContractTriple],
    deviations: &[(usize, Deviation)],
    spec: &DriftCostSpec,
    params: &ModelParams,
    config: SimConfig,
) -> Result<DeviationTable> {
    let table = deviation_table(contracts, deviations, spec, params, config)?;
    match table.violation() {
        Some(e) => Err(e),
        None => Ok(table),
    }
}

fn fit_quadratic(principal: usize, rows: &[DeviationRow], n: usize) -> Option<QuadraticFit> {
    let pts: Vec<(&Vec<f64>, f64)> = rows
        .iter()
        .filter(|r| r.principal == principal)
        .filter_map(|r| match &r.deviation {
            Deviation::BetaOffset { offset } => Some((offset, r.delta.mean)),
            _ => None,
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
    let unknowns = pairs.len() + n;
    if pts.len() < unknowns {
        return None;
    }
    let design = DMatrix::from_fn(pts.len(), unknowns, |r, c| {
        let o = pts[r].0;
        if c < pairs.len() {
            let (a, b) = pairs[c];
            if a == b {
                o[a] * o[a]
            } else {
                2.0 * o[a] * o[b]
            }
        } else {
            o[c - pairs.len()]
        }
    });
    let rhs = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let coef = design.svd(true, true).solve(&rhs, 1e-14).ok()?;
    let mut a = DMatrix::zeros(n, n);
    for (c, &(i, j)) in pairs.iter().enumerate() {
        a[(i, j)] = coef[c];
        a[(j, i)] = coef[c];
    }
    let linear: Vec<f64> = (0..n).map(|k| coef[pairs.len() + k]).collect();
    let eig = a.clone().symmetric_eigen().eigenvalues;
    let concave = eig.iter().all(|e| *e < 0.0);
    let vertex = a
        .clone()
        .try_inverse()
        .map(|inv| (inv * DVector::from_column_slice(&linear) * -0.5).iter().cloned().collect());
    Some(QuadraticFit {
        principal,
        hessian: a.iter().cloned().collect::<Vec<_>>(),
        linear,
        concave,
        vertex,
    })
}

/// Reference aggregate contract `(Y_0, Z)`; the generator is evaluated on
/// the fly.
#[derive(Debug, Clone)]
pub struct EquilibriumReference {
    pub y0: f64,
    pub z: VectorField,
}

/// Sup over stored `(t, X_t)` of `|sum y - Y_0|`, `|sum alpha - G(sum beta)|`
/// and `|sum beta - Z|`.
pub fn equilibrium_residuals(
    contracts: &[ContractTriple],
    spec: &DriftCostSpec,
    params: &ModelParams,
    paths: &PathEnsemble,
    reference: &EquilibriumReference,
) -> Result<[f64; 3]> {
    let n = paths.dim;
    let y: f64 = contracts.iter().map(|c| c.y).sum();
    let r0 = (y - reference.y0).abs();
    let sum_beta = VectorField::Sum(contracts.iter().map(|c| c.beta.clone()).collect());
    let per_path: Vec<(f64, f64)> = (0..paths.n_paths)
        .into_par_iter()
        .map(|p| -> Result<(f64, f64)> {
            let (mut ra, mut rb) = (0.0f64, 0.0f64);
            let mut zb = vec![0.0; n];
            let mut zr = vec![0.0; n];
            for s in 0..paths.n_steps {
                let t = paths.time(s);
                let x = paths.state(p, s);
                sum_beta.eval_into(t, x, &mut zb);
                reference.z.eval_into(t, x, &mut zr);
                let alpha: f64 = contracts.iter().map(|c| c.alpha.eval(t, x)).sum();
                let g = generator_g(t, x, &zb, params, spec)?;
                ra = ra.max((alpha - g).abs());
                rb = rb.max(zb.iter().zip(&zr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
            Ok((ra, rb))
        })
        .collect::<Result<_>>()?;
    let (ra, rb) = per_path.iter().fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(*x), b.max(*y)));
    Ok([r0, ra, rb])
}

/// Constant equilibrium contracts of the bi-principal LQ model.
pub fn lq_equilibrium_contracts(params: &LQParams, sol: &LQSolution) -> Result<Vec<ContractTriple>> {
    let y = sol.y_split.ok_or_else(|| {
        AgencyError::Degenerate("the reservation wage is undefined for a risk-neutral agent".into())
    })?;
    let _ = params;
    Ok((0..2)
        .map(|i| ContractTriple::constant(y[i], sol.alpha_split[i], sol.beta(i).to_vec()))
        .collect())
}

/// Contracts read off a grid solution: `beta^i` interpolated, `alpha^i =
/// G(sum_j beta^j) / N` and `y^i = r_0 / N`.
pub fn grid_equilibrium_contracts(
    sol: &GridSolution,
    spec: &DriftCostSpec,
    params: &ModelParams,
) -> Result<Vec<ContractTriple>> {
    let r0 = params.reservation_wage().ok_or_else(|| {
        AgencyError::Degenerate("the reservation wage is undefined for a risk-neutral agent".into())
    })?;
    let n = sol.n_components();
    let betas: Vec<VectorField> = (0..n)
        .map(|i| VectorField::Dynamic(Arc::new(sol.beta_interpolant(i))))
        .collect();
    let sensitivity = VectorField::Sum(betas.clone());
    Ok(betas
        .into_iter()
        .map(|beta| ContractTriple {
            y: r0 / n as f64,
            alpha: ScalarField::Dynamic(Arc::new(GeneratorShare {
                params: params.clone(),
                spec: spec.clone(),
                sensitivity: sensitivity.clone(),
                weight: 1.0 / n as f64,
                minus: Vec::new(),
            })),
            beta,
        })
        .collect())
}

/// Everything one simulation run reports.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub antithetic: bool,
    pub agent_utility: Estimate,
    pub predicted_agent_utility: f64,
    pub principal_payoffs: Vec<Estimate>,
    /// `[|sum y - Y_0|, |sum alpha - G|, |sum beta - Z|]` on a stored subsample.
    pub equilibrium_residuals: Option<[f64; 3]>,
    pub deviation_table: Option<DeviationTable>,
    pub notes: Vec<String>,
}

/// Simulates `contracts` under the agent's best response and fills a report.
pub fn simulate_report(
    contracts: &[ContractTriple],
    spec: &DriftCostSpec,
    params: &ModelParams,
    config: SimConfig,
    reference: Option<&EquilibriumReference>,
) -> Result<SimReport> {
    let z = aggregate_sensitivity(contracts);
    let policy = EffortPolicy::best_response(z);
    let o = simulate_outcomes(params, spec, &policy, contracts, config)?;
    let y0: f64 = contracts.iter().map(|c| c.y).sum();
    let residuals = match reference {
        Some(r) => {
            let sub = SimConfig {
                n_paths: MIN_PATHS,
                antithetic: false,
                ..config
            };
            let paths = simulate_paths(params, spec, &policy, sub)?;
            Some(equilibrium_residuals(contracts, spec, params, &paths, r)?)
        }
        None => None,
    };
    Ok(SimReport {
        n_paths: config.n_paths,
        dt: config.dt,
        seed: config.seed,
        antithetic: config.antithetic,
        agent_utility: o.agent_utility(params),
        predicted_agent_utility: predicted_agent_utility(params, y0),
        principal_payoffs: o.principal_payoffs(params),
        equilibrium_residuals: residuals,
        deviation_table: None,
        notes: Vec::new(),
    })
}

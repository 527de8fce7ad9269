//! Problem primitives shared by every solver.
//!
//! The output process is `dX = b(t, X, nu) dt + Sigma dW`, the Agent pays a
//! running cost `c(t, X, nu)` and has exponential utility with risk aversion
//! `R_A`. A contract panel whose aggregate wage admits the representation
//! `Y0 + int G(t, X, Z) dt + int Z . dX` is optimally answered by the
//! pointwise maximiser `nu*(t, x, Z)` of `b . z - c`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{AgencyError, Result};

/// Two maximisers farther apart than this (in the effort norm) are distinct.
pub const MAXIMIZER_SEPARATION: f64 = 1e-6;
/// Two maximiser values closer than this are ties.
pub const MAXIMIZER_VALUE_TIE: f64 = 1e-10;
/// Projected-gradient tolerance of the effort maximiser.
const MAXIMIZER_GRAD_TOL: f64 = 1e-11;
const MAXIMIZER_MAX_ITER: usize = 200;
/// Largest accepted condition number of the volatility matrix.
pub const MAX_SIGMA_CONDITION: f64 = 1e12;

/// Full problem specification for `N` principals and one agent.
#[derive(Debug, Clone, Serialize)]
pub struct ModelParams {
    pub n_principals: usize,
    pub horizon: f64,
    pub x0: Vec<f64>,
    #[serde(serialize_with = "serialize_matrix")]
    pub sigma: DMatrix<f64>,
    pub risk_aversion: f64,
    pub reservation_utility: f64,
    pub appetence: Vec<f64>,
    pub discount: f64,
    /// Condition number of `sigma` recorded at construction.
    pub sigma_condition: f64,
}

fn serialize_matrix<S: serde::Serializer>(
    m: &DMatrix<f64>,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    rows.serialize(s)
}

impl ModelParams {
    pub fn new(
        horizon: f64,
        x0: Vec<f64>,
        sigma: DMatrix<f64>,
        risk_aversion: f64,
        reservation_utility: f64,
        appetence: Vec<f64>,
    ) -> Result<Self> {
        let n = x0.len();
        if n == 0 {
            return Err(AgencyError::invalid("x0", "at least one principal is required"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(AgencyError::invalid("horizon", "must be finite and > 0"));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(AgencyError::invalid("x0", "entries must be finite"));
        }
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(AgencyError::invalid(
                "sigma",
                format!("expected {n}x{n}, got {}x{}", sigma.nrows(), sigma.ncols()),
            ));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(AgencyError::invalid("sigma", "entries must be finite"));
        }
        if !(risk_aversion >= 0.0 && risk_aversion.is_finite()) {
            return Err(AgencyError::invalid("risk_aversion", "must be finite and >= 0"));
        }
        if !(reservation_utility < 0.0 && reservation_utility.is_finite()) {
            return Err(AgencyError::invalid(
                "reservation_utility",
                "must be finite and < 0 (exponential utility is negative)",
            ));
        }
        if appetence.len() != n {
            return Err(AgencyError::invalid(
                "appetence",
                format!("expected {n} entries, got {}", appetence.len()),
            ));
        }
        if appetence.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(AgencyError::invalid("appetence", "entries must lie in [0, 1]"));
        }
        let sigma_condition = condition_number(&sigma);
        if !(sigma_condition.is_finite() && sigma_condition <= MAX_SIGMA_CONDITION) {
            return Err(AgencyError::invalid(
                "sigma",
                format!("matrix is singular or ill-conditioned (condition number {sigma_condition:e})"),
            ));
        }
        Ok(Self {
            n_principals: n,
            horizon,
            x0,
            sigma,
            risk_aversion,
            reservation_utility,
            appetence,
            discount: 0.0,
            sigma_condition,
        })
    }

    /// Only a zero discount rate is supported by the solution branches.
    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        if discount != 0.0 {
            return Err(AgencyError::invalid("discount", "only k = 0 is supported"));
        }
        self.discount = discount;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.n_principals
    }

    /// `Sigma Sigma^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.sigma * self.sigma.transpose()
    }

    /// Largest eigenvalue of `Sigma Sigma^T`.
    pub fn max_covariance_eigenvalue(&self) -> f64 {
        self.covariance()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    /// Certainty equivalent `r0 = -ln(-R0) / R_A` of the reservation utility.
    ///
    /// Undefined for a risk-neutral agent.
    pub fn reservation_wage(&self) -> Option<f64> {
        (self.risk_aversion > 0.0)
            .then(|| -(-self.reservation_utility).ln() / self.risk_aversion)
    }

    /// Competitive liquidation payoff of principal `i`:
    /// `x_i + gamma_i (x_i - mean_{j != i} x_j)`.
    pub fn liquidation(&self, i: usize, x: &[f64]) -> f64 {
        self.liquidation_gradient(i)
            .iter()
            .zip(x)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Constant gradient of the (linear) liquidation payoff of principal `i`.
    pub fn liquidation_gradient(&self, i: usize) -> Vec<f64> {
        let n = self.n_principals;
        let mut g = vec![0.0; n];
        if n == 1 {
            g[0] = 1.0;
            return g;
        }
        let gamma = self.appetence[i];
        let share = gamma / (n as f64 - 1.0);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = if j == i { 1.0 + gamma } else { -share };
        }
        g
    }

    /// Gradient of the aggregate payoff `L = sum_i l_i`.
    pub fn aggregate_liquidation_gradient(&self) -> Vec<f64> {
        let n = self.n_principals;
        let mut total = vec![0.0; n];
        for i in 0..n {
            for (t, g) in total.iter_mut().zip(self.liquidation_gradient(i)) {
                *t += g;
            }
        }
        total
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// A drift/cost pair with component-form drift `b^i(t, x, nu^i)`.
///
/// Derivatives not overridden are taken by central finite differences.
pub trait EffortModel: Send + Sync + fmt::Debug {
    fn drift(&self, t: f64, x: &[f64], i: usize, nu_i: f64) -> f64;

    fn drift_slope(&self, t: f64, x: &[f64], i: usize, nu_i: f64) -> f64 {
        let h = 1e-6 * (1.0 + nu_i.abs());
        (self.drift(t, x, i, nu_i + h) - self.drift(t, x, i, nu_i - h)) / (2.0 * h)
    }

    fn drift_curvature(&self, t: f64, x: &[f64], i: usize, nu_i: f64) -> f64 {
        let h = 1e-4 * (1.0 + nu_i.abs());
        (self.drift(t, x, i, nu_i + h) - 2.0 * self.drift(t, x, i, nu_i)
            + self.drift(t, x, i, nu_i - h))
            / (h * h)
    }

    fn cost(&self, t: f64, x: &[f64], nu: &[f64]) -> f64;

    fn cost_gradient(&self, t: f64, x: &[f64], nu: &[f64], out: &mut [f64]) {
        let mut p = nu.to_vec();
        for i in 0..nu.len() {
            let h = 1e-6 * (1.0 + nu[i].abs());
            p[i] = nu[i] + h;
            let up = self.cost(t, x, &p);
            p[i] = nu[i] - h;
            let dn = self.cost(t, x, &p);
            p[i] = nu[i];
            out[i] = (up - dn) / (2.0 * h);
        }
    }

    fn cost_hessian(&self, t: f64, x: &[f64], nu: &[f64], out: &mut DMatrix<f64>) {
        let n = nu.len();
        let mut p = nu.to_vec();
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        for j in 0..n {
            let h = 1e-5 * (1.0 + nu[j].abs());
            p[j] = nu[j] + h;
            self.cost_gradient(t, x, &p, &mut gp);
            p[j] = nu[j] - h;
            self.cost_gradient(t, x, &p, &mut gm);
            p[j] = nu[j];
            for i in 0..n {
                out[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let sym = (&*out + out.transpose()) * 0.5;
        out.copy_from(&sym);
    }

    /// Per-coordinate effort box `[lo, hi]`.
    fn effort_bounds(&self) -> (f64, f64);

    /// Whether `nu -> b(nu) . z - c(nu)` is strictly concave for every `z`.
    ///
    /// When true a single maximiser run is performed and strict concavity is
    /// checked at the optimum; otherwise the box is searched from several
    /// starting points to detect multiple maximisers.
    fn concave_hamiltonian(&self) -> bool {
        false
    }

    fn name(&self) -> &str;
}

/// Linear drift `b = K nu` with cost `|nu|^2 / 2 + kappa sum nu_i^4 / 4` on a
/// bounded effort box. `kappa = 0` recovers the linear-quadratic model.
#[derive(Debug, Clone)]
pub struct QuarticCost {
    pub efficiency: Vec<f64>,
    pub kappa: f64,
    pub bound: f64,
}

impl EffortModel for QuarticCost {
    fn drift(&self, _t: f64, _x: &[f64], i: usize, nu_i: f64) -> f64 {
        self.efficiency[i] * nu_i
    }
    fn drift_slope(&self, _t: f64, _x: &[f64], i: usize, _nu_i: f64) -> f64 {
        self.efficiency[i]
    }
    fn drift_curvature(&self, _t: f64, _x: &[f64], _i: usize, _nu_i: f64) -> f64 {
        0.0
    }
    fn cost(&self, _t: f64, _x: &[f64], nu: &[f64]) -> f64 {
        nu.iter()
            .map(|v| 0.5 * v * v + 0.25 * self.kappa * v.powi(4))
            .sum()
    }
    fn cost_gradient(&self, _t: f64, _x: &[f64], nu: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(nu) {
            *o = v + self.kappa * v.powi(3);
        }
    }
    fn cost_hessian(&self, _t: f64, _x: &[f64], nu: &[f64], out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (i, v) in nu.iter().enumerate() {
            out[(i, i)] = 1.0 + 3.0 * self.kappa * v * v;
        }
    }
    fn effort_bounds(&self) -> (f64, f64) {
        (-self.bound, self.bound)
    }
    fn concave_hamiltonian(&self) -> bool {
        self.kappa >= 0.0
    }
    fn name(&self) -> &str {
        "quartic"
    }
}

/// Linear drift with the non-convex cost `sum (nu_i^2 - 1)^2 / 4`: at `z = 0`
/// every coordinate has the two maximisers `+-1`.
#[derive(Debug, Clone)]
pub struct DoubleWellCost {
    pub efficiency: Vec<f64>,
    pub bound: f64,
}

impl EffortModel for DoubleWellCost {
    fn drift(&self, _t: f64, _x: &[f64], i: usize, nu_i: f64) -> f64 {
        self.efficiency[i] * nu_i
    }
    fn cost(&self, _t: f64, _x: &[f64], nu: &[f64]) -> f64 {
        nu.iter().map(|v| 0.25 * (v * v - 1.0).powi(2)).sum()
    }
    fn cost_gradient(&self, _t: f64, _x: &[f64], nu: &[f64], out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(nu) {
            *o = v * (v * v - 1.0);
        }
    }
    fn effort_bounds(&self) -> (f64, f64) {
        (-self.bound, self.bound)
    }
    fn name(&self) -> &str {
        "double_well"
    }
}

/// Drift and cost specification.
#[derive(Debug, Clone)]
pub enum DriftCostSpec {
    /// `b = K nu`, `c = |nu|^2 / 2` with `K = diag(efficiency)`, unbounded effort.
    LinearQuadratic { efficiency: Vec<f64> },
    General(Arc<dyn EffortModel>),
}

impl DriftCostSpec {
    pub fn linear_quadratic(efficiency: Vec<f64>) -> Result<Self> {
        if efficiency.is_empty() || efficiency.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(AgencyError::invalid("efficiency", "entries must be finite and > 0"));
        }
        Ok(DriftCostSpec::LinearQuadratic { efficiency })
    }

    pub fn general(model: impl EffortModel + 'static) -> Self {
        DriftCostSpec::General(Arc::new(model))
    }

    pub fn is_linear_quadratic(&self) -> bool {
        matches!(self, DriftCostSpec::LinearQuadratic { .. })
    }

    pub fn name(&self) -> &str {
        match self {
            DriftCostSpec::LinearQuadratic { .. } => "linear_quadratic",
            DriftCostSpec::General(m) => m.name(),
        }
    }

    pub fn drift_into(&self, t: f64, x: &[f64], nu: &[f64], out: &mut [f64]) {
        match self {
            DriftCostSpec::LinearQuadratic { efficiency } => {
                for ((o, k), v) in out.iter_mut().zip(efficiency).zip(nu) {
                    *o = k * v;
                }
            }
            DriftCostSpec::General(m) => {
                for (i, (o, v)) in out.iter_mut().zip(nu).enumerate() {
                    *o = m.drift(t, x, i, *v);
                }
            }
        }
    }

    pub fn drift(&self, t: f64, x: &[f64], nu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; nu.len()];
        self.drift_into(t, x, nu, &mut out);
        out
    }

    pub fn cost(&self, t: f64, x: &[f64], nu: &[f64]) -> f64 {
        match self {
            DriftCostSpec::LinearQuadratic { .. } => 0.5 * nu.iter().map(|v| v * v).sum::<f64>(),
            DriftCostSpec::General(m) => m.cost(t, x, nu),
        }
    }

    /// Diagonal of `grad_nu b` at `nu`.
    pub fn drift_slopes(&self, t: f64, x: &[f64], nu: &[f64]) -> Vec<f64> {
        match self {
            DriftCostSpec::LinearQuadratic { efficiency } => efficiency.clone(),
            DriftCostSpec::General(m) => nu
                .iter()
                .enumerate()
                .map(|(i, v)| m.drift_slope(t, x, i, *v))
                .collect(),
        }
    }

    /// Spot check of the drift/cost assumptions on sampled `(x, nu)` pairs:
    /// finite values, nonnegative cost and `c(0) = 0` for the LQ variant.
    pub fn spot_check(&self, t: f64, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<()> {
        for (x, nu) in samples {
            let c = self.cost(t, x, nu);
            if !(c.is_finite() && c >= 0.0) {
                return Err(AgencyError::invalid("cost", format!("c = {c} at nu = {nu:?}")));
            }
            if self.drift(t, x, nu).iter().any(|b| !b.is_finite()) {
                return Err(AgencyError::invalid("drift", format!("non-finite drift at nu = {nu:?}")));
            }
            if self.is_linear_quadratic() {
                let zero = vec![0.0; nu.len()];
                if self.cost(t, x, &zero) != 0.0 {
                    return Err(AgencyError::invalid("cost", "c(0) must vanish"));
                }
            }
        }
        Ok(())
    }
}

/// Agent Hamiltonian `b(t, x, nu) . z - c(t, x, nu)`.
pub fn agent_hamiltonian(t: f64, x: &[f64], nu: &[f64], z: &[f64], spec: &DriftCostSpec) -> f64 {
    let b = spec.drift(t, x, nu);
    b.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() - spec.cost(t, x, nu)
}

/// Writes the maximiser `nu*(t, x, z)` into `out` and returns the maximum.
pub fn best_response_into(
    t: f64,
    x: &[f64],
    z: &[f64],
    spec: &DriftCostSpec,
    out: &mut [f64],
) -> Result<f64> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(AgencyError::invalid("z", "sensitivity must be finite"));
    }
    match spec {
        DriftCostSpec::LinearQuadratic { efficiency } => {
            let mut max = 0.0;
            for ((o, k), zi) in out.iter_mut().zip(efficiency).zip(z) {
                *o = k * zi;
                max += 0.5 * *o * *o;
            }
            Ok(max)
        }
        DriftCostSpec::General(model) => {
            let (nu, value) = maximize_general(model.as_ref(), t, x, z)?;
            out.copy_from_slice(&nu);
            Ok(value)
        }
    }
}

/// Agent's pointwise best response `nu*(t, x, z) = argmax_nu (b . z - c)`.
pub fn best_response(t: f64, x: &[f64], z: &[f64], spec: &DriftCostSpec) -> Result<Vec<f64>> {
    let mut out = vec![0.0; z.len()];
    best_response_into(t, x, z, spec, &mut out)?;
    Ok(out)
}

/// Contract generator `G(t, x, z) = (R_A / 2) |Sigma^T z|^2 - sup_nu (b . z - c)`.
pub fn generator_g(
    t: f64,
    x: &[f64],
    z: &[f64],
    params: &ModelParams,
    spec: &DriftCostSpec,
) -> Result<f64> {
    let mut nu = vec![0.0; z.len()];
    let sup = best_response_into(t, x, z, spec, &mut nu)?;
    Ok(0.5 * params.risk_aversion * sigma_t_norm_sq(&params.sigma, z) - sup)
}

/// `|Sigma^T z|^2`.
pub fn sigma_t_norm_sq(sigma: &DMatrix<f64>, z: &[f64]) -> f64 {
    let n = z.len();
    (0..sigma.ncols())
        .map(|j| {
            let s: f64 = (0..n).map(|i| sigma[(i, j)] * z[i]).sum();
            s * s
        })
        .sum()
}

fn hamiltonian_gradient(
    model: &dyn EffortModel,
    t: f64,
    x: &[f64],
    z: &[f64],
    nu: &[f64],
    grad: &mut [f64],
) {
    model.cost_gradient(t, x, nu, grad);
    for i in 0..nu.len() {
        grad[i] = model.drift_slope(t, x, i, nu[i]) * z[i] - grad[i];
    }
}

/// Hessian of `nu -> b(nu) . z - c(nu)`.
pub(crate) fn hamiltonian_hessian(
    model: &dyn EffortModel,
    t: f64,
    x: &[f64],
    z: &[f64],
    nu: &[f64],
) -> DMatrix<f64> {
    let n = nu.len();
    let mut h = DMatrix::zeros(n, n);
    model.cost_hessian(t, x, nu, &mut h);
    h.neg_mut();
    for i in 0..n {
        h[(i, i)] += model.drift_curvature(t, x, i, nu[i]) * z[i];
    }
    h
}

fn hamiltonian_value(model: &dyn EffortModel, t: f64, x: &[f64], z: &[f64], nu: &[f64]) -> f64 {
    nu.iter()
        .enumerate()
        .map(|(i, v)| model.drift(t, x, i, *v) * z[i])
        .sum::<f64>()
        - model.cost(t, x, nu)
}

fn projected_gradient(model: &dyn EffortModel, t: f64, x: &[f64], z: &[f64], nu: &[f64], lo: f64, hi: f64) -> f64 {
    let mut grad = vec![0.0; nu.len()];
    hamiltonian_gradient(model, t, x, z, nu, &mut grad);
    (0..nu.len())
        .filter(|&i| !((nu[i] <= lo && grad[i] < 0.0) || (nu[i] >= hi && grad[i] > 0.0)))
        .map(|i| grad[i].abs())
        .fold(0.0, f64::max)
}

struct LocalMax {
    nu: Vec<f64>,
    value: f64,
    strictly_concave: bool,
}

/// Projected Newton ascent on the effort box from `start`.
fn ascend(model: &dyn EffortModel, t: f64, x: &[f64], z: &[f64], start: &[f64]) -> Result<LocalMax> {
    let n = z.len();
    let (lo, hi) = model.effort_bounds();
    let clamp = |v: f64| v.clamp(lo, hi);
    let mut nu: Vec<f64> = start.iter().map(|v| clamp(*v)).collect();
    let mut value = hamiltonian_value(model, t, x, z, &nu);
    let mut grad = vec![0.0; n];
    for _ in 0..MAXIMIZER_MAX_ITER {
        hamiltonian_gradient(model, t, x, z, &nu, &mut grad);
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((nu[i] <= lo && grad[i] < 0.0) || (nu[i] >= hi && grad[i] > 0.0)))
            .collect();
        let pg = free.iter().map(|&i| grad[i].abs()).fold(0.0, f64::max);
        let hess = hamiltonian_hessian(model, t, x, z, &nu);
        let neg_free = DMatrix::from_fn(free.len(), free.len(), |a, b| -hess[(free[a], free[b])]);
        let chol = neg_free.clone().cholesky();
        if pg <= MAXIMIZER_GRAD_TOL * (1.0 + value.abs()) {
            return Ok(LocalMax {
                nu,
                value,
                strictly_concave: chol.is_some(),
            });
        }
        let mut dir = vec![0.0; n];
        match &chol {
            Some(c) => {
                let g = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
                let d = c.solve(&g);
                for (a, &i) in free.iter().enumerate() {
                    dir[i] = d[a];
                }
            }
            None => {
                for &i in &free {
                    dir[i] = grad[i];
                }
            }
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = nu.iter().zip(&dir).map(|(v, d)| clamp(v + step * d)).collect();
            let tv = hamiltonian_value(model, t, x, z, &trial);
            let gain: f64 = grad
                .iter()
                .zip(trial.iter().zip(&nu))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            // Within rounding of the value, fall back to gradient decrease.
            let flat = (tv - value).abs() <= 8.0 * f64::EPSILON * (1.0 + value.abs());
            let sufficient = tv >= value + 1e-4 * gain && tv >= value;
            if sufficient || (flat && projected_gradient(model, t, x, z, &trial, lo, hi) < pg) {
                let moved = trial.iter().zip(&nu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                nu = trial;
                value = tv;
                accepted = moved > 0.0;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent possible at machine precision: stationary on the box.
            let strictly_concave = chol.is_some();
            return Ok(LocalMax {
                nu,
                value,
                strictly_concave,
            });
        }
    }
    Err(AgencyError::NonConcaveHamiltonian {
        reason: format!("effort maximiser did not converge in {MAXIMIZER_MAX_ITER} iterations at z = {z:?}"),
    })
}

fn maximize_general(model: &dyn EffortModel, t: f64, x: &[f64], z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = z.len();
    let (lo, hi) = model.effort_bounds();
    if !(lo < hi) {
        return Err(AgencyError::invalid("effort_bounds", "empty effort box"));
    }
    let centre = vec![0.0_f64.clamp(lo, hi); n];
    if model.concave_hamiltonian() {
        let m = ascend(model, t, x, z, &centre)?;
        if !m.strictly_concave {
            return Err(AgencyError::NonConcaveHamiltonian {
                reason: format!("hessian not negative definite at nu = {:?}", m.nu),
            });
        }
        return Ok((m.nu, m.value));
    }
    let mut starts = vec![centre];
    if n <= 8 {
        for mask in 0..(1usize << n) {
            starts.push((0..n).map(|i| if mask >> i & 1 == 1 { hi } else { lo }).collect());
        }
    }
    let mut found: Vec<LocalMax> = Vec::with_capacity(starts.len());
    for s in &starts {
        found.push(ascend(model, t, x, z, s)?);
    }
    let best = found
        .iter()
        .map(|m| m.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<&LocalMax> = found
        .iter()
        .filter(|m| best - m.value <= MAXIMIZER_VALUE_TIE)
        .collect();
    let first = winners[0];
    for other in &winners[1..] {
        let dist = first
            .nu
            .iter()
            .zip(&other.nu)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if dist > MAXIMIZER_SEPARATION {
            return Err(AgencyError::NonConcaveHamiltonian {
                reason: format!(
                    "distinct maximisers {:?} and {:?} with equal value {best}",
                    first.nu, other.nu
                ),
            });
        }
    }
    Ok((first.nu.clone(), first.value))
}

/// Fitted growth constants on a sample of sensitivities.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub samples: usize,
    /// Smallest `C` with `|nu*| <= C (1 + |z|^{1/m_lower})` on the samples.
    pub effort_constant: f64,
    /// Smallest `C` with `|G| <= C (1 + |z|^2 + |z| |x|)` on the samples.
    pub generator_constant: f64,
    /// Smallest constant satisfying both bounds.
    pub constant: f64,
    /// Log-log slope of `|nu*|` against `|z|` over samples with `|z| >= 1`.
    pub effort_exponent: Option<f64>,
    /// Log-log slope of `|G|` against `|z|` over samples with `|z| >= 1`.
    pub generator_exponent: Option<f64>,
    pub violations: Vec<String>,
}

/// Empirical check of the growth bounds on `nu*` and `G`, evaluated at `params.x0`.
pub fn growth_sanity(
    z_samples: &[Vec<f64>],
    spec: &DriftCostSpec,
    params: &ModelParams,
    m_lower: f64,
) -> Result<GrowthReport> {
    if z_samples.is_empty() {
        return Err(AgencyError::invalid("z_samples", "at least one sample is required"));
    }
    if !(m_lower > 0.0) {
        return Err(AgencyError::invalid("m_lower", "must be > 0"));
    }
    let x = &params.x0;
    let x_norm = norm(x);
    let mut c_nu: f64 = 0.0;
    let mut c_g: f64 = 0.0;
    let mut tail_nu = Vec::new();
    let mut tail_g = Vec::new();
    for z in z_samples {
        let nu = best_response(0.0, x, z, spec)?;
        let g = generator_g(0.0, x, z, params, spec)?;
        let zn = norm(z);
        let nn = norm(&nu);
        c_nu = c_nu.max(nn / (1.0 + zn.powf(1.0 / m_lower)));
        c_g = c_g.max(g.abs() / (1.0 + zn * zn + zn * x_norm));
        if zn >= 1.0 {
            if nn > 0.0 {
                tail_nu.push((zn.ln(), nn.ln()));
            }
            if g.abs() > 0.0 {
                tail_g.push((zn.ln(), g.abs().ln()));
            }
        }
    }
    let effort_exponent = loglog_slope(&tail_nu);
    let generator_exponent = loglog_slope(&tail_g);
    let mut violations = Vec::new();
    if let Some(s) = effort_exponent {
        if s > 1.0 / m_lower + 0.05 {
            violations.push(format!("effort grows like |z|^{s:.3}, faster than |z|^{:.3}", 1.0 / m_lower));
        }
    }
    if let Some(s) = generator_exponent {
        if s > 2.05 {
            violations.push(format!("generator grows like |z|^{s:.3}, faster than quadratic"));
        }
    }
    Ok(GrowthReport {
        samples: z_samples.len(),
        effort_constant: c_nu,
        generator_constant: c_g,
        constant: c_nu.max(c_g),
        effort_exponent,
        generator_exponent,
        violations,
    })
}

fn loglog_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx < 1e-12 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// A time- and state-dependent vector field `(t, x) -> R^d`.
pub trait Feedback: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);
}

/// A time- and state-dependent scalar field.
pub trait ScalarFeedback: Send + Sync {
    fn eval(&self, t: f64, x: &[f64]) -> f64;
}

#[derive(Clone)]
pub enum VectorField {
    Constant(Vec<f64>),
    Dynamic(Arc<dyn Feedback>),
    Sum(Vec<VectorField>),
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VectorField::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            VectorField::Dynamic(d) => write!(f, "Dynamic(dim = {})", d.dim()),
            VectorField::Sum(parts) => f.debug_tuple("Sum").field(parts).finish(),
        }
    }
}

impl VectorField {
    pub fn dim(&self) -> usize {
        match self {
            VectorField::Constant(v) => v.len(),
            VectorField::Dynamic(d) => d.dim(),
            VectorField::Sum(parts) => parts.first().map_or(0, |p| p.dim()),
        }
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            VectorField::Constant(v) => out.copy_from_slice(v),
            VectorField::Dynamic(d) => d.eval(t, x, out),
            VectorField::Sum(parts) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut tmp = vec![0.0; out.len()];
                for p in parts {
                    p.eval_into(t, x, &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += v;
                    }
                }
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, x, &mut out);
        out
    }

    pub fn as_constant(&self) -> Option<Vec<f64>> {
        match self {
            VectorField::Constant(v) => Some(v.clone()),
            VectorField::Dynamic(_) => None,
            VectorField::Sum(parts) => {
                let mut acc = vec![0.0; self.dim()];
                for p in parts {
                    for (a, v) in acc.iter_mut().zip(p.as_constant()?) {
                        *a += v;
                    }
                }
                Some(acc)
            }
        }
    }
}

#[derive(Clone)]
pub enum ScalarField {
    Constant(f64),
    Dynamic(Arc<dyn ScalarFeedback>),
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarField::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            ScalarField::Dynamic(_) => f.write_str("Dynamic"),
        }
    }
}

impl ScalarField {
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ScalarField::Constant(v) => *v,
            ScalarField::Dynamic(d) => d.eval(t, x),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            ScalarField::Constant(v) => Some(*v),
            ScalarField::Dynamic(_) => None,
        }
    }
}

/// Feedback effort `(t, x) -> nu`.
#[derive(Debug, Clone)]
pub enum EffortPolicy {
    /// An explicit effort field.
    Feedback(VectorField),
    /// `nu*(t, x, Z(t, x)) + offset`: the best response to the aggregate
    /// sensitivity `Z`, optionally shifted by a constant.
    BestResponse {
        sensitivity: VectorField,
        offset: Vec<f64>,
    },
}

impl EffortPolicy {
    pub fn constant(nu: Vec<f64>) -> Self {
        EffortPolicy::Feedback(VectorField::Constant(nu))
    }

    pub fn best_response(sensitivity: VectorField) -> Self {
        let n = sensitivity.dim();
        EffortPolicy::BestResponse {
            sensitivity,
            offset: vec![0.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EffortPolicy::Feedback(f) => f.dim(),
            EffortPolicy::BestResponse { sensitivity, .. } => sensitivity.dim(),
        }
    }

    /// `scratch` must have length `dim()`.
    pub fn eval_into(
        &self,
        t: f64,
        x: &[f64],
        spec: &DriftCostSpec,
        scratch: &mut [f64],
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            EffortPolicy::Feedback(f) => {
                f.eval_into(t, x, out);
                Ok(())
            }
            EffortPolicy::BestResponse { sensitivity, offset } => {
                sensitivity.eval_into(t, x, scratch);
                best_response_into(t, x, scratch, spec, out)?;
                for (o, d) in out.iter_mut().zip(offset) {
                    *o += d;
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], spec: &DriftCostSpec) -> Result<Vec<f64>> {
        let n = self.dim();
        let mut scratch = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.eval_into(t, x, spec, &mut scratch, &mut out)?;
        Ok(out)
    }

    /// Largest effort norm over a regular sample of `[0, T] x [lo, hi]^N`;
    /// fails on any non-finite evaluation.
    pub fn sampled_bound(
        &self,
        spec: &DriftCostSpec,
        horizon: f64,
        lo: f64,
        hi: f64,
        per_axis: usize,
    ) -> Result<f64> {
        let n = self.dim();
        let per_axis = per_axis.max(2);
        let total = per_axis.pow(n as u32);
        let mut max: f64 = 0.0;
        let mut x = vec![0.0; n];
        for ti in 0..per_axis {
            let t = horizon * ti as f64 / (per_axis - 1) as f64;
            for flat in 0..total {
                let mut rem = flat;
                for xi in x.iter_mut() {
                    *xi = lo + (hi - lo) * (rem % per_axis) as f64 / (per_axis - 1) as f64;
                    rem /= per_axis;
                }
                let nu = self.eval(t, &x, spec)?;
                let nn = norm(&nu);
                if !nn.is_finite() {
                    return Err(AgencyError::invalid("policy", format!("non-finite effort at t = {t}, x = {x:?}")));
                }
                max = max.max(nn);
            }
        }
        Ok(max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params2(ra: f64) -> ModelParams {
        ModelParams::new(1.0, vec![0.0, 0.0], DMatrix::identity(2, 2), ra, -1.0, vec![0.0, 0.0]).unwrap()
    }

    /// Grid-search oracle for `sup_nu (K nu . z - |nu|^2 / 2)` on `[-5, 5]^2`.
    fn grid_sup(k: &[f64], z: &[f64], step: f64) -> (f64, [f64; 2]) {
        let n = (10.0 / step).round() as i64;
        let mut best = (f64::NEG_INFINITY, [0.0; 2]);
        for i in 0..=n {
            for j in 0..=n {
                let nu = [-5.0 + i as f64 * step, -5.0 + j as f64 * step];
                let v = k[0] * nu[0] * z[0] + k[1] * nu[1] * z[1] - 0.5 * (nu[0] * nu[0] + nu[1] * nu[1]);
                if v > best.0 {
                    best = (v, nu);
                }
            }
        }
        best
    }

    #[test]
    fn generator_vanishes_at_zero() {
        let spec = DriftCostSpec::linear_quadratic(vec![1.3, 0.7]).unwrap();
        for ra in [0.0, 1.0, 5.0] {
            assert_eq!(generator_g(0.0, &[1.0, 2.0], &[0.0, 0.0], &params2(ra), &spec).unwrap(), 0.0);
        }
    }

    #[test]
    fn generator_matches_grid_oracle() {
        let spec = DriftCostSpec::linear_quadratic(vec![1.0, 1.0]).unwrap();
        let step = 0.01;
        let (sup, _) = grid_sup(&[1.0, 1.0], &[1.0, 1.0], step);
        let oracle = 0.5 * 1.0 * 2.0 - sup;
        assert_abs_diff_eq!(oracle, 0.0, epsilon = step * step);
        let g = generator_g(0.0, &[0.0, 0.0], &[1.0, 1.0], &params2(1.0), &spec).unwrap();
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-15);

        let (sup, _) = grid_sup(&[1.0, 1.0], &[1.0, 0.0], step);
        let oracle = 0.5 * 2.0 * 1.0 - sup;
        assert_abs_diff_eq!(oracle, 0.5, epsilon = step * step);
        let g = generator_g(0.0, &[0.0, 0.0], &[1.0, 0.0], &params2(2.0), &spec).unwrap();
        assert_abs_diff_eq!(g, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn best_response_lq() {
        let spec = DriftCostSpec::linear_quadratic(vec![2.0, 1.0]).unwrap();
        let nu = best_response(0.0, &[0.0, 0.0], &[1.0, 3.0], &spec).unwrap();
        assert_eq!(nu, vec![2.0, 3.0]);
        let (_, arg) = grid_sup(&[2.0, 1.0], &[1.0, 3.0], 0.01);
        assert_abs_diff_eq!(arg[0], 2.0, epsilon = 0.01);
        assert_abs_diff_eq!(arg[1], 3.0, epsilon = 0.01);
        assert_eq!(best_response(0.0, &[0.0, 0.0], &[0.0, 0.0], &spec).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn generic_route_reproduces_lq() {
        let lq = DriftCostSpec::linear_quadratic(vec![1.5, 0.5]).unwrap();
        let generic = DriftCostSpec::general(QuarticCost {
            efficiency: vec![1.5, 0.5],
            kappa: 0.0,
            bound: 50.0,
        });
        let p = params2(0.7);
        for z in [[0.3, -1.2], [2.0, 1.0], [0.0, 0.0], [-3.0, 4.0]] {
            let a = best_response(0.0, &[0.0, 0.0], &z, &lq).unwrap();
            let b = best_response(0.0, &[0.0, 0.0], &z, &generic).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
            let ga = generator_g(0.0, &[0.0, 0.0], &z, &p, &lq).unwrap();
            let gb = generator_g(0.0, &[0.0, 0.0], &z, &p, &generic).unwrap();
            assert_abs_diff_eq!(ga, gb, epsilon = 1e-12);
        }
    }

    #[test]
    fn quartic_first_order_condition() {
        let spec = DriftCostSpec::general(QuarticCost {
            efficiency: vec![1.0, 2.0],
            kappa: 0.5,
            bound: 10.0,
        });
        let z = [1.0, -0.75];
        let nu = best_response(0.0, &[0.0, 0.0], &z, &spec).unwrap();
        // k z = nu + kappa nu^3
        assert_abs_diff_eq!(nu[0] + 0.5 * nu[0].powi(3), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(nu[1] + 0.5 * nu[1].powi(3), -1.5, epsilon = 1e-10);
    }

    #[test]
    fn effort_box_is_respected() {
        let spec = DriftCostSpec::general(QuarticCost {
            efficiency: vec![1.0],
            kappa: 0.0,
            bound: 0.25,
        });
        let nu = best_response(0.0, &[0.0], &[3.0], &spec).unwrap();
        assert_eq!(nu, vec![0.25]);
    }

    #[test]
    fn double_well_has_multiple_maximizers() {
        let spec = DriftCostSpec::general(DoubleWellCost {
            efficiency: vec![1.0],
            bound: 3.0,
        });
        let err = best_response(0.0, &[0.0], &[0.0], &spec).unwrap_err();
        assert!(matches!(err, AgencyError::NonConcaveHamiltonian { .. }));
        // A tilt selects a unique maximiser.
        let nu = best_response(0.0, &[0.0], &[0.5], &spec).unwrap();
        assert!(nu[0] > 1.0);
    }

    #[test]
    fn sigma_must_be_invertible() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let err = ModelParams::new(1.0, vec![0.0, 0.0], singular, 1.0, -1.0, vec![0.0, 0.0]).unwrap_err();
        assert!(matches!(err, AgencyError::InvalidParams { ref field, .. } if field == "sigma"));
    }

    #[test]
    fn parameter_validation() {
        let id = DMatrix::identity(2, 2);
        assert!(ModelParams::new(0.0, vec![0.0; 2], id.clone(), 1.0, -1.0, vec![0.0; 2]).is_err());
        assert!(ModelParams::new(1.0, vec![0.0; 2], id.clone(), 1.0, 0.5, vec![0.0; 2]).is_err());
        assert!(ModelParams::new(1.0, vec![0.0; 2], id.clone(), -1.0, -1.0, vec![0.0; 2]).is_err());
        assert!(ModelParams::new(1.0, vec![0.0; 2], id.clone(), 1.0, -1.0, vec![1.5, 0.0]).is_err());
        let p = ModelParams::new(1.0, vec![0.0; 2], id, 2.0, -0.5, vec![0.0; 2]).unwrap();
        assert!(p.clone().with_discount(0.1).is_err());
        assert!(p.clone().with_discount(0.0).is_ok());
        assert_abs_diff_eq!(p.reservation_wage().unwrap(), -(0.5f64).ln() / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.sigma_condition, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn competitive_liquidation() {
        let p = ModelParams::new(1.0, vec![0.0; 2], DMatrix::identity(2, 2), 1.0, -1.0, vec![0.3, 0.6]).unwrap();
        assert_abs_diff_eq!(p.liquidation(0, &[2.0, 1.0]), 1.3 * 2.0 - 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(p.liquidation(1, &[2.0, 1.0]), -0.6 * 2.0 + 1.6, epsilon = 1e-15);
        let g = p.aggregate_liquidation_gradient();
        assert_abs_diff_eq!(g[0], 1.0 + 0.3 - 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 1.0 + 0.6 - 0.3, epsilon = 1e-15);
    }

    #[test]
    fn growth_sanity_lq() {
        let spec = DriftCostSpec::linear_quadratic(vec![1.0, 3.0]).unwrap();
        let p = params2(0.0);
        let samples: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let a = i as f64 * 0.7;
                let r = 10.0 * (i as f64 + 1.0) / 200.0;
                vec![r * a.cos(), r * a.sin()]
            })
            .collect();
        let report = growth_sanity(&samples, &spec, &p, 1.0).unwrap();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        // Independent closed-form ratio |G| / (1 + |z|^2) with G = -(z1^2 + 9 z2^2) / 2.
        let oracle = samples
            .iter()
            .map(|z| (0.5 * (z[0] * z[0] + 9.0 * z[1] * z[1])) / (1.0 + z[0] * z[0] + z[1] * z[1]))
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(report.generator_constant, oracle, epsilon = 1e-12);
        assert!(report.generator_constant <= 4.5);
        let e = report.effort_exponent.unwrap();
        assert!((e - 1.0).abs() < 0.05, "{e}");
    }

    #[test]
    fn policy_sampled_bound() {
        let spec = DriftCostSpec::linear_quadratic(vec![1.0, 2.0]).unwrap();
        let policy = EffortPolicy::best_response(VectorField::Constant(vec![1.0, 1.0]));
        let b = policy.sampled_bound(&spec, 1.0, -1.0, 1.0, 3).unwrap();
        assert_abs_diff_eq!(b, 5f64.sqrt(), epsilon = 1e-14);
    }
}

//! Closed-form solution of the two-principal linear-quadratic model.
//!
//! Drift `b = K nu`, cost `|nu|^2 / 2`, risk-neutral principals with
//! competitive payoffs `l_1 = (1 + g1) x1 - g1 x2`, `l_2 = (1 + g2) x2 - g2 x1`.
//! Equilibrium sensitivities are constant in `(t, x)` and every value
//! function is affine in `x`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{AgencyError, Result};
use crate::model::{DriftCostSpec, ModelParams};

/// Determinant threshold for the adjugate inversions.
pub const DET_THRESHOLD: f64 = 1e-12;
/// Largest accepted `|rho|` for the correlation-built volatility.
pub const MAX_ABS_RHO: f64 = 1.0 - 1e-9;

pub type Mat2 = [[f64; 2]; 2];
pub type Vec2 = [f64; 2];

pub(crate) fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

pub(crate) fn mat_vec(a: &Mat2, v: &Vec2) -> Vec2 {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn dot(a: &Vec2, b: &Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn norm_sq(a: &Vec2) -> f64 {
    dot(a, a)
}

/// Adjugate inverse; `None` when `|det| <= DET_THRESHOLD`.
pub fn inverse2(a: &Mat2) -> Option<Mat2> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if !(det.abs() > DET_THRESHOLD) {
        return None;
    }
    Some([
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ])
}

fn det2(a: &Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

/// Volatility specification for the two-project model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSpec {
    /// `Sigma = [[1, 0], [rho, sqrt(1 - rho^2)]]`.
    Correlation(f64),
    Matrix(Mat2),
}

impl SigmaSpec {
    pub fn matrix(&self) -> Mat2 {
        match *self {
            SigmaSpec::Correlation(rho) => [[1.0, 0.0], [rho, (1.0 - rho * rho).max(0.0).sqrt()]],
            SigmaSpec::Matrix(m) => m,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.matrix() == [[1.0, 0.0], [0.0, 1.0]]
    }
}

/// Parameters of the bi-principal linear-quadratic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LQParams {
    pub k1: f64,
    pub k2: f64,
    pub sigma: SigmaSpec,
    pub gamma1: f64,
    pub gamma2: f64,
    pub risk_aversion: f64,
    pub reservation_utility: f64,
    pub horizon: f64,
    pub x0: Vec2,
}

impl Default for LQParams {
    /// The symmetric instance: unit efficiencies, independent projects, no
    /// appetence, `R_A = 1`, `R0 = -1`, `T = 1`.
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 1.0,
            sigma: SigmaSpec::Correlation(0.0),
            gamma1: 0.0,
            gamma2: 0.0,
            risk_aversion: 1.0,
            reservation_utility: -1.0,
            horizon: 1.0,
            x0: [0.0, 0.0],
        }
    }
}

impl LQParams {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("k1", self.k1), ("k2", self.k2)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(AgencyError::invalid(name, "efficiency must be finite and > 0"));
            }
        }
        match self.sigma {
            SigmaSpec::Correlation(rho) => {
                if !rho.is_finite() || rho.abs() > 1.0 {
                    return Err(AgencyError::invalid("rho", format!("{rho} is outside [-1, 1]")));
                }
                if rho.abs() > MAX_ABS_RHO {
                    return Err(AgencyError::invalid(
                        "rho",
                        format!("|rho| = {} makes the volatility singular", rho.abs()),
                    ));
                }
            }
            SigmaSpec::Matrix(m) => {
                if m.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(AgencyError::invalid("sigma", "entries must be finite"));
                }
                if det2(&m).abs() <= DET_THRESHOLD {
                    return Err(AgencyError::invalid("sigma", "matrix is singular"));
                }
            }
        }
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(AgencyError::invalid(name, format!("{g} is outside [0, 1]")));
            }
        }
        if !(self.risk_aversion >= 0.0 && self.risk_aversion.is_finite()) {
            return Err(AgencyError::invalid("risk_aversion", "must be finite and >= 0"));
        }
        if !(self.reservation_utility < 0.0 && self.reservation_utility.is_finite()) {
            return Err(AgencyError::invalid("reservation_utility", "must be finite and < 0"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(AgencyError::invalid("horizon", "must be finite and > 0"));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(AgencyError::invalid("x0", "entries must be finite"));
        }
        Ok(())
    }

    /// `Gamma = (1 + g1 - g2, 1 + g2 - g1)`.
    pub fn gamma_vector(&self) -> Vec2 {
        [1.0 + self.gamma1 - self.gamma2, 1.0 + self.gamma2 - self.gamma1]
    }

    pub fn k_matrix(&self) -> Mat2 {
        [[self.k1, 0.0], [0.0, self.k2]]
    }

    pub fn sigma_matrix(&self) -> Mat2 {
        self.sigma.matrix()
    }

    /// `Sigma Sigma^T`.
    pub fn covariance(&self) -> Mat2 {
        let s = self.sigma_matrix();
        mat_mul(&s, &transpose(&s))
    }

    /// Gradient of principal `i`'s liquidation payoff (0-based).
    pub fn liquidation_gradient(&self, i: usize) -> Vec2 {
        match i {
            0 => [1.0 + self.gamma1, -self.gamma1],
            _ => [-self.gamma2, 1.0 + self.gamma2],
        }
    }

    /// `r0 = -ln(-R0) / R_A`, undefined when `R_A = 0`.
    pub fn reservation_wage(&self) -> Option<f64> {
        (self.risk_aversion > 0.0).then(|| -(-self.reservation_utility).ln() / self.risk_aversion)
    }

    /// The general-`N` view of these parameters.
    pub fn model_params(&self) -> Result<ModelParams> {
        self.validate()?;
        let s = self.sigma_matrix();
        ModelParams::new(
            self.horizon,
            self.x0.to_vec(),
            DMatrix::from_row_slice(2, 2, &[s[0][0], s[0][1], s[1][0], s[1][1]]),
            self.risk_aversion,
            self.reservation_utility,
            vec![self.gamma1, self.gamma2],
        )
    }

    pub fn drift_cost_spec(&self) -> DriftCostSpec {
        DriftCostSpec::LinearQuadratic {
            efficiency: vec![self.k1, self.k2],
        }
    }
}

/// How the indeterminate equilibrium levels are shared between principals.
///
/// Only `y1 + y2 = r0` and `alpha1 + alpha2 = G` are pinned down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquilibriumSplit {
    pub y_share1: f64,
    pub alpha_share1: f64,
}

impl Default for EquilibriumSplit {
    fn default() -> Self {
        Self {
            y_share1: 0.5,
            alpha_share1: 0.5,
        }
    }
}

/// Every closed-form quantity of the bi-principal model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LQSolution {
    pub gamma: Vec2,
    /// `(I + 2 K^-2 R_A Sigma Sigma^T)^-1`.
    pub m: Mat2,
    /// `(R_A Sigma Sigma^T + K^2)^-1 K^2`.
    pub ma: Mat2,
    /// Competitive equilibrium effort `K M Gamma`.
    pub nu_star: Vec2,
    /// Aggregated-offer effort `K Ma Gamma`.
    pub nu_aggregated: Vec2,
    /// First-best effort `K Gamma`.
    pub nu_first_best: Vec2,
    /// Aggregate sensitivity `M Gamma`.
    pub beta_bar: Vec2,
    pub beta1: Vec2,
    pub beta2: Vec2,
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub delta: f64,
    pub delta_a: f64,
    /// Generator at the equilibrium sensitivity, `G(M Gamma)`.
    pub generator: f64,
    /// Common per-principal drift `G(M Gamma) / 2`.
    pub alpha_rate: f64,
    pub alpha_split: Vec2,
    /// `(y1, y2)` with `y1 + y2 = r0`; absent for a risk-neutral agent.
    pub y_split: Option<Vec2>,
    pub split: EquilibriumSplit,
}

/// Solves the model with the even split of levels.
pub fn solve(params: &LQParams) -> Result<LQSolution> {
    solve_with_split(params, EquilibriumSplit::default())
}

pub fn solve_with_split(params: &LQParams, split: EquilibriumSplit) -> Result<LQSolution> {
    params.validate()?;
    let ra = params.risk_aversion;
    let k = params.k_matrix();
    let k2 = mat_mul(&k, &k);
    let k_inv2 = [[1.0 / (params.k1 * params.k1), 0.0], [0.0, 1.0 / (params.k2 * params.k2)]];
    let cov = params.covariance();
    let sigma = params.sigma_matrix();
    let gamma = params.gamma_vector();

    let k_inv2_cov = mat_mul(&k_inv2, &cov);
    let inner = [
        [1.0 + 2.0 * ra * k_inv2_cov[0][0], 2.0 * ra * k_inv2_cov[0][1]],
        [2.0 * ra * k_inv2_cov[1][0], 1.0 + 2.0 * ra * k_inv2_cov[1][1]],
    ];
    let m = inverse2(&inner).ok_or_else(|| AgencyError::SingularMatrix {
        context: "I + 2 K^-2 R_A Sigma Sigma^T".into(),
        det: det2(&inner),
    })?;
    // (R_A Sigma Sigma^T + K^2)^-1 K^2 = (I + R_A K^-2 Sigma Sigma^T)^-1, which
    // is exactly the identity for a risk-neutral agent.
    let agg = [
        [1.0 + ra * k_inv2_cov[0][0], ra * k_inv2_cov[0][1]],
        [ra * k_inv2_cov[1][0], 1.0 + ra * k_inv2_cov[1][1]],
    ];
    let ma = inverse2(&agg).ok_or_else(|| AgencyError::SingularMatrix {
        context: "R_A Sigma Sigma^T + K^2".into(),
        det: det2(&agg),
    })?;

    let beta_bar = mat_vec(&m, &gamma);
    let nu_star = mat_vec(&k, &beta_bar);
    let za = mat_vec(&ma, &gamma);
    let nu_aggregated = mat_vec(&k, &za);
    let nu_first_best = mat_vec(&k, &gamma);

    let st = transpose(&sigma);
    let risk = norm_sq(&mat_vec(&st, &beta_bar));
    let eff = norm_sq(&nu_star);
    let k2_beta = mat_vec(&k2, &beta_bar);
    let lambda = dot(&gamma, &k2_beta) - 0.5 * ra * risk - 0.5 * eff;
    let lambda_tilde = dot(&gamma, &k2_beta) - 1.25 * ra * risk - 0.75 * eff;
    let delta = 0.5 * ra * risk + 0.5 * eff;
    let delta_a = 0.5 * ra * norm_sq(&mat_vec(&st, &za)) + 0.5 * norm_sq(&nu_aggregated);

    let correction = mat_vec(&k_inv2_cov, &beta_bar);
    let g1 = params.liquidation_gradient(0);
    let g2 = params.liquidation_gradient(1);
    let beta1 = [g1[0] - ra * correction[0], g1[1] - ra * correction[1]];
    let beta2 = [g2[0] - ra * correction[0], g2[1] - ra * correction[1]];

    let generator = 0.5 * ra * risk - 0.5 * eff;
    let alpha_split = [split.alpha_share1 * generator, (1.0 - split.alpha_share1) * generator];
    let y_split = params
        .reservation_wage()
        .map(|r0| [split.y_share1 * r0, (1.0 - split.y_share1) * r0]);

    Ok(LQSolution {
        gamma,
        m,
        ma,
        nu_star,
        nu_aggregated,
        nu_first_best,
        beta_bar,
        beta1,
        beta2,
        lambda,
        lambda_tilde,
        delta,
        delta_a,
        generator,
        alpha_rate: 0.5 * generator,
        alpha_split,
        y_split,
        split,
    })
}

impl LQSolution {
    pub fn beta(&self, i: usize) -> Vec2 {
        if i == 0 {
            self.beta1
        } else {
            self.beta2
        }
    }

    /// Time-slope of principal `i`'s value function for the configured
    /// `alpha` split: `R_A |Sigma^T beta_bar|^2 - alpha_i`. Equals
    /// `lambda_tilde` under the even split.
    pub fn lambda_component(&self, i: usize, params: &LQParams) -> f64 {
        let st = transpose(&params.sigma_matrix());
        params.risk_aversion * norm_sq(&mat_vec(&st, &self.beta_bar)) - self.alpha_split[i.min(1)]
    }
}

/// Aggregated value `V(t, x) = x . Gamma + lambda (T - t)`.
pub fn value_v(t: f64, x: &Vec2, sol: &LQSolution, params: &LQParams) -> f64 {
    dot(x, &sol.gamma) + sol.lambda * (params.horizon - t)
}

/// Principal `i`'s value `v^i(t, x) = lambda_i (T - t) + grad l_i . x`.
pub fn value_vi(i: usize, t: f64, x: &Vec2, sol: &LQSolution, params: &LQParams) -> f64 {
    sol.lambda_component(i, params) * (params.horizon - t) + dot(&params.liquidation_gradient(i), x)
}

/// Residuals of the two principals' HJB equations at `(t, x)`, evaluated
/// with the closed-form derivatives of `v^1, v^2` and the constant
/// equilibrium sensitivities.
pub fn hjb_residuals(_t: f64, _x: &Vec2, sol: &LQSolution, params: &LQParams) -> Vec2 {
    let ra = params.risk_aversion;
    let k = params.k_matrix();
    let k2 = mat_mul(&k, &k);
    let st = transpose(&params.sigma_matrix());
    let bb = [sol.beta1[0] + sol.beta2[0], sol.beta1[1] + sol.beta2[1]];
    let k2bb = mat_vec(&k2, &bb);
    let risk = norm_sq(&mat_vec(&st, &bb));
    let eff = norm_sq(&mat_vec(&k, &bb));
    let mut out = [0.0; 2];
    for i in 0..2 {
        let dt_v = -sol.lambda_component(i, params);
        let grad = params.liquidation_gradient(i);
        // The Hessian of v^i vanishes, so the trace term is zero.
        let other_alpha = sol.alpha_split[1 - i];
        let bracket = dot(&grad, &k2bb) - 0.5 * ra * risk + 0.5 * eff + other_alpha
            - dot(&k2bb, &sol.beta(i));
        out[i] = -dt_v - bracket;
    }
    out
}

/// First-best benchmark: effort `K Gamma` and total deterministic wage
/// `T |K Gamma|^2 / 2 - ln(-R0) / R_A` that binds participation.
pub fn first_best(params: &LQParams) -> Result<(Vec2, f64)> {
    params.validate()?;
    let r0 = params
        .reservation_wage()
        .ok_or_else(|| AgencyError::invalid("risk_aversion", "first best requires R_A > 0"))?;
    let effort = mat_vec(&params.k_matrix(), &params.gamma_vector());
    Ok((effort, params.horizon * 0.5 * norm_sq(&effort) + r0))
}

/// Equilibrium effort by the matrix route and by the explicit rational
/// expressions for the correlated model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffortComparison {
    /// Authoritative `K M Gamma`.
    pub matrix_route: Vec2,
    /// Explicit componentwise rational expressions.
    pub printed_route: Vec2,
    /// Maximum absolute difference between the two routes.
    pub discrepancy: f64,
}

/// Explicit componentwise formula with denominator
/// `2 R_A^2 (rho^2 - 1) - 2 R_A (k1^2 + k2^2) - k1^2 k2^2`.
pub fn printed_effort_formula(k1: f64, k2: f64, rho: f64, gamma1: f64, gamma2: f64, ra: f64) -> Vec2 {
    let g1 = 1.0 + gamma1 - gamma2;
    let g2 = 1.0 + gamma2 - gamma1;
    let den = 2.0 * ra * ra * (rho * rho - 1.0) - 2.0 * ra * (k1 * k1 + k2 * k2) - k1 * k1 * k2 * k2;
    let n1 = 2.0 * ra * k1 * (g2 * k2 * k2 * rho - g1 * k1 * k1) - k1.powi(3) * k2 * k2 * g1;
    let n2 = 2.0 * ra * k2 * (g1 * k1 * k1 * rho - g2 * k2 * k2) - k1 * k1 * k2.powi(3) * g2;
    [n1 / den, n2 / den]
}

/// Compares the matrix-route effort against the explicit formula. Requires
/// the correlation-built volatility.
pub fn effort_components_correlated(params: &LQParams) -> Result<EffortComparison> {
    let rho = match params.sigma {
        SigmaSpec::Correlation(rho) => rho,
        SigmaSpec::Matrix(_) => {
            return Err(AgencyError::invalid("sigma", "the explicit formula needs a correlation parameter"))
        }
    };
    if rho.abs() >= 1.0 {
        return Err(AgencyError::invalid("rho", "|rho| must be < 1"));
    }
    let sol = solve(params)?;
    let printed = printed_effort_formula(params.k1, params.k2, rho, params.gamma1, params.gamma2, params.risk_aversion);
    let discrepancy = (sol.nu_star[0] - printed[0])
        .abs()
        .max((sol.nu_star[1] - printed[1]).abs());
    Ok(EffortComparison {
        matrix_route: sol.nu_star,
        printed_route: printed,
        discrepancy,
    })
}

/// Proportion gap `d(rho) = (g1 - g2) (2 R_A k^3 (1 + rho) + k^5) / (2 R_A k^3 (1 - rho) + k^5)`
/// for equal efficiencies `k`.
pub fn proportion_gap(rho: f64, k: f64, gamma1: f64, gamma2: f64, ra: f64) -> Result<f64> {
    if !(-1.0..1.0).contains(&rho) {
        return Err(AgencyError::invalid("rho", format!("{rho} is outside [-1, 1)")));
    }
    if !(k > 0.0) {
        return Err(AgencyError::invalid("k", "must be > 0"));
    }
    // nu1 + nu2 = 2 k^3 / (k^2 + 2 R_A (1 + rho)).
    let sum_den = k * k + 2.0 * ra * (1.0 + rho);
    if sum_den == 0.0 || !sum_den.is_finite() {
        return Err(AgencyError::Degenerate("total effort nu1 + nu2 vanishes".into()));
    }
    let k3 = k.powi(3);
    let k5 = k.powi(5);
    Ok((gamma1 - gamma2) * (2.0 * ra * k3 * (1.0 + rho) + k5) / (2.0 * ra * k3 * (1.0 - rho) + k5))
}

/// `(nu1 - nu2) / (nu1 + nu2)` from the matrix route.
pub fn proportion_gap_matrix(params: &LQParams) -> Result<f64> {
    let sol = solve(params)?;
    let total = sol.nu_star[0] + sol.nu_star[1];
    if total == 0.0 {
        return Err(AgencyError::Degenerate("total effort nu1 + nu2 vanishes".into()));
    }
    Ok((sol.nu_star[0] - sol.nu_star[1]) / total)
}

/// Outcome of the risk-neutral dominance test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dominance {
    /// `k1 (1 + g1 - g2) > k2 (1 + g2 - g1)`.
    pub works_more_for_1: bool,
    /// `f(x) = (1 + x) / (1 - x)` at `x = g2 - g1`; infinite at `x = 1`.
    pub threshold: f64,
    /// `x = 1`: the agent never works more for principal 1.
    pub degenerate: bool,
}

/// Dominance condition for a risk-neutral agent with `Sigma = I`.
pub fn dominance_condition(params: &LQParams) -> Result<Dominance> {
    params.validate()?;
    if params.risk_aversion != 0.0 {
        return Err(AgencyError::invalid("risk_aversion", "dominance condition requires R_A = 0"));
    }
    if !params.sigma.is_identity() {
        return Err(AgencyError::invalid("sigma", "dominance condition requires Sigma = I"));
    }
    let x = params.gamma2 - params.gamma1;
    let lhs = params.k1 * (1.0 + params.gamma1 - params.gamma2);
    let rhs = params.k2 * (1.0 + params.gamma2 - params.gamma1);
    if x >= 1.0 {
        return Ok(Dominance {
            works_more_for_1: false,
            threshold: f64::INFINITY,
            degenerate: true,
        });
    }
    Ok(Dominance {
        works_more_for_1: lhs > rhs,
        threshold: (1.0 + x) / (1.0 - x),
        degenerate: false,
    })
}

/// Flat record with frozen column names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LQRecord {
    pub m11: f64,
    pub m12: f64,
    pub m21: f64,
    pub m22: f64,
    pub ma11: f64,
    pub ma12: f64,
    pub ma21: f64,
    pub ma22: f64,
    pub nu1: f64,
    pub nu2: f64,
    pub nua1: f64,
    pub nua2: f64,
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub delta: f64,
    pub delta_a: f64,
    pub beta1_1: f64,
    pub beta1_2: f64,
    pub beta2_1: f64,
    pub beta2_2: f64,
}

impl LQRecord {
    pub const COLUMNS: [&'static str; 20] = [
        "m11", "m12", "m21", "m22", "ma11", "ma12", "ma21", "ma22", "nu1", "nu2", "nua1", "nua2",
        "lambda", "lambda_tilde", "delta", "delta_a", "beta1_1", "beta1_2", "beta2_1", "beta2_2",
    ];

    pub fn values(&self) -> [f64; 20] {
        [
            self.m11, self.m12, self.m21, self.m22, self.ma11, self.ma12, self.ma21, self.ma22,
            self.nu1, self.nu2, self.nua1, self.nua2, self.lambda, self.lambda_tilde, self.delta,
            self.delta_a, self.beta1_1, self.beta1_2, self.beta2_1, self.beta2_2,
        ]
    }
}

impl From<&LQSolution> for LQRecord {
    fn from(s: &LQSolution) -> Self {
        Self {
            m11: s.m[0][0],
            m12: s.m[0][1],
            m21: s.m[1][0],
            m22: s.m[1][1],
            ma11: s.ma[0][0],
            ma12: s.ma[0][1],
            ma21: s.ma[1][0],
            ma22: s.ma[1][1],
            nu1: s.nu_star[0],
            nu2: s.nu_star[1],
            nua1: s.nu_aggregated[0],
            nua2: s.nu_aggregated[1],
            lambda: s.lambda,
            lambda_tilde: s.lambda_tilde,
            delta: s.delta,
            delta_a: s.delta_a,
            beta1_1: s.beta1[0],
            beta1_2: s.beta1[1],
            beta2_1: s.beta2[0],
            beta2_2: s.beta2[1],
        }
    }
}

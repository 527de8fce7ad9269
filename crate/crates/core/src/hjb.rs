//! Finite-difference solver for risk-neutral principals.
//!
//! The construction runs in four stages:
//!
//! 1. invert `Id + Phi(t, x, .)` pointwise, giving `phi`;
//! 2. solve the aggregated semilinear equation
//!    `dV/dt + 1/2 Tr(Sigma Sigma^T D^2 V) + H(t, x, grad V) = 0`, `V(T) = sum_i l_i`;
//! 3. solve `N` heat equations with source `H(t, x, grad V) / N` and terminal `l_i`;
//! 4. set `beta_bar = phi(grad V)` and `beta^i = grad u^i - Phi(beta_bar) / N`.
//!
//! Space uses second-order central differences on a uniform box, time uses
//! explicit Euler (default) or a semi-implicit step with implicit diffusion.
//! Boundary nodes are filled by linear extrapolation along each axis, which
//! reproduces affine functions exactly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{AgencyError, Result};
use crate::model::{
    best_response, best_response_into, generator_g, hamiltonian_hessian, Feedback, ModelParams,
    DriftCostSpec, ScalarFeedback,
};

/// Determinant threshold for `M_beta` and for the closed-form `phi`.
pub const DET_THRESHOLD: f64 = 1e-12;
/// Newton residual tolerance for `phi`.
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;
/// Nodal magnitude treated as blow-up.
pub const BLOWUP_LIMIT: f64 = 1e12;
/// Largest supported state dimension.
pub const MAX_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    Explicit,
    SemiImplicit,
}

/// Uniform space-time grid on `[lo, hi]^N x [0, T]`.
#[derive(Debug, Clone, Serialize)]
pub struct Grid {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub n_x: usize,
    pub n_t: usize,
    pub horizon: f64,
    pub h: f64,
    pub dt: f64,
    pub scheme: TimeScheme,
}

impl Grid {
    pub fn new(
        params: &ModelParams,
        lo: f64,
        hi: f64,
        n_x: usize,
        n_t: usize,
        scheme: TimeScheme,
    ) -> Result<Self> {
        let dim = params.dim();
        if dim > MAX_DIM {
            return Err(AgencyError::invalid("grid", format!("dimension {dim} exceeds the supported {MAX_DIM}")));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(AgencyError::invalid("grid.lo/hi", "need finite lo < hi"));
        }
        if n_x < 5 {
            return Err(AgencyError::invalid("grid.n_x", "at least 5 points per axis are required"));
        }
        if n_t == 0 {
            return Err(AgencyError::invalid("grid.n_t", "must be >= 1"));
        }
        let h = (hi - lo) / (n_x - 1) as f64;
        let dt = params.horizon / n_t as f64;
        let lam = params.max_covariance_eigenvalue();
        if scheme == TimeScheme::Explicit {
            let bound = Self::stable_dt(h, dim, lam);
            if dt > bound * (1.0 + 1e-12) {
                return Err(AgencyError::invalid(
                    "grid.n_t",
                    format!("explicit scheme needs dt <= {bound:e}, got {dt:e}"),
                ));
            }
        }
        let margin = 3.0 * (params.horizon * lam).sqrt();
        for (i, x) in params.x0.iter().enumerate() {
            if x - lo < margin || hi - x < margin {
                return Err(AgencyError::invalid(
                    "grid.lo/hi",
                    format!("x0[{i}] = {x} is closer than {margin} to the boundary"),
                ));
            }
        }
        Ok(Self {
            dim,
            lo,
            hi,
            n_x,
            n_t,
            horizon: params.horizon,
            h,
            dt,
            scheme,
        })
    }

    /// Grid with the fewest time steps allowed by the explicit stability bound.
    pub fn with_stable_steps(
        params: &ModelParams,
        lo: f64,
        hi: f64,
        n_x: usize,
        scheme: TimeScheme,
    ) -> Result<Self> {
        let h = (hi - lo) / (n_x.max(2) - 1) as f64;
        let bound = Self::stable_dt(h, params.dim(), params.max_covariance_eigenvalue());
        let n_t = ((params.horizon / bound) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self::new(params, lo, hi, n_x, n_t, scheme)
    }

    /// `h^2 / (2 N lambda_max(Sigma Sigma^T))`.
    pub fn stable_dt(h: f64, dim: usize, max_eig: f64) -> f64 {
        h * h / (2.0 * dim as f64 * max_eig)
    }

    pub fn node_count(&self) -> usize {
        self.n_x.pow(self.dim as u32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.n_x.pow(axis as u32)
    }

    pub fn axis_index(&self, node: usize, axis: usize) -> usize {
        (node / self.stride(axis)) % self.n_x
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        if i + 1 == self.n_x {
            self.hi
        } else {
            self.lo + i as f64 * self.h
        }
    }

    pub fn node_coords(&self, node: usize, out: &mut [f64]) {
        for (axis, o) in out.iter_mut().enumerate() {
            *o = self.coordinate(self.axis_index(node, axis));
        }
    }

    pub fn is_interior(&self, node: usize) -> bool {
        (0..self.dim).all(|a| {
            let i = self.axis_index(node, a);
            i > 0 && i + 1 < self.n_x
        })
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&p| self.is_interior(p)).collect()
    }

    pub fn time(&self, step: usize) -> f64 {
        if step == self.n_t {
            self.horizon
        } else {
            step as f64 * self.dt
        }
    }

    /// Distance (in grid steps) from the nearest face.
    pub fn depth(&self, node: usize) -> usize {
        (0..self.dim)
            .map(|a| {
                let i = self.axis_index(node, a);
                i.min(self.n_x - 1 - i)
            })
            .min()
            .unwrap_or(0)
    }

    /// Fills boundary nodes by linear extrapolation along each axis in turn.
    pub fn extrapolate_boundary(&self, u: &mut [f64]) {
        let n = self.n_x;
        for axis in 0..self.dim {
            let s = self.stride(axis);
            for p in 0..u.len() {
                let i = self.axis_index(p, axis);
                if i == 0 {
                    u[p] = 2.0 * u[p + s] - u[p + 2 * s];
                } else if i == n - 1 {
                    u[p] = 2.0 * u[p - s] - u[p - 2 * s];
                }
            }
        }
    }

    fn first_derivative(&self, u: &[f64], p: usize, axis: usize) -> f64 {
        let s = self.stride(axis);
        let i = self.axis_index(p, axis);
        if i == 0 {
            (-3.0 * u[p] + 4.0 * u[p + s] - u[p + 2 * s]) / (2.0 * self.h)
        } else if i == self.n_x - 1 {
            (3.0 * u[p] - 4.0 * u[p - s] + u[p - 2 * s]) / (2.0 * self.h)
        } else {
            (u[p + s] - u[p - s]) / (2.0 * self.h)
        }
    }

    /// Second-order gradient at any node (one-sided on faces).
    pub fn gradient(&self, u: &[f64], p: usize, out: &mut [f64]) {
        for (axis, o) in out.iter_mut().enumerate() {
            *o = self.first_derivative(u, p, axis);
        }
    }

    /// `1/2 Tr(A D^2 u)` at an interior node.
    fn diffusion(&self, u: &[f64], p: usize, cov: &[f64]) -> f64 {
        let d = self.dim;
        let h2 = self.h * self.h;
        let mut acc = 0.0;
        for a in 0..d {
            let sa = self.stride(a);
            acc += cov[a * d + a] * (u[p + sa] - 2.0 * u[p] + u[p - sa]) / h2;
            for b in (a + 1)..d {
                let sb = self.stride(b);
                let cross = (u[p + sa + sb] - u[p + sa - sb] - u[p - sa + sb] + u[p - sa - sb]) / (4.0 * h2);
                acc += 2.0 * cov[a * d + b] * cross;
            }
        }
        0.5 * acc
    }
}

/// Terminal payoff of a backward solve.
#[derive(Clone)]
pub enum Terminal {
    Affine { gradient: Vec<f64>, offset: f64 },
    Smooth(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Terminal::Affine { gradient, offset } => f
                .debug_struct("Affine")
                .field("gradient", gradient)
                .field("offset", offset)
                .finish(),
            Terminal::Smooth(_) => f.write_str("Smooth"),
        }
    }
}

impl Terminal {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Terminal::Affine { gradient, offset } => {
                offset + gradient.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            }
            Terminal::Smooth(f) => f(x),
        }
    }

    /// Competitive liquidation payoffs `l_i` of the model.
    pub fn competitive(params: &ModelParams) -> Vec<Terminal> {
        (0..params.dim())
            .map(|i| Terminal::Affine {
                gradient: params.liquidation_gradient(i),
                offset: 0.0,
            })
            .collect()
    }

    /// `sum_i l_i`, kept affine when every part is affine.
    pub fn sum(parts: &[Terminal]) -> Terminal {
        let all_affine = parts.iter().all(|t| matches!(t, Terminal::Affine { .. }));
        if all_affine && !parts.is_empty() {
            let n = match &parts[0] {
                Terminal::Affine { gradient, .. } => gradient.len(),
                Terminal::Smooth(_) => unreachable!(),
            };
            let mut g = vec![0.0; n];
            let mut off = 0.0;
            for p in parts {
                if let Terminal::Affine { gradient, offset } = p {
                    for (a, b) in g.iter_mut().zip(gradient) {
                        *a += b;
                    }
                    off += offset;
                }
            }
            return Terminal::Affine { gradient: g, offset: off };
        }
        let parts = parts.to_vec();
        Terminal::Smooth(Arc::new(move |x| parts.iter().map(|p| p.eval(x)).sum()))
    }

    fn layer(&self, grid: &Grid) -> Vec<f64> {
        let mut x = vec![0.0; grid.dim];
        (0..grid.node_count())
            .map(|p| {
                grid.node_coords(p, &mut x);
                self.eval(&x)
            })
            .collect()
    }
}

/// `Phi`, its inverse `phi` and the aggregated Hamiltonian `H` for a model.
///
/// `Phi(beta) = N M_beta^-1 (grad_z G(beta) + b(nu*(beta)))` with
/// `M_beta = grad_nu b . grad_z nu*`. By the envelope theorem
/// `grad_z G + b = R_A Sigma Sigma^T beta`.
#[derive(Debug, Clone)]
pub struct AggregateHamiltonian {
    params: ModelParams,
    spec: DriftCostSpec,
    cov: DMatrix<f64>,
    /// `(I + N K^-2 R_A Sigma Sigma^T)^-1` for the LQ model.
    lq_phi: Option<DMatrix<f64>>,
}

impl AggregateHamiltonian {
    pub fn new(params: &ModelParams, spec: &DriftCostSpec) -> Result<Self> {
        let cov = params.covariance();
        let lq_phi = match spec {
            DriftCostSpec::LinearQuadratic { efficiency } => {
                if efficiency.len() != params.dim() {
                    return Err(AgencyError::invalid("efficiency", "length must match the dimension"));
                }
                let n = params.dim();
                let mut a: DMatrix<f64> = DMatrix::identity(n, n);
                for i in 0..n {
                    for j in 0..n {
                        a[(i, j)] += n as f64 * params.risk_aversion * cov[(i, j)] / (efficiency[i] * efficiency[i]);
                    }
                }
                let det = a.determinant();
                if det.abs() <= DET_THRESHOLD {
                    return Err(AgencyError::SingularMatrix {
                        context: "I + N K^-2 R_A Sigma Sigma^T".into(),
                        det,
                    });
                }
                Some(a.try_inverse().ok_or(AgencyError::SingularMatrix {
                    context: "I + N K^-2 R_A Sigma Sigma^T".into(),
                    det,
                })?)
            }
            DriftCostSpec::General(_) => None,
        };
        Ok(Self {
            params: params.clone(),
            spec: spec.clone(),
            cov,
            lq_phi,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn spec(&self) -> &DriftCostSpec {
        &self.spec
    }

    fn n(&self) -> f64 {
        self.params.dim() as f64
    }

    fn risk_term(&self, beta: &[f64]) -> DVector<f64> {
        &self.cov * DVector::from_column_slice(beta) * self.params.risk_aversion
    }

    /// `Phi(t, x, beta_bar)`; closed form `N K^-2 R_A Sigma Sigma^T beta_bar` for LQ.
    pub fn phi(&self, t: f64, x: &[f64], beta_bar: &[f64]) -> Result<Vec<f64>> {
        match &self.spec {
            DriftCostSpec::LinearQuadratic { efficiency } => {
                let r = self.risk_term(beta_bar);
                Ok((0..beta_bar.len())
                    .map(|i| self.n() * r[i] / (efficiency[i] * efficiency[i]))
                    .collect())
            }
            DriftCostSpec::General(_) => self.phi_via_jacobians(t, x, beta_bar),
        }
    }

    /// `M_beta = diag(db/dnu) grad_z nu*` by implicit differentiation of the
    /// agent's first-order condition; saturated effort coordinates do not move.
    pub fn m_beta(&self, t: f64, x: &[f64], beta_bar: &[f64]) -> Result<DMatrix<f64>> {
        let n = beta_bar.len();
        let nu = best_response(t, x, beta_bar, &self.spec)?;
        let slopes = self.spec.drift_slopes(t, x, &nu);
        let hess = match &self.spec {
            DriftCostSpec::LinearQuadratic { .. } => -DMatrix::identity(n, n),
            DriftCostSpec::General(m) => hamiltonian_hessian(m.as_ref(), t, x, beta_bar, &nu),
        };
        let free: Vec<usize> = match &self.spec {
            DriftCostSpec::LinearQuadratic { .. } => (0..n).collect(),
            DriftCostSpec::General(m) => {
                let (lo, hi) = m.effort_bounds();
                (0..n).filter(|&i| nu[i] > lo + 1e-12 && nu[i] < hi - 1e-12).collect()
            }
        };
        let mut jac = DMatrix::zeros(n, n);
        if !free.is_empty() {
            let neg = DMatrix::from_fn(free.len(), free.len(), |a, b| -hess[(free[a], free[b])]);
            let inv = neg.try_inverse().ok_or_else(|| AgencyError::SingularMBeta {
                beta_bar: beta_bar.to_vec(),
                det: 0.0,
            })?;
            // grad_z nu*_free = (-H_ff)^-1 diag(slopes)_free
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    jac[(i, j)] = inv[(a, b)] * slopes[j];
                }
            }
        }
        let mut m = jac;
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] *= slopes[i];
            }
        }
        Ok(m)
    }

    /// `Phi` assembled from `M_beta` regardless of the model's closed form.
    pub fn phi_via_jacobians(&self, t: f64, x: &[f64], beta_bar: &[f64]) -> Result<Vec<f64>> {
        let m = self.m_beta(t, x, beta_bar)?;
        let det = m.determinant();
        if !(det.abs() > DET_THRESHOLD) {
            return Err(AgencyError::SingularMBeta {
                beta_bar: beta_bar.to_vec(),
                det,
            });
        }
        let rhs = self.risk_term(beta_bar);
        let sol = m.lu().solve(&rhs).ok_or_else(|| AgencyError::SingularMBeta {
            beta_bar: beta_bar.to_vec(),
            det,
        })?;
        Ok(sol.iter().map(|v| self.n() * v).collect())
    }

    /// `phi(t, x, z)`: the `beta_bar` with `beta_bar + Phi(beta_bar) = z`.
    pub fn phi_inverse(&self, t: f64, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if let Some(mphi) = &self.lq_phi {
            let v = mphi * DVector::from_column_slice(z);
            return Ok(v.iter().cloned().collect());
        }
        self.phi_inverse_newton(t, x, z)
    }

    fn residual(&self, t: f64, x: &[f64], beta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let p = self.phi(t, x, beta)?;
        Ok(beta.iter().zip(&p).zip(z).map(|((b, f), z)| b + f - z).collect())
    }

    /// Damped Newton from `beta_bar = z` with a finite-difference Jacobian.
    pub fn phi_inverse_newton(&self, t: f64, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let n = z.len();
        let scale = z.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let tol = NEWTON_TOL * scale;
        let fail = |iterations: usize, residual: f64, reason: String| AgencyError::NoConvergence {
            iterations,
            residual,
            reason,
        };
        let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, a| m.max(a.abs()));
        let mut beta = z.to_vec();
        let mut res = self
            .residual(t, x, &beta, z)
            .map_err(|e| fail(0, f64::NAN, e.to_string()))?;
        let mut rn = inf(&res);
        for it in 0..NEWTON_MAX_ITER {
            if rn <= tol {
                return Ok(beta);
            }
            let mut jac = DMatrix::zeros(n, n);
            let mut probe = beta.clone();
            for j in 0..n {
                let h = 1e-6 * (1.0 + beta[j].abs());
                probe[j] = beta[j] + h;
                let up = self.residual(t, x, &probe, z).map_err(|e| fail(it, rn, e.to_string()))?;
                probe[j] = beta[j] - h;
                let dn = self.residual(t, x, &probe, z).map_err(|e| fail(it, rn, e.to_string()))?;
                probe[j] = beta[j];
                for i in 0..n {
                    jac[(i, j)] = (up[i] - dn[i]) / (2.0 * h);
                }
            }
            let step = jac
                .lu()
                .solve(&DVector::from_column_slice(&res))
                .ok_or_else(|| fail(it, rn, "singular Jacobian of Id + Phi".into()))?;
            let mut damping = 1.0;
            let mut improved = false;
            for _ in 0..40 {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b - damping * s).collect();
                if let Ok(r) = self.residual(t, x, &trial, z) {
                    let tn = inf(&r);
                    if tn < rn {
                        beta = trial;
                        res = r;
                        rn = tn;
                        improved = true;
                        break;
                    }
                }
                damping *= 0.5;
            }
            if !improved {
                return Err(fail(it, rn, "line search could not reduce the residual".into()));
            }
        }
        if rn <= tol {
            return Ok(beta);
        }
        Err(fail(NEWTON_MAX_ITER, rn, "iteration limit reached".into()))
    }

    /// `H(t, x, z) = (z - phi(z)) . b(nu*(phi(z))) - G(phi(z))`.
    pub fn hamiltonian(&self, t: f64, x: &[f64], z: &[f64]) -> Result<f64> {
        let beta = self.phi_inverse(t, x, z)?;
        self.hamiltonian_at(t, x, z, &beta)
    }

    fn hamiltonian_at(&self, t: f64, x: &[f64], z: &[f64], beta: &[f64]) -> Result<f64> {
        let n = z.len();
        let mut nu = vec![0.0; n];
        best_response_into(t, x, beta, &self.spec, &mut nu)?;
        let b = self.spec.drift(t, x, &nu);
        let g = generator_g(t, x, beta, &self.params, &self.spec)?;
        Ok(z.iter().zip(beta).zip(&b).map(|((z, p), b)| (z - p) * b).sum::<f64>() - g)
    }
}

/// Module-level form of [`AggregateHamiltonian::phi`].
pub fn phi(t: f64, x: &[f64], beta_bar: &[f64], spec: &DriftCostSpec, params: &ModelParams) -> Result<Vec<f64>> {
    AggregateHamiltonian::new(params, spec)?.phi(t, x, beta_bar)
}

/// Module-level form of [`AggregateHamiltonian::phi_inverse`].
pub fn phi_inverse(t: f64, x: &[f64], z: &[f64], spec: &DriftCostSpec, params: &ModelParams) -> Result<Vec<f64>> {
    AggregateHamiltonian::new(params, spec)?.phi_inverse(t, x, z)
}

/// Module-level form of [`AggregateHamiltonian::hamiltonian`].
pub fn hamiltonian_h(t: f64, x: &[f64], z: &[f64], spec: &DriftCostSpec, params: &ModelParams) -> Result<f64> {
    AggregateHamiltonian::new(params, spec)?.hamiltonian(t, x, z)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveOptions {
    /// Keep every `save_every`-th time layer (plus `t = 0` and `t = T`).
    pub save_every: usize,
    /// Relative tolerance of the implicit diffusion solves.
    pub linear_tol: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            save_every: 1,
            linear_tol: 1e-13,
        }
    }
}

impl SolveOptions {
    /// Stride keeping at most `layers + 1` time layers.
    pub fn with_layers(grid: &Grid, layers: usize) -> Self {
        Self {
            save_every: grid.n_t.div_ceil(layers.max(1)).max(1),
            ..Self::default()
        }
    }
}

/// Solution of the aggregated equation.
#[derive(Debug, Clone)]
pub struct AggregatedSolution {
    /// Step indices of the stored layers, increasing.
    pub steps: Vec<usize>,
    pub layers: Vec<Vec<f64>>,
    /// `H(t_{n+1}, x, grad V^{n+1})` on interior nodes for every step `n`.
    pub sources: Vec<Vec<f64>>,
    /// Max interior residual of the continuous equation on stored layers.
    pub pde_residual: f64,
}

impl AggregatedSolution {
    pub fn initial(&self) -> &[f64] {
        &self.layers[0]
    }
}

fn stored_steps(grid: &Grid, save_every: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..=grid.n_t).filter(|n| n % save_every == 0).collect();
    if *s.last().unwrap() != grid.n_t {
        s.push(grid.n_t);
    }
    s
}

struct Stepper<'a> {
    grid: &'a Grid,
    cov: Vec<f64>,
    interior: Vec<usize>,
    options: SolveOptions,
}

impl<'a> Stepper<'a> {
    fn new(grid: &'a Grid, params: &ModelParams, options: SolveOptions) -> Self {
        let c = params.covariance();
        let d = grid.dim;
        Self {
            grid,
            cov: (0..d * d).map(|k| c[(k / d, k % d)]).collect(),
            interior: grid.interior_nodes(),
            options,
        }
    }

    /// Advances `u` from `t_{n+1}` to `t_n` given the interior source.
    fn step(&self, u: &[f64], source: &[f64]) -> Result<Vec<f64>> {
        let dt = self.grid.dt;
        match self.grid.scheme {
            TimeScheme::Explicit => {
                let vals: Vec<f64> = self
                    .interior
                    .par_iter()
                    .zip(source.par_iter())
                    .map(|(&p, s)| u[p] + dt * (self.grid.diffusion(u, p, &self.cov) + s))
                    .collect();
                let mut next = u.to_vec();
                for (&p, v) in self.interior.iter().zip(vals) {
                    next[p] = v;
                }
                self.grid.extrapolate_boundary(&mut next);
                Ok(next)
            }
            TimeScheme::SemiImplicit => {
                let rhs: Vec<f64> = self.interior.iter().zip(source).map(|(&p, s)| u[p] + dt * s).collect();
                let guess: Vec<f64> = self.interior.iter().map(|&p| u[p]).collect();
                let sol = self.implicit_solve(&rhs, guess)?;
                let mut next = u.to_vec();
                for (&p, v) in self.interior.iter().zip(sol) {
                    next[p] = v;
                }
                self.grid.extrapolate_boundary(&mut next);
                Ok(next)
            }
        }
    }

    /// `(I - dt/2 Tr(A D^2)) u` on interior unknowns with extrapolated boundary.
    fn implicit_apply(&self, interior_vals: &[f64], full: &mut [f64], out: &mut [f64]) {
        for (&p, v) in self.interior.iter().zip(interior_vals) {
            full[p] = *v;
        }
        self.grid.extrapolate_boundary(full);
        let dt = self.grid.dt;
        let full_ref: &[f64] = full;
        out.par_iter_mut()
            .zip(self.interior.par_iter())
            .for_each(|(o, &p)| *o = full_ref[p] - dt * self.grid.diffusion(full_ref, p, &self.cov));
    }

    /// BiCGSTAB for the implicit diffusion system.
    fn implicit_solve(&self, rhs: &[f64], mut x: Vec<f64>) -> Result<Vec<f64>> {
        let m = rhs.len();
        let mut full = vec![0.0; self.grid.node_count()];
        let mut ax = vec![0.0; m];
        self.implicit_apply(&x, &mut full, &mut ax);
        let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let r_hat = r.clone();
        let bnorm = dotp(rhs, rhs).sqrt().max(1e-300);
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut v = vec![0.0; m];
        let mut p = vec![0.0; m];
        let mut s = vec![0.0; m];
        let mut t = vec![0.0; m];
        for _ in 0..1000 {
            if dotp(&r, &r).sqrt() <= self.options.linear_tol * bnorm {
                return Ok(x);
            }
            let rho_new = dotp(&r_hat, &r);
            if rho_new == 0.0 {
                break;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..m {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            self.implicit_apply(&p, &mut full, &mut v);
            alpha = rho / dotp(&r_hat, &v);
            for i in 0..m {
                s[i] = r[i] - alpha * v[i];
            }
            if dotp(&s, &s).sqrt() <= self.options.linear_tol * bnorm {
                for i in 0..m {
                    x[i] += alpha * p[i];
                }
                return Ok(x);
            }
            self.implicit_apply(&s, &mut full, &mut t);
            let tt = dotp(&t, &t);
            omega = if tt > 0.0 { dotp(&t, &s) / tt } else { 0.0 };
            for i in 0..m {
                x[i] += alpha * p[i] + omega * s[i];
                r[i] = s[i] - omega * t[i];
            }
            if omega == 0.0 {
                break;
            }
        }
        let res = dotp(&r, &r).sqrt() / bnorm;
        if res <= 1e3 * self.options.linear_tol {
            return Ok(x);
        }
        Err(AgencyError::Unstable {
            step: 0,
            max_abs: res,
        })
    }
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_blowup(u: &[f64], step: usize) -> Result<()> {
    let max_abs = u.iter().fold(0.0_f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    if max_abs > BLOWUP_LIMIT {
        return Err(AgencyError::Unstable { step, max_abs });
    }
    Ok(())
}

/// `H(t, x, grad u)` at every interior node.
fn hamiltonian_field(
    grid: &Grid,
    interior: &[usize],
    ham: &AggregateHamiltonian,
    t: f64,
    u: &[f64],
    analytic_grad: Option<&[f64]>,
) -> Result<Vec<f64>> {
    interior
        .par_iter()
        .map_init(
            || (vec![0.0; grid.dim], vec![0.0; grid.dim]),
            |(x, g), &p| {
                grid.node_coords(p, x);
                match analytic_grad {
                    Some(a) => g.copy_from_slice(a),
                    None => grid.gradient(u, p, g),
                }
                ham.hamiltonian(t, x, g)
            },
        )
        .collect()
}

/// Backward sweep for `V`, optionally advancing the component equations in
/// lockstep so that the source field need not be retained.
fn sweep(
    grid: &Grid,
    ham: &AggregateHamiltonian,
    terminal: &Terminal,
    components: Option<&[Terminal]>,
    options: SolveOptions,
    retain_sources: bool,
) -> Result<(AggregatedSolution, Vec<Vec<Vec<f64>>>)> {
    let stepper = Stepper::new(grid, ham.params(), options);
    let steps = stored_steps(grid, options.save_every.max(1));
    let mut v = terminal.layer(grid);
    let mut comps: Vec<Vec<f64>> = components
        .map(|c| c.iter().map(|t| t.layer(grid)).collect())
        .unwrap_or_default();
    let n_comp = comps.len().max(1) as f64;
    let mut v_layers = vec![Vec::new(); steps.len()];
    let mut c_layers = vec![vec![Vec::new(); steps.len()]; comps.len()];
    let mut slot = steps.len() - 1;
    v_layers[slot] = v.clone();
    for (k, c) in comps.iter().enumerate() {
        c_layers[k][slot] = c.clone();
    }
    let mut sources = if retain_sources { vec![Vec::new(); grid.n_t] } else { Vec::new() };
    let terminal_grad = match terminal {
        Terminal::Affine { gradient, .. } => Some(gradient.clone()),
        Terminal::Smooth(_) => None,
    };
    let mut pde_residual: f64 = 0.0;
    for n in (0..grid.n_t).rev() {
        let t_next = grid.time(n + 1);
        let grad = if n + 1 == grid.n_t { terminal_grad.as_deref() } else { None };
        let source = hamiltonian_field(grid, &stepper.interior, ham, t_next, &v, grad)?;
        let v_new = stepper.step(&v, &source)?;
        check_blowup(&v_new, n)?;
        if !comps.is_empty() {
            let scaled: Vec<f64> = source.iter().map(|s| s / n_comp).collect();
            let advanced: Result<Vec<Vec<f64>>> = comps.par_iter().map(|c| stepper.step(c, &scaled)).collect();
            comps = advanced?;
            for c in &comps {
                check_blowup(c, n)?;
            }
        }
        if slot > 0 && steps[slot - 1] == n {
            slot -= 1;
            // Residual of the continuous equation on the new layer.
            let h_new = hamiltonian_field(grid, &stepper.interior, ham, grid.time(n), &v_new, None)?;
            for (k, &p) in stepper.interior.iter().enumerate() {
                let r = (v[p] - v_new[p]) / grid.dt + grid.diffusion(&v_new, p, &stepper.cov) + h_new[k];
                pde_residual = pde_residual.max(r.abs());
            }
            v_layers[slot] = v_new.clone();
            for (k, c) in comps.iter().enumerate() {
                c_layers[k][slot] = c.clone();
            }
        }
        if retain_sources {
            sources[n] = source;
        }
        v = v_new;
    }
    Ok((
        AggregatedSolution {
            steps,
            layers: v_layers,
            sources,
            pde_residual,
        },
        c_layers,
    ))
}

/// Solves the aggregated equation and retains the source field for
/// [`solve_components`].
pub fn solve_aggregated(
    grid: &Grid,
    spec: &DriftCostSpec,
    params: &ModelParams,
    terminal: &Terminal,
    options: SolveOptions,
) -> Result<AggregatedSolution> {
    let ham = AggregateHamiltonian::new(params, spec)?;
    Ok(sweep(grid, &ham, terminal, None, options, true)?.0)
}

/// Solves the `N` heat equations with the cached source `H / N`; returns
/// `[component][stored layer][node]`.
pub fn solve_components(
    grid: &Grid,
    params: &ModelParams,
    aggregated: &AggregatedSolution,
    terminals: &[Terminal],
    options: SolveOptions,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if aggregated.sources.len() != grid.n_t {
        return Err(AgencyError::invalid("aggregated", "source field was not retained"));
    }
    let stepper = Stepper::new(grid, params, options);
    let n_comp = terminals.len() as f64;
    terminals
        .par_iter()
        .map(|term| {
            let mut u = term.layer(grid);
            let mut layers = vec![Vec::new(); aggregated.steps.len()];
            let mut slot = layers.len() - 1;
            layers[slot] = u.clone();
            for n in (0..grid.n_t).rev() {
                let scaled: Vec<f64> = aggregated.sources[n].iter().map(|s| s / n_comp).collect();
                u = stepper.step(&u, &scaled)?;
                check_blowup(&u, n)?;
                if slot > 0 && aggregated.steps[slot - 1] == n {
                    slot -= 1;
                    layers[slot] = u.clone();
                }
            }
            Ok(layers)
        })
        .collect()
}

/// Equilibrium sensitivity fields on the stored layers.
#[derive(Debug, Clone)]
pub struct BetaFields {
    /// `[layer][node * N + axis]`.
    pub grad_v: Vec<Vec<f64>>,
    pub beta_bar: Vec<Vec<f64>>,
    /// `[component][layer][node * N + axis]`.
    pub beta: Vec<Vec<Vec<f64>>>,
    /// `max |beta^i - grad u^i + Phi(beta_bar) / N|` over all nodes.
    pub foc_residual: f64,
    /// `max |beta_bar - sum_i beta^i|` over interior nodes.
    pub sum_residual: f64,
}

/// `beta_bar = phi(grad V)` and `beta^i = grad u^i - Phi(beta_bar) / N` on
/// every stored layer.
pub fn construct_betas(
    grid: &Grid,
    times: &[f64],
    v_layers: &[Vec<f64>],
    u_tilde: &[Vec<Vec<f64>>],
    spec: &DriftCostSpec,
    params: &ModelParams,
) -> Result<BetaFields> {
    let ham = AggregateHamiltonian::new(params, spec)?;
    let d = grid.dim;
    let n_comp = u_tilde.len();
    let nodes = grid.node_count();
    let per_layer: Vec<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>, f64, f64)> = (0..v_layers.len())
        .into_par_iter()
        .map(|l| -> Result<_> {
            let t = times[l];
            let v = &v_layers[l];
            let mut grad_v = vec![0.0; nodes * d];
            let mut beta_bar = vec![0.0; nodes * d];
            let mut beta = vec![vec![0.0; nodes * d]; n_comp];
            let mut foc: f64 = 0.0;
            let mut sum_res: f64 = 0.0;
            let mut x = vec![0.0; d];
            let mut gu = vec![0.0; d];
            for p in 0..nodes {
                grid.node_coords(p, &mut x);
                let gv = &mut grad_v[p * d..(p + 1) * d];
                grid.gradient(v, p, gv);
                let bb = ham.phi_inverse(t, &x, gv)?;
                let phi_bb = ham.phi(t, &x, &bb)?;
                beta_bar[p * d..(p + 1) * d].copy_from_slice(&bb);
                let mut total = vec![0.0; d];
                for (i, b) in beta.iter_mut().enumerate() {
                    grid.gradient(&u_tilde[i][l], p, &mut gu);
                    for a in 0..d {
                        let val = gu[a] - phi_bb[a] / n_comp as f64;
                        b[p * d + a] = val;
                        total[a] += val;
                        foc = foc.max((val - gu[a] + phi_bb[a] / n_comp as f64).abs());
                    }
                }
                if grid.is_interior(p) {
                    for a in 0..d {
                        sum_res = sum_res.max((bb[a] - total[a]).abs());
                    }
                }
            }
            Ok((grad_v, beta_bar, beta, foc, sum_res))
        })
        .collect::<Result<_>>()?;
    let mut out = BetaFields {
        grad_v: Vec::with_capacity(per_layer.len()),
        beta_bar: Vec::with_capacity(per_layer.len()),
        beta: vec![Vec::with_capacity(per_layer.len()); n_comp],
        foc_residual: 0.0,
        sum_residual: 0.0,
    };
    for (gv, bb, b, foc, sr) in per_layer {
        out.grad_v.push(gv);
        out.beta_bar.push(bb);
        for (i, bi) in b.into_iter().enumerate() {
            out.beta[i].push(bi);
        }
        out.foc_residual = out.foc_residual.max(foc);
        out.sum_residual = out.sum_residual.max(sr);
    }
    Ok(out)
}

/// Residual diagnostics of a full solve.
#[derive(Debug, Clone, Serialize)]
pub struct Residuals {
    /// `max |sum_i u^i - V|` over all nodes and stored layers.
    pub decomposition_gap: f64,
    pub foc_residual: f64,
    pub sum_residual: f64,
    /// Interior residual of the aggregated equation on stored layers.
    pub pde_residual: f64,
    /// Fitted `C` in `|H(z)| <= C |z|^2` on the sampled gradients.
    pub hamiltonian_growth: f64,
    /// The aggregated equation need not have a unique solution; the solver
    /// returns the limit of its scheme.
    pub uniqueness_verified: bool,
}

/// Time-space fields of a full solve, stored on `times`.
#[derive(Debug, Clone)]
pub struct GridSolution {
    pub grid: Grid,
    pub times: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub u_tilde: Vec<Vec<Vec<f64>>>,
    pub grad_v: Vec<Vec<f64>>,
    pub beta_bar: Vec<Vec<f64>>,
    pub beta: Vec<Vec<Vec<f64>>>,
    pub residuals: Residuals,
}

/// Runs the whole construction: aggregated solve, component solves and
/// sensitivity reconstruction.
pub fn solve(
    grid: &Grid,
    spec: &DriftCostSpec,
    params: &ModelParams,
    terminals: &[Terminal],
    options: SolveOptions,
) -> Result<GridSolution> {
    if terminals.len() != params.dim() {
        return Err(AgencyError::invalid("terminals", "one terminal payoff per principal is required"));
    }
    let ham = AggregateHamiltonian::new(params, spec)?;
    let total = Terminal::sum(terminals);
    let (agg, u_tilde) = sweep(grid, &ham, &total, Some(terminals), options, false)?;
    let times: Vec<f64> = agg.steps.iter().map(|&n| grid.time(n)).collect();
    let betas = construct_betas(grid, &times, &agg.layers, &u_tilde, spec, params)?;
    let mut gap: f64 = 0.0;
    for (l, v) in agg.layers.iter().enumerate() {
        for (p, val) in v.iter().enumerate() {
            let s: f64 = u_tilde.iter().map(|c| c[l][p]).sum();
            gap = gap.max((s - val).abs());
        }
    }
    let mut growth: f64 = 0.0;
    let d = grid.dim;
    let mut x = vec![0.0; d];
    for (l, gv) in betas.grad_v.iter().enumerate() {
        for p in (0..grid.node_count()).step_by(7) {
            let z = &gv[p * d..(p + 1) * d];
            let zn: f64 = z.iter().map(|a| a * a).sum();
            if zn > 1e-12 {
                grid.node_coords(p, &mut x);
                let h = ham.hamiltonian(times[l], &x, z)?;
                growth = growth.max(h.abs() / zn);
            }
        }
    }
    Ok(GridSolution {
        grid: grid.clone(),
        times,
        v: agg.layers,
        u_tilde,
        grad_v: betas.grad_v,
        beta_bar: betas.beta_bar,
        beta: betas.beta,
        residuals: Residuals {
            decomposition_gap: gap,
            foc_residual: betas.foc_residual,
            sum_residual: betas.sum_residual,
            pde_residual: agg.pde_residual,
            hamiltonian_growth: growth,
            uniqueness_verified: false,
        },
    })
}

impl GridSolution {
    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn n_components(&self) -> usize {
        self.u_tilde.len()
    }

    /// Column names of [`GridSolution::rows`].
    pub fn columns(&self) -> Vec<String> {
        let d = self.dim();
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=d).map(|a| format!("x{a}")));
        cols.push("V".into());
        cols.extend((1..=self.n_components()).map(|i| format!("u_tilde_{i}")));
        cols.extend((1..=d).map(|a| format!("beta_bar_{a}")));
        for i in 1..=self.n_components() {
            cols.extend((1..=d).map(|a| format!("beta{i}_{a}")));
        }
        cols
    }

    /// One row per (stored layer, node), layers in increasing time.
    pub fn rows(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        let d = self.dim();
        let nodes = self.grid.node_count();
        (0..self.times.len()).flat_map(move |l| {
            (0..nodes).map(move |p| {
                let mut row = Vec::with_capacity(self.columns().len());
                row.push(self.times[l]);
                let mut x = vec![0.0; d];
                self.grid.node_coords(p, &mut x);
                row.extend(x);
                row.push(self.v[l][p]);
                row.extend(self.u_tilde.iter().map(|c| c[l][p]));
                row.extend(&self.beta_bar[l][p * d..(p + 1) * d]);
                for b in &self.beta {
                    row.extend(&b[l][p * d..(p + 1) * d]);
                }
                row
            })
        })
    }

    /// Interpolant of a scalar field `[layer][node]`.
    pub fn scalar_interpolant(&self, layers: Vec<Vec<f64>>) -> GridInterpolant {
        GridInterpolant::new(self.grid.clone(), self.times.clone(), layers, 1)
    }

    /// Interpolant of `beta^i`.
    pub fn beta_interpolant(&self, i: usize) -> GridInterpolant {
        GridInterpolant::new(self.grid.clone(), self.times.clone(), self.beta[i].clone(), self.dim())
    }

    pub fn beta_bar_interpolant(&self) -> GridInterpolant {
        GridInterpolant::new(self.grid.clone(), self.times.clone(), self.beta_bar.clone(), self.dim())
    }

    /// Index of the stored layer at time `t`, if any.
    pub fn layer_at(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-12 * self.grid.horizon.max(1.0))
    }
}

/// Piecewise-linear in time, multilinear in space interpolation of stored
/// layers; states outside the box are clamped onto it.
#[derive(Debug, Clone)]
pub struct GridInterpolant {
    grid: Grid,
    times: Vec<f64>,
    layers: Vec<Vec<f64>>,
    width: usize,
}

impl GridInterpolant {
    pub fn new(grid: Grid, times: Vec<f64>, layers: Vec<Vec<f64>>, width: usize) -> Self {
        Self {
            grid,
            times,
            layers,
            width,
        }
    }

    fn spatial(&self, layer: usize, x: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let d = g.dim;
        let mut base = 0usize;
        let mut frac = [0.0; MAX_DIM];
        for a in 0..d {
            let pos = ((x[a].clamp(g.lo, g.hi) - g.lo) / g.h).min((g.n_x - 1) as f64);
            let i = (pos.floor() as usize).min(g.n_x - 2);
            frac[a] = pos - i as f64;
            base += i * g.stride(a);
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut node = base;
            for (a, f) in frac.iter().enumerate().take(d) {
                if corner >> a & 1 == 1 {
                    w *= f;
                    node += g.stride(a);
                } else {
                    w *= 1.0 - f;
                }
            }
            if w == 0.0 {
                continue;
            }
            for (k, o) in out.iter_mut().enumerate() {
                *o += w * self.layers[layer][node * self.width + k];
            }
        }
    }

    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let last = self.times.len() - 1;
        let t = t.clamp(self.times[0], self.times[last]);
        let j = self.times.partition_point(|s| *s <= t).clamp(1, last.max(1));
        if last == 0 {
            self.spatial(0, x, out);
            return;
        }
        let (t0, t1) = (self.times[j - 1], self.times[j]);
        let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        let mut a = [0.0; MAX_DIM];
        let mut b = [0.0; MAX_DIM];
        self.spatial(j - 1, x, &mut a[..self.width]);
        self.spatial(j, x, &mut b[..self.width]);
        for k in 0..self.width {
            out[k] = (1.0 - w) * a[k] + w * b[k];
        }
    }
}

impl Feedback for GridInterpolant {
    fn dim(&self) -> usize {
        self.width
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.eval_into(t, x, out)
    }
}

impl ScalarFeedback for GridInterpolant {
    fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let mut out = [0.0];
        self.eval_into(t, x, &mut out);
        out[0]
    }
}

/// Empirical convergence order from errors at step sizes `h` and `h / ratio`.
pub fn convergence_order(coarse_error: f64, fine_error: f64, ratio: f64) -> f64 {
    (coarse_error / fine_error).ln() / ratio.ln()
}

pub mod benchmark {
    //! Closed-form instance with a curved terminal payoff.
    //!
    //! With `Sigma = I` and `K = k I` the LQ Hamiltonian is isotropic,
    //! `H(z) = a |z|^2`, so `w = exp(2 a V)` solves the backward heat
    //! equation. A terminal payoff `L = Gamma . x + ln(1 + c g(x)) / (2a)`
    //! with Gaussian bump `g` then gives `w` as a Gaussian integral in closed
    //! form. Splitting the bump evenly across principals gives closed-form
    //! components `u^i = l_i^aff . x + (V - Gamma . x) / N`.

    use std::sync::Arc;

    use super::Terminal;
    use crate::error::{AgencyError, Result};
    use crate::model::{DriftCostSpec, ModelParams};

    #[derive(Debug, Clone)]
    pub struct BumpBenchmark {
        pub dim: usize,
        pub k: f64,
        pub risk_aversion: f64,
        pub horizon: f64,
        pub gamma: Vec<f64>,
        pub affine: Vec<Vec<f64>>,
        pub amplitude: f64,
        pub width: f64,
        pub centre: Vec<f64>,
        /// `theta = 2a`.
        pub theta: f64,
        /// `phi = m I`.
        pub m: f64,
    }

    impl BumpBenchmark {
        /// Requires `Sigma = I` and an LQ spec with equal efficiencies.
        pub fn new(params: &ModelParams, spec: &DriftCostSpec, amplitude: f64, width: f64) -> Result<Self> {
            let n = params.dim();
            let identity = (0..n).all(|i| (0..n).all(|j| params.sigma[(i, j)] == if i == j { 1.0 } else { 0.0 }));
            if !identity {
                return Err(AgencyError::invalid("sigma", "benchmark requires Sigma = I"));
            }
            let k = match spec {
                DriftCostSpec::LinearQuadratic { efficiency } if efficiency.iter().all(|e| *e == efficiency[0]) => {
                    efficiency[0]
                }
                _ => return Err(AgencyError::invalid("effort", "benchmark requires LQ with equal efficiencies")),
            };
            if !(amplitude > -1.0 && width > 0.0) {
                return Err(AgencyError::invalid("bump", "need amplitude > -1 and width > 0"));
            }
            let ra = params.risk_aversion;
            let nn = n as f64;
            let m = k * k / (k * k + nn * ra);
            let a = (1.0 - m) * k * k * m - 0.5 * ra * m * m + 0.5 * k * k * m * m;
            if !(a > 0.0) {
                return Err(AgencyError::Degenerate("isotropic Hamiltonian coefficient must be > 0".into()));
            }
            let affine: Vec<Vec<f64>> = (0..n).map(|i| params.liquidation_gradient(i)).collect();
            Ok(Self {
                dim: n,
                k,
                risk_aversion: ra,
                horizon: params.horizon,
                gamma: params.aggregate_liquidation_gradient(),
                affine,
                amplitude,
                width,
                centre: params.x0.clone(),
                theta: 2.0 * a,
                m,
            })
        }

        fn bump(&self, x: &[f64]) -> f64 {
            let s2 = self.width * self.width;
            let r2: f64 = x.iter().zip(&self.centre).map(|(a, c)| (a - c).powi(2)).sum();
            (1.0 + self.amplitude * (-r2 / (2.0 * s2)).exp()).ln() / self.theta
        }

        /// Terminal payoffs `l_i = affine_i . x + bump / N`.
        pub fn terminals(&self) -> Vec<Terminal> {
            (0..self.dim)
                .map(|i| {
                    let me = self.clone();
                    Terminal::Smooth(Arc::new(move |x: &[f64]| {
                        me.affine[i].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + me.bump(x) / me.dim as f64
                    }))
                })
                .collect()
        }

        /// `w(t, x)` and its gradient.
        fn heat(&self, t: f64, x: &[f64]) -> (f64, Vec<f64>) {
            let tau = self.horizon - t;
            let th = self.theta;
            let s2 = self.width * self.width;
            let g2: f64 = self.gamma.iter().map(|g| g * g).sum();
            let gx: f64 = self.gamma.iter().zip(x).map(|(g, a)| g * a).sum();
            let w1 = (th * gx + 0.5 * th * th * g2 * tau).exp();
            let var = s2 + tau;
            let v = s2 * tau / var;
            let mut w2 = self.amplitude;
            let mut dlog = vec![0.0; self.dim];
            for j in 0..self.dim {
                let (xj, cj, gj) = (x[j], self.centre[j], self.gamma[j]);
                let mu = (xj * s2 + cj * tau) / var;
                w2 *= (s2 / var).sqrt() * (-(xj - cj).powi(2) / (2.0 * var)).exp() * (th * gj * mu + 0.5 * th * th * gj * gj * v).exp();
                dlog[j] = -(xj - cj) / var + th * gj * s2 / var;
            }
            let w = w1 + w2;
            let grad = (0..self.dim).map(|j| th * self.gamma[j] * w1 + w2 * dlog[j]).collect();
            (w, grad)
        }

        pub fn value(&self, t: f64, x: &[f64]) -> f64 {
            self.heat(t, x).0.ln() / self.theta
        }

        pub fn gradient(&self, t: f64, x: &[f64]) -> Vec<f64> {
            let (w, g) = self.heat(t, x);
            g.iter().map(|v| v / (self.theta * w)).collect()
        }

        pub fn component(&self, i: usize, t: f64, x: &[f64]) -> f64 {
            let gx: f64 = self.gamma.iter().zip(x).map(|(g, a)| g * a).sum();
            let ax: f64 = self.affine[i].iter().zip(x).map(|(g, a)| g * a).sum();
            ax + (self.value(t, x) - gx) / self.dim as f64
        }

        pub fn beta_bar(&self, t: f64, x: &[f64]) -> Vec<f64> {
            self.gradient(t, x).iter().map(|g| self.m * g).collect()
        }

        /// `beta^i = grad u^i - Phi(beta_bar) / N` with `Phi(b) = N R_A b / k^2`.
        pub fn beta(&self, i: usize, t: f64, x: &[f64]) -> Vec<f64> {
            let gv = self.gradient(t, x);
            let nn = self.dim as f64;
            (0..self.dim)
                .map(|j| {
                    let gu = self.affine[i][j] + (gv[j] - self.gamma[j]) / nn;
                    gu - self.risk_aversion * self.m * gv[j] / (self.k * self.k)
                })
                .collect()
        }
    }
}

//! Optimal stopping problem data.
//!
//! A [`ProblemSpec`] bundles the diffusion `dX = μ(X)dt + σ dB` on `ℝ^d`, a killing
//! (discount) rate `r`, the running payoff `h(t,x)`, the obstacle (stopping payoff)
//! `f(t,x)` and the terminal payoff `g(x)`, together with the derivatives of these
//! functions that the estimators and condition checks consume.
//!
//! Coordinates are ordered so that `x[0]` is the direction in which the stopping set
//! is monotone; the remaining coordinates form the boundary "tail".

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, fd_step, MAX_DIM};

/// `(t, x) ↦ value`.
pub type ScalarFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x, out)`: writes a vector (gradient) or a row-major matrix (Hessian) into `out`.
pub type VectorFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(x, out)`: time-homogeneous vector field or its row-major Jacobian.
pub type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, grad_out) -> ∂_t(h+m)`, writing `∇_x(h+m)` into `grad_out`.
pub type GeneratorPartialsFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) -> f64 + Send + Sync>;

/// Default cap on the truncation horizon used for infinite-horizon problems.
pub const DEFAULT_TRUNCATION_CAP: f64 = 50.0;
/// Infinite-horizon problems are truncated where `e^{-rT}` drops below this.
pub const TRUNCATION_DISCOUNT: f64 = 1e-6;

/// A payoff function of `(t, x)` with optional analytic derivatives.
#[derive(Clone)]
pub struct Payoff {
    value: ScalarFn,
    dt: Option<ScalarFn>,
    grad: Option<VectorFn>,
    hess: Option<VectorFn>,
    dtt: Option<ScalarFn>,
}

impl Payoff {
    pub fn new(value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Arc::new(value), dt: None, grad: None, hess: None, dtt: None }
    }

    /// Constant payoff with all derivatives identically zero.
    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c)
            .with_time_derivative(|_, _| 0.0)
            .with_gradient(|_, _, g| g.fill(0.0))
            .with_hessian(|_, _, h| h.fill(0.0))
            .with_second_time_derivative(|_, _| 0.0)
    }

    /// `⟨a, x⟩ + c`, time independent.
    pub fn linear(a: Vec<f64>, c: f64) -> Self {
        let a_val = a.clone();
        Self::new(move |_, x| c + a_val.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>())
            .with_time_derivative(|_, _| 0.0)
            .with_gradient(move |_, _, g| g.copy_from_slice(&a))
            .with_hessian(|_, _, h| h.fill(0.0))
            .with_second_time_derivative(|_, _| 0.0)
    }

    pub fn with_time_derivative(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.dt = Some(Arc::new(f));
        self
    }

    pub fn with_gradient(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(f));
        self
    }

    /// Row-major `d×d` Hessian in `x`.
    pub fn with_hessian(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hess = Some(Arc::new(f));
        self
    }

    pub fn with_second_time_derivative(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.dtt = Some(Arc::new(f));
        self
    }

    #[inline]
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.value)(t, x)
    }

    fn dt(&self, t: f64, x: &[f64]) -> f64 {
        match &self.dt {
            Some(f) => f(t, x),
            None => {
                let e = fd_step(t);
                (self.value(t + e, x) - self.value(t - e, x)) / (2.0 * e)
            }
        }
    }

    fn dtt(&self, t: f64, x: &[f64]) -> f64 {
        match (&self.dtt, &self.dt) {
            (Some(f), _) => f(t, x),
            (None, Some(d)) => {
                let e = fd_step(t);
                (d(t + e, x) - d(t - e, x)) / (2.0 * e)
            }
            (None, None) => {
                let e = 1e-4 * (1.0 + t.abs());
                (self.value(t + e, x) - 2.0 * self.value(t, x) + self.value(t - e, x)) / (e * e)
            }
        }
    }

    fn grad(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if let Some(g) = &self.grad {
            g(t, x, out);
            return;
        }
        let d = x.len();
        let mut y = [0.0; MAX_DIM];
        y[..d].copy_from_slice(x);
        for k in 0..d {
            let e = fd_step(x[k]);
            y[k] = x[k] + e;
            let up = self.value(t, &y[..d]);
            y[k] = x[k] - e;
            let dn = self.value(t, &y[..d]);
            y[k] = x[k];
            out[k] = (up - dn) / (2.0 * e);
        }
    }

    fn hess(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if let Some(h) = &self.hess {
            h(t, x, out);
            return;
        }
        let d = x.len();
        let mut y = [0.0; MAX_DIM];
        y[..d].copy_from_slice(x);
        if let Some(g) = &self.grad {
            let mut gp = [0.0; MAX_DIM];
            let mut gm = [0.0; MAX_DIM];
            for k in 0..d {
                let e = fd_step(x[k]);
                y[k] = x[k] + e;
                g(t, &y[..d], &mut gp[..d]);
                y[k] = x[k] - e;
                g(t, &y[..d], &mut gm[..d]);
                y[k] = x[k];
                for j in 0..d {
                    out[j * d + k] = (gp[j] - gm[j]) / (2.0 * e);
                }
            }
            // symmetrise
            for j in 0..d {
                for k in (j + 1)..d {
                    let s = 0.5 * (out[j * d + k] + out[k * d + j]);
                    out[j * d + k] = s;
                    out[k * d + j] = s;
                }
            }
            return;
        }
        let f0 = self.value(t, x);
        for j in 0..d {
            for k in j..d {
                let ej = 1e-4 * (1.0 + x[j].abs());
                let ek = 1e-4 * (1.0 + x[k].abs());
                let v = if j == k {
                    y[j] = x[j] + ej;
                    let up = self.value(t, &y[..d]);
                    y[j] = x[j] - ej;
                    let dn = self.value(t, &y[..d]);
                    y[j] = x[j];
                    (up - 2.0 * f0 + dn) / (ej * ej)
                } else {
                    let mut corner = |sj: f64, sk: f64| {
                        y[j] = x[j] + sj * ej;
                        y[k] = x[k] + sk * ek;
                        let v = self.value(t, &y[..d]);
                        y[j] = x[j];
                        y[k] = x[k];
                        v
                    };
                    (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0)) / (4.0 * ej * ek)
                };
                out[j * d + k] = v;
                out[k * d + j] = v;
            }
        }
    }
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payoff")
            .field("dt", &self.dt.is_some())
            .field("grad", &self.grad.is_some())
            .field("hess", &self.hess.is_some())
            .field("dtt", &self.dtt.is_some())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(f64),
    Infinite,
}

/// Which side of the boundary in `x[0]` is the stopping set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// `S = {x1 <= b(t, tail)}`.
    StopBelow,
    /// `S = {x1 >= b(t, tail)}`.
    StopAbove,
}

impl Orientation {
    /// Whether `x1` lies on the stopping side of `b` (inclusive).
    #[inline]
    pub fn stops(self, x1: f64, b: f64) -> bool {
        match self {
            Orientation::StopBelow => x1 <= b,
            Orientation::StopAbove => x1 >= b,
        }
    }
}

/// Truncation applied to an infinite-horizon problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub horizon: f64,
    /// `e^{-r T_eff}`; the neglected tail is at most this factor times the
    /// payoff scale beyond `T_eff`.
    pub remainder_factor: f64,
}

/// Derivative pieces an operation may need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    RunningTimeDerivative,
    RunningGradient,
    ObstacleTimeDerivative,
    ObstacleGradient,
    ObstacleHessian,
    ObstacleSecondTimeDerivative,
    TerminalGradient,
    TerminalHessian,
    GeneratorPartials,
}

impl Piece {
    pub fn name(self) -> &'static str {
        match self {
            Piece::RunningTimeDerivative => "time derivative of the running payoff h",
            Piece::RunningGradient => "gradient of the running payoff h",
            Piece::ObstacleTimeDerivative => "time derivative of the obstacle f",
            Piece::ObstacleGradient => "gradient of the obstacle f",
            Piece::ObstacleHessian => "Hessian of the obstacle f",
            Piece::ObstacleSecondTimeDerivative => "second time derivative of the obstacle f",
            Piece::TerminalGradient => "gradient of the terminal payoff g",
            Piece::TerminalHessian => "Hessian of the terminal payoff g",
            Piece::GeneratorPartials => "partial derivatives of h+m (condition (E) data)",
        }
    }
}

/// Full description of one stopping problem. Immutable and cheap to clone.
#[derive(Clone)]
pub struct ProblemSpec {
    name: String,
    dim: usize,
    horizon: Horizon,
    effective_horizon: f64,
    kill_rate: f64,
    drift: FieldFn,
    drift_jacobian: FieldFn,
    sigma: Vec<f64>,
    diffusion: Vec<f64>,
    running: Payoff,
    obstacle: Payoff,
    terminal: Option<Payoff>,
    orientation: Orientation,
    generator_partials: Option<GeneratorPartialsFn>,
    fd_fallback: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("kill_rate", &self.kill_rate)
            .field("sigma", &self.sigma)
            .field("orientation", &self.orientation)
            .finish_non_exhaustive()
    }
}

pub struct ProblemBuilder {
    name: String,
    dim: usize,
    horizon: Option<Horizon>,
    truncation_cap: f64,
    kill_rate: f64,
    drift: Option<(FieldFn, Option<FieldFn>)>,
    sigma: Option<Vec<f64>>,
    running: Option<Payoff>,
    obstacle: Option<Payoff>,
    terminal: Option<Payoff>,
    terminal_is_obstacle: bool,
    orientation: Orientation,
    generator_partials: Option<GeneratorPartialsFn>,
    fd_fallback: bool,
}

impl ProblemBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn finite_horizon(mut self, t: f64) -> Self {
        self.horizon = Some(Horizon::Finite(t));
        self
    }

    pub fn infinite_horizon(mut self) -> Self {
        self.horizon = Some(Horizon::Infinite);
        self
    }

    /// Upper bound on the truncation horizon of an infinite-horizon problem.
    pub fn truncation_cap(mut self, cap: f64) -> Self {
        self.truncation_cap = cap;
        self
    }

    pub fn kill_rate(mut self, r: f64) -> Self {
        self.kill_rate = r;
        self
    }

    /// Drift `μ` and its Jacobian (row `j` holds `∇μ_j`, row-major).
    pub fn drift(
        mut self,
        mu: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        jacobian: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some((Arc::new(mu), Some(Arc::new(jacobian))));
        self
    }

    /// Drift without a Jacobian. `build` rejects this: the derivative flow needs `∇μ`.
    pub fn drift_without_jacobian(mut self, mu: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some((Arc::new(mu), None));
        self
    }

    /// Constant drift vector.
    pub fn constant_drift(self, mu: Vec<f64>) -> Self {
        self.drift(move |_, out| out.copy_from_slice(&mu), |_, j| j.fill(0.0))
    }

    /// Row-major `d×d` diffusion matrix `σ`.
    pub fn sigma(mut self, sigma: Vec<f64>) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn running(mut self, h: Payoff) -> Self {
        self.running = Some(h);
        self
    }

    pub fn obstacle(mut self, f: Payoff) -> Self {
        self.obstacle = Some(f);
        self
    }

    /// Terminal payoff `g(x)`; the time argument passed to it is always `T`.
    pub fn terminal(mut self, g: Payoff) -> Self {
        self.terminal = Some(g);
        self.terminal_is_obstacle = false;
        self
    }

    /// `g = f(T, ·)`.
    pub fn terminal_equals_obstacle(mut self) -> Self {
        self.terminal = None;
        self.terminal_is_obstacle = true;
        self
    }

    pub fn orientation(mut self, o: Orientation) -> Self {
        self.orientation = o;
        self
    }

    /// Analytic `∂_t(h+m)` and `∇_x(h+m)`.
    pub fn generator_partials(mut self, p: impl Fn(f64, &[f64], &mut [f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.generator_partials = Some(Arc::new(p));
        self
    }

    /// Allow central finite differences for derivatives that were not supplied.
    pub fn fd_fallback(mut self, on: bool) -> Self {
        self.fd_fallback = on;
        self
    }

    pub fn build(self) -> Result<ProblemSpec> {
        let d = self.dim;
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidProblem(alloc::format!("dimension {d} outside 1..={MAX_DIM}")));
        }
        let horizon = self.horizon.ok_or_else(|| Error::InvalidProblem("horizon not set".into()))?;
        if !(self.kill_rate >= 0.0 && self.kill_rate.is_finite()) {
            return Err(Error::InvalidProblem("kill rate must be finite and nonnegative".into()));
        }
        let (drift, jac) = self.drift.ok_or_else(|| Error::InvalidProblem("drift not set".into()))?;
        let drift_jacobian = jac.ok_or(Error::MissingDerivative("Jacobian of the drift μ"))?;
        let sigma = self.sigma.ok_or_else(|| Error::InvalidProblem("sigma not set".into()))?;
        if sigma.len() != d * d || sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidProblem(alloc::format!("sigma must be a finite {d}x{d} matrix")));
        }
        let running = self.running.unwrap_or_else(|| Payoff::constant(0.0));
        let obstacle = self.obstacle.ok_or_else(|| Error::InvalidProblem("obstacle f not set".into()))?;

        let (effective_horizon, terminal) = match horizon {
            Horizon::Finite(t) => {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::InvalidProblem("horizon must be positive".into()));
                }
                if self.terminal.is_none() && !self.terminal_is_obstacle {
                    return Err(Error::InvalidProblem("finite horizon requires a terminal payoff g".into()));
                }
                (t, self.terminal)
            }
            Horizon::Infinite => {
                if self.terminal.is_some() {
                    return Err(Error::InvalidProblem("infinite horizon takes no terminal payoff".into()));
                }
                if self.kill_rate <= 0.0 {
                    return Err(Error::InvalidProblem("infinite horizon requires a positive kill rate".into()));
                }
                let t_eff = (math::ln(1.0 / TRUNCATION_DISCOUNT) / self.kill_rate).min(self.truncation_cap);
                (t_eff, None)
            }
        };

        // σσᵀ is symmetric positive semidefinite by construction.
        let mut diffusion = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                diffusion[i * d + j] = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
            }
        }

        Ok(ProblemSpec {
            name: self.name,
            dim: d,
            horizon,
            effective_horizon,
            kill_rate: self.kill_rate,
            drift,
            drift_jacobian,
            sigma,
            diffusion,
            running,
            obstacle,
            terminal,
            orientation: self.orientation,
            generator_partials: self.generator_partials,
            fd_fallback: self.fd_fallback,
        })
    }
}

/// Values of the generator applied to the payoffs at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorImage {
    /// `m = ∂_t f + (L - r) f`.
    pub m_value: f64,
    /// `n = (L - r) g`.
    pub n_value: f64,
    /// `h + m`.
    pub hm_value: f64,
    /// `∇_x(h+m)`, when available.
    pub hm_gradient: Option<Vec<f64>>,
    /// `∂_t(h+m)`, when available.
    pub hm_time_derivative: Option<f64>,
}

impl ProblemSpec {
    pub fn builder(dim: usize) -> ProblemBuilder {
        ProblemBuilder {
            name: "custom".to_string(),
            dim,
            horizon: None,
            truncation_cap: DEFAULT_TRUNCATION_CAP,
            kill_rate: 0.0,
            drift: None,
            sigma: None,
            running: None,
            obstacle: None,
            terminal: None,
            terminal_is_obstacle: false,
            orientation: Orientation::StopBelow,
            generator_partials: None,
            fd_fallback: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    /// `T` for finite horizons, the truncation horizon otherwise.
    pub fn effective_horizon(&self) -> f64 {
        self.effective_horizon
    }

    pub fn truncation(&self) -> Option<Truncation> {
        match self.horizon {
            Horizon::Finite(_) => None,
            Horizon::Infinite => Some(Truncation {
                horizon: self.effective_horizon,
                remainder_factor: math::exp(-self.kill_rate * self.effective_horizon),
            }),
        }
    }

    pub fn kill_rate(&self) -> f64 {
        self.kill_rate
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `σσᵀ`, row-major.
    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    /// `g = f(T, ·)` holds by construction.
    pub fn terminal_is_obstacle(&self) -> bool {
        self.terminal.is_none()
    }

    pub fn fd_fallback_enabled(&self) -> bool {
        self.fd_fallback
    }

    fn has_piece(&self, p: Piece) -> bool {
        let term = self.terminal.as_ref().unwrap_or(&self.obstacle);
        match p {
            Piece::RunningTimeDerivative => self.running.dt.is_some(),
            Piece::RunningGradient => self.running.grad.is_some(),
            Piece::ObstacleTimeDerivative => self.obstacle.dt.is_some(),
            Piece::ObstacleGradient => self.obstacle.grad.is_some(),
            Piece::ObstacleHessian => self.obstacle.hess.is_some(),
            Piece::ObstacleSecondTimeDerivative => self.obstacle.dtt.is_some(),
            Piece::TerminalGradient => term.grad.is_some(),
            Piece::TerminalHessian => term.hess.is_some(),
            Piece::GeneratorPartials => self.generator_partials.is_some(),
        }
    }

    /// Fails with the first missing piece unless finite differences are allowed.
    pub fn require(&self, pieces: &[Piece]) -> Result<()> {
        if self.fd_fallback {
            return Ok(());
        }
        match pieces.iter().find(|p| !self.has_piece(**p)) {
            Some(p) => Err(Error::MissingDerivative(p.name())),
            None => Ok(()),
        }
    }

    /// Pieces among `pieces` that will be computed by finite differences.
    pub fn fd_pieces(&self, pieces: &[Piece]) -> Vec<&'static str> {
        pieces.iter().filter(|p| !self.has_piece(**p)).map(|p| p.name()).collect()
    }

    #[inline]
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    /// Row-major Jacobian, `out[j*d + l] = ∂_l μ_j`.
    #[inline]
    pub fn drift_jacobian(&self, x: &[f64], out: &mut [f64]) {
        (self.drift_jacobian)(x, out)
    }

    #[inline]
    pub fn h(&self, t: f64, x: &[f64]) -> f64 {
        self.running.value(t, x)
    }

    #[inline]
    pub fn f(&self, t: f64, x: &[f64]) -> f64 {
        self.obstacle.value(t, x)
    }

    #[inline]
    pub fn g(&self, x: &[f64]) -> f64 {
        self.terminal_payoff().value(self.effective_horizon, x)
    }

    fn terminal_payoff(&self) -> &Payoff {
        self.terminal.as_ref().unwrap_or(&self.obstacle)
    }

    pub fn dt_h(&self, t: f64, x: &[f64]) -> f64 {
        self.running.dt(t, x)
    }

    pub fn grad_h(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.running.grad(t, x, out)
    }

    pub fn dt_f(&self, t: f64, x: &[f64]) -> f64 {
        self.obstacle.dt(t, x)
    }

    pub fn dtt_f(&self, t: f64, x: &[f64]) -> f64 {
        self.obstacle.dtt(t, x)
    }

    pub fn grad_f(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.obstacle.grad(t, x, out)
    }

    pub fn hess_f(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.obstacle.hess(t, x, out)
    }

    pub fn grad_g(&self, x: &[f64], out: &mut [f64]) {
        self.terminal_payoff().grad(self.effective_horizon, x, out)
    }

    pub fn hess_g(&self, x: &[f64], out: &mut [f64]) {
        self.terminal_payoff().hess(self.effective_horizon, x, out)
    }

    /// `Σ μ_i ∂_i F + ½ Σ a_ij ∂_ij F - r F` given value, gradient and Hessian of `F`.
    fn killed_generator(&self, x: &[f64], value: f64, grad: &[f64], hess: &[f64]) -> f64 {
        let d = self.dim;
        let mut mu = [0.0; MAX_DIM];
        self.drift(x, &mut mu[..d]);
        let mut s = -self.kill_rate * value;
        for i in 0..d {
            s += mu[i] * grad[i];
            for j in 0..d {
                s += 0.5 * self.diffusion[i * d + j] * hess[i * d + j];
            }
        }
        s
    }

    /// `m(t,x) = ∂_t f + L f - r f`.
    pub fn m(&self, t: f64, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut g = [0.0; MAX_DIM];
        let mut hs = [0.0; MAX_DIM * MAX_DIM];
        self.grad_f(t, x, &mut g[..d]);
        self.hess_f(t, x, &mut hs[..d * d]);
        self.dt_f(t, x) + self.killed_generator(x, self.f(t, x), &g[..d], &hs[..d * d])
    }

    /// `n(x) = L g - r g`.
    pub fn n(&self, x: &[f64]) -> f64 {
        let d = self.dim;
        let mut g = [0.0; MAX_DIM];
        let mut hs = [0.0; MAX_DIM * MAX_DIM];
        self.grad_g(x, &mut g[..d]);
        self.hess_g(x, &mut hs[..d * d]);
        self.killed_generator(x, self.g(x), &g[..d], &hs[..d * d])
    }

    /// `(h + m)(t, x)`.
    #[inline]
    pub fn hm(&self, t: f64, x: &[f64]) -> f64 {
        self.h(t, x) + self.m(t, x)
    }

    /// Writes `∇_x(h+m)` into `grad` and returns `∂_t(h+m)`.
    pub fn hm_partials(&self, t: f64, x: &[f64], grad: &mut [f64]) -> f64 {
        if let Some(p) = &self.generator_partials {
            return p(t, x, grad);
        }
        let d = self.dim;
        let mut y = [0.0; MAX_DIM];
        y[..d].copy_from_slice(x);
        for k in 0..d {
            let e = fd_step(x[k]);
            y[k] = x[k] + e;
            let up = self.hm(t, &y[..d]);
            y[k] = x[k] - e;
            let dn = self.hm(t, &y[..d]);
            y[k] = x[k];
            grad[k] = (up - dn) / (2.0 * e);
        }
        let e = fd_step(t);
        (self.hm(t + e, x) - self.hm(t - e, x)) / (2.0 * e)
    }

    pub(crate) fn check_point(&self, t: f64, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Parameter(alloc::format!(
                "point has dimension {} but the problem has {}",
                x.len(),
                self.dim
            )));
        }
        if !(t >= 0.0 && t <= self.effective_horizon) {
            return Err(Error::Parameter(alloc::format!("t={t} outside [0, {}]", self.effective_horizon)));
        }
        Ok(())
    }
}

/// Pieces needed to evaluate `m` and `n`.
pub const GENERATOR_PIECES: [Piece; 5] = [
    Piece::ObstacleTimeDerivative,
    Piece::ObstacleGradient,
    Piece::ObstacleHessian,
    Piece::TerminalGradient,
    Piece::TerminalHessian,
];

/// Evaluates `m`, `n`, `h+m` and, when available, the partials of `h+m`.
pub fn evaluate_m_n(spec: &ProblemSpec, t: f64, x: &[f64]) -> Result<GeneratorImage> {
    spec.check_point(t, x)?;
    spec.require(&GENERATOR_PIECES)?;
    let m_value = spec.m(t, x);
    let n_value = spec.n(x);
    let hm_value = spec.h(t, x) + m_value;
    let (hm_gradient, hm_time_derivative) = if spec.generator_partials.is_some() || spec.fd_fallback {
        let mut g = vec![0.0; spec.dim];
        let dt = spec.hm_partials(t, x, &mut g);
        (Some(g), Some(dt))
    } else {
        (None, None)
    };
    Ok(GeneratorImage { m_value, n_value, hm_value, hm_gradient, hm_time_derivative })
}

/// Number of samples used to detect sign changes of `h+m` in the bracket.
const GAMMA_SAMPLES: usize = 256;

/// Zero crossing of `h + m` in `x1` for fixed `(t, tail)`.
///
/// For a stop-below problem this is `inf{x1 : (h+m)(t, x1, tail) > 0}` restricted to
/// `bracket`: `+∞` when `h+m <= 0` on the whole bracket and `-∞` when it is already
/// positive at the left end. Stop-above problems use the mirrored definition
/// `sup{x1 : (h+m) > 0}`.
pub fn gamma_curve(spec: &ProblemSpec, t: f64, tail: &[f64], bracket: (f64, f64)) -> Result<f64> {
    let d = spec.dim;
    if tail.len() + 1 != d {
        return Err(Error::Parameter(alloc::format!("tail must have {} components", d - 1)));
    }
    let (lo, hi) = bracket;
    if !(lo < hi) {
        return Err(Error::Parameter("empty gamma bracket".into()));
    }
    spec.require(&GENERATOR_PIECES[..3])?;
    let mut x = [0.0; MAX_DIM];
    x[1..d].copy_from_slice(tail);
    let mut eval = |x1: f64| {
        x[0] = x1;
        spec.hm(t, &x[..d])
    };

    let below = spec.orientation == Orientation::StopBelow;
    let xs: Vec<f64> = (0..=GAMMA_SAMPLES).map(|i| lo + (hi - lo) * i as f64 / GAMMA_SAMPLES as f64).collect();
    let pos: Vec<bool> = xs.iter().map(|&x1| eval(x1) > 0.0).collect();
    let changes: Vec<usize> = (0..GAMMA_SAMPLES).filter(|&i| pos[i] != pos[i + 1]).collect();
    if changes.len() > 1 {
        return Err(Error::NonMonotoneGenerator { t, crossings: changes.len() });
    }
    let Some(&i) = changes.first() else {
        return Ok(match (below, pos[0]) {
            (true, true) => f64::NEG_INFINITY,
            (true, false) => f64::INFINITY,
            (false, true) => f64::INFINITY,
            (false, false) => f64::NEG_INFINITY,
        });
    };
    if below == !pos[i + 1] {
        // The single sign change goes the wrong way for this orientation.
        return Err(Error::NonMonotoneGenerator { t, crossings: 1 });
    }
    // Bisection keeps `a` on the nonpositive side and `b` on the positive side.
    let (mut a, mut b) = if below { (xs[i], xs[i + 1]) } else { (xs[i + 1], xs[i]) };
    let tol = (hi - lo) * 1e-12;
    while (b - a).abs() > tol {
        let c = 0.5 * (a + b);
        if eval(c) > 0.0 {
            b = c;
        } else {
            a = c;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_problem() -> ProblemSpec {
        ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.3])
            .sigma(vec![0.5])
            .running(Payoff::constant(0.0))
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap()
    }

    #[test]
    fn zero_payoffs_give_zero_generator_image() {
        let spec = zero_problem();
        let img = evaluate_m_n(&spec, 0.5, &[1.3]).unwrap();
        assert_eq!(img.m_value, 0.0);
        assert_eq!(img.n_value, 0.0);
        assert_eq!(img.hm_value, 0.0);
    }

    #[test]
    fn missing_hessian_is_a_configuration_error() {
        let spec = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .obstacle(
                Payoff::new(|_, x| x[0] * x[0])
                    .with_time_derivative(|_, _| 0.0)
                    .with_gradient(|_, x, g| g[0] = 2.0 * x[0]),
            )
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let err = evaluate_m_n(&spec, 0.0, &[1.0]).unwrap_err();
        assert_eq!(err, Error::MissingDerivative("Hessian of the obstacle f"));
    }

    #[test]
    fn fd_fallback_matches_analytic_generator() {
        let build = |fd: bool| {
            let f = if fd {
                Payoff::new(|t, x| t * x[0] * x[0])
            } else {
                Payoff::new(|t, x| t * x[0] * x[0])
                    .with_time_derivative(|_, x| x[0] * x[0])
                    .with_gradient(|t, x, g| g[0] = 2.0 * t * x[0])
                    .with_hessian(|t, _, h| h[0] = 2.0 * t)
            };
            ProblemSpec::builder(1)
                .finite_horizon(1.0)
                .kill_rate(0.2)
                .drift(|x, m| m[0] = -x[0], |_, j| j[0] = -1.0)
                .sigma(vec![0.4])
                .obstacle(f)
                .terminal(Payoff::constant(0.0))
                .fd_fallback(fd)
                .build()
                .unwrap()
        };
        let (a, b) = (build(false), build(true));
        let (t, x) = (0.6, [1.7]);
        // m = x² + 0.5·0.16·2t + (-x)(2tx) - 0.2·t x²
        let exact = x[0] * x[0] + 0.16 * t - 2.0 * t * x[0] * x[0] - 0.2 * t * x[0] * x[0];
        assert!((a.m(t, &x) - exact).abs() < 1e-12);
        assert!((b.m(t, &x) - exact).abs() < 1e-6);
        assert_eq!(b.fd_pieces(&GENERATOR_PIECES[..3]).len(), 3);
    }

    #[test]
    fn infinite_horizon_requires_killing() {
        let err = ProblemSpec::builder(1)
            .infinite_horizon()
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .obstacle(Payoff::constant(0.0))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InvalidProblem(_)));
    }

    #[test]
    fn drift_jacobian_is_mandatory() {
        let err = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .drift_without_jacobian(|_, m| m[0] = 0.0)
            .sigma(vec![1.0])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap_err();
        assert_eq!(err, Error::MissingDerivative("Jacobian of the drift μ"));
    }

    #[test]
    fn gamma_of_identity_is_zero() {
        let spec = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .running(Payoff::linear(vec![1.0], 0.0))
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let g = gamma_curve(&spec, 0.0, &[], (-3.0, 5.0)).unwrap();
        assert!(g.abs() < 1e-9);
        assert_eq!(gamma_curve(&spec, 0.0, &[], (1.0, 5.0)).unwrap(), f64::NEG_INFINITY);
        assert_eq!(gamma_curve(&spec, 0.0, &[], (-5.0, -1.0)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn gamma_rejects_non_monotone_hm() {
        let spec = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .running(Payoff::new(|_, x| x[0] * x[0] - 1.0))
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let err = gamma_curve(&spec, 0.0, &[], (-3.0, 3.0)).unwrap_err();
        assert!(matches!(err, Error::NonMonotoneGenerator { crossings: 2, .. }));
    }
}

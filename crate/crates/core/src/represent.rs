//! Monte Carlo estimators of the value function and of the pathwise representations
//! of its derivatives.
//!
//! Every estimator stops each path at the first grid node where it lies on the
//! stopping side of a supplied boundary, discounts at the kill rate and integrates
//! running terms with the trapezoid rule. Paths are evaluated in parallel when the
//! `std` feature is on; means are reduced in path order with pairwise sums, so
//! results do not depend on scheduling.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boundary::BoundarySurface;
use crate::error::{Error, Result};
use crate::flow::{Event, PathOutcome, PathPoint, TimeGrid, Walker};
use crate::math::{self, MAX_DIM};
use crate::par;
use crate::pde::ValueSurface;
use crate::problem::{Horizon, Piece, ProblemSpec, Truncation};

pub use crate::flow::{apply_measure_change, MeasureChange, MeasureMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    /// Estimate expectations under a Girsanov-transformed measure instead.
    pub measure: Option<MeasureChange>,
}

impl McSettings {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        Self { n_paths, dt, seed, measure: None }
    }

    pub fn with_measure(mut self, m: MeasureChange) -> Self {
        self.measure = Some(m);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    /// Paths that produced finite output.
    pub n_effective: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub boundary_id: String,
    /// Set for infinite-horizon problems: paths are cut at `horizon`, which leaves
    /// an error of order `remainder_factor` times the payoff scale.
    pub truncation: Option<Truncation>,
}

/// Several estimates from the same paths with the covariance of their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiEstimate {
    pub estimates: Vec<Estimate>,
    /// Row-major `K×K` covariance of the sample means.
    pub covariance: Vec<f64>,
}

impl MultiEstimate {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.estimates[i].mean
    }

    pub fn cov(&self, i: usize, j: usize) -> f64 {
        self.covariance[i * self.len() + j]
    }

    /// Standard error of `mean(i) - mean(j)` accounting for the shared paths.
    pub fn diff_std_error(&self, i: usize, j: usize) -> f64 {
        math::sqrt((self.cov(i, i) + self.cov(j, j) - 2.0 * self.cov(i, j)).max(0.0))
    }

    /// `-mean(num)/mean(den)` and its delta-method standard error.
    pub fn neg_ratio(&self, num: usize, den: usize) -> (f64, f64) {
        let (a, b) = (self.mean(num), self.mean(den));
        let q = a / b;
        let var = (self.cov(num, num) - 2.0 * q * self.cov(num, den) + q * q * self.cov(den, den)) / (b * b);
        (-q, math::sqrt(var.max(0.0)))
    }
}

#[derive(Clone, Copy, Default)]
struct Trapezoid {
    prev: f64,
    sum: f64,
}

impl Trapezoid {
    #[inline]
    fn push(&mut self, h_prev: f64, v: f64) {
        if h_prev > 0.0 {
            self.sum += 0.5 * h_prev * (self.prev + v);
        }
        self.prev = v;
    }
}

struct Ctx<'a> {
    spec: &'a ProblemSpec,
    x: &'a [f64],
    boundary: &'a BoundarySurface,
    settings: &'a McSettings,
    grid: TimeGrid,
}

impl<'a> Ctx<'a> {
    fn new(
        spec: &'a ProblemSpec,
        t: f64,
        x: &'a [f64],
        boundary: &'a BoundarySurface,
        settings: &'a McSettings,
    ) -> Result<Self> {
        spec.check_point(t, x)?;
        if settings.n_paths == 0 {
            return Err(Error::Parameter("n_paths must be positive".into()));
        }
        if boundary.tail_dim() + 1 != spec.dim() {
            return Err(Error::Parameter("boundary tail dimension does not match the problem".into()));
        }
        if let Some(m) = &settings.measure {
            if m.eta.len() != spec.dim() {
                return Err(Error::Parameter("measure change kernel has the wrong dimension".into()));
            }
        }
        let grid = TimeGrid::new(t, spec.effective_horizon(), settings.dt)?;
        Ok(Self { spec, x, boundary, settings, grid })
    }

    fn walker(&self, track_flow: bool) -> Walker<'_> {
        let mut w = Walker::new(self.spec, self.grid, self.settings.seed);
        w.boundary = Some(self.boundary);
        w.measure = self.settings.measure.as_ref();
        w.track_flow = track_flow;
        w
    }

    fn estimate(&self, mean: f64, std_error: f64, n_effective: usize) -> Estimate {
        Estimate {
            mean,
            std_error,
            n_effective,
            n_paths: self.settings.n_paths,
            dt: self.settings.dt,
            seed: self.settings.seed,
            boundary_id: self.boundary.id.clone(),
            truncation: self.spec.truncation(),
        }
    }

    /// Runs every path with a fresh `S`, lets `finish` write `k` outputs and
    /// multiplies them by the Radon–Nikodym weight at the last visited node.
    fn sample<S: Default>(
        &self,
        walker: &Walker<'_>,
        k: usize,
        visit: impl Fn(&mut S, &PathPoint) + Sync,
        finish: impl Fn(&S, &PathOutcome, &mut [f64]) + Sync,
    ) -> Result<MultiEstimate> {
        let n = self.settings.n_paths;
        let rows = par::map(n, |p| -> Result<Option<Vec<f64>>> {
            let mut st = S::default();
            let mut lw = 0.0;
            let out = walker.run(p as u64, self.x, |pt| {
                lw = pt.log_weight;
                visit(&mut st, pt);
            })?;
            if !out.valid {
                return Ok(None);
            }
            let mut o = vec![0.0; k];
            finish(&st, &out, &mut o);
            let wgt = math::exp(lw);
            for v in &mut o {
                *v *= wgt;
            }
            Ok(o.iter().all(|v| v.is_finite()).then_some(o))
        });
        self.aggregate(rows, k)
    }

    fn aggregate(&self, rows: Vec<Result<Option<Vec<f64>>>>, k: usize) -> Result<MultiEstimate> {
        let n = rows.len();
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); k];
        for r in rows {
            if let Some(o) = r? {
                for (c, v) in cols.iter_mut().zip(o) {
                    c.push(v);
                }
            }
        }
        let m = cols.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::NumericOverflow("no valid paths".into()));
        }
        let means: Vec<f64> = cols.iter().map(|c| math::pairwise_sum(c) / m as f64).collect();
        let mut covariance = vec![0.0; k * k];
        let mut buf = vec![0.0; m];
        for i in 0..k {
            for j in i..k {
                for (b, (a, c)) in buf.iter_mut().zip(cols[i].iter().zip(&cols[j])) {
                    *b = (a - means[i]) * (c - means[j]);
                }
                let c = if m > 1 { math::pairwise_sum(&buf) / ((m - 1) as f64 * m as f64) } else { 0.0 };
                covariance[i * k + j] = c;
                covariance[j * k + i] = c;
            }
        }
        let estimates = (0..k).map(|i| self.estimate(means[i], math::sqrt(covariance[i * k + i]), m)).collect();
        Ok(MultiEstimate { estimates, covariance })
    }
}

#[inline]
fn discount(r: f64, s: f64) -> f64 {
    math::exp(-r * s)
}

/// `(∂_k X)` column `k` dotted with `v`.
#[inline]
fn dot_col(v: &[f64], flow: &[f64], d: usize, k: usize) -> f64 {
    (0..d).map(|j| v[j] * flow[j * d + k]).sum()
}

/// `v(t,x) ≈ E[∫_0^τ e^{-rs} h ds + 1{τ<T-t} e^{-rτ} f + 1{τ=T-t} e^{-r(T-t)} g]`.
pub fn estimate_value(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
) -> Result<Estimate> {
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    let r = spec.kill_rate();
    #[derive(Default)]
    struct S {
        run: Trapezoid,
        end: f64,
    }
    let w = ctx.walker(false);
    let m = ctx.sample(
        &w,
        1,
        |s: &mut S, pt| {
            let disc = discount(r, pt.s);
            s.run.push(pt.h_prev, disc * spec.h(pt.t, pt.x));
            s.end = match pt.event {
                Event::Running => 0.0,
                Event::Stopped => disc * spec.f(pt.t, pt.x),
                Event::Terminal => disc * spec.g(pt.x),
            };
        },
        |s, _, o| o[0] = s.run.sum + s.end,
    )?;
    Ok(m.estimates.into_iter().next().unwrap())
}

/// All components of `∇v(t,x)` from the pathwise representation
/// `E[∫ e^{-rs}⟨∇h, ∂_k X⟩ + 1{τ<T-t} e^{-rτ}⟨∇f, ∂_k X_τ⟩ + 1{τ=T-t} e^{-r(T-t)}⟨∇g, ∂_k X_{T-t}⟩]`.
pub fn estimate_gradient(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
) -> Result<MultiEstimate> {
    spec.require(&[Piece::RunningGradient, Piece::ObstacleGradient, Piece::TerminalGradient])?;
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    let d = spec.dim();
    let r = spec.kill_rate();
    #[derive(Default)]
    struct S {
        run: [Trapezoid; MAX_DIM],
        end: [f64; MAX_DIM],
    }
    let w = ctx.walker(true);
    ctx.sample(
        &w,
        d,
        |s: &mut S, pt| {
            let disc = discount(r, pt.s);
            let mut g = [0.0; MAX_DIM];
            spec.grad_h(pt.t, pt.x, &mut g[..d]);
            for k in 0..d {
                s.run[k].push(pt.h_prev, disc * dot_col(&g, pt.flow, d, k));
            }
            match pt.event {
                Event::Running => {}
                Event::Stopped => spec.grad_f(pt.t, pt.x, &mut g[..d]),
                Event::Terminal => spec.grad_g(pt.x, &mut g[..d]),
            }
            if pt.event != Event::Running {
                for k in 0..d {
                    s.end[k] = disc * dot_col(&g, pt.flow, d, k);
                }
            }
        },
        |s, _, o| {
            for k in 0..d {
                o[k] = s.run[k].sum + s.end[k];
            }
        },
    )
}

/// Component `k` of [`estimate_gradient`].
pub fn estimate_grad_v(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
    k: usize,
) -> Result<Estimate> {
    if k >= spec.dim() {
        return Err(Error::Parameter("axis out of range".into()));
    }
    Ok(estimate_gradient(spec, t, x, boundary, settings)?.estimates.swap_remove(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundTarget {
    /// Bounds on `∂_t v`.
    Value,
    /// Bounds on `∂_t w`, `w = v − f`.
    Excess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBounds {
    pub lower: Estimate,
    pub upper: Estimate,
    /// Sharper upper bound `E[∫ e^{-rs}∂_t h + e^{-rτ}∂_t f(t+τ, X_τ)]`, valid when
    /// `g = f(T, ·)` (value target only).
    pub tightened_upper: Option<Estimate>,
    /// Joint standard error of `upper − lower`.
    pub gap_std_error: f64,
}

/// Pathwise sandwich bounds on the time derivative of `v` or of `w`.
pub fn estimate_time_bounds(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
    target: BoundTarget,
) -> Result<TimeBounds> {
    if spec.horizon() == Horizon::Infinite {
        return Err(Error::Unsupported("time-derivative bounds need a finite horizon".into()));
    }
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    let r = spec.kill_rate();
    let tight = target == BoundTarget::Value && spec.terminal_is_obstacle();
    let w = ctx.walker(false);
    let m = match target {
        BoundTarget::Value => {
            spec.require(&[
                Piece::RunningTimeDerivative,
                Piece::ObstacleTimeDerivative,
                Piece::TerminalGradient,
                Piece::TerminalHessian,
            ])?;
            #[derive(Default)]
            struct S {
                run: Trapezoid,
                upper_end: f64,
                lower_end: f64,
                tight_end: f64,
            }
            ctx.sample(
                &w,
                3,
                |s: &mut S, pt| {
                    let disc = discount(r, pt.s);
                    s.run.push(pt.h_prev, disc * spec.dt_h(pt.t, pt.x));
                    match pt.event {
                        Event::Running => {}
                        Event::Stopped => {
                            let v = disc * spec.dt_f(pt.t, pt.x);
                            s.upper_end = v;
                            s.lower_end = v;
                            s.tight_end = v;
                        }
                        Event::Terminal => {
                            let a = spec.h(pt.t, pt.x) + spec.n(pt.x);
                            let ft = spec.dt_f(pt.t, pt.x);
                            s.upper_end = -disc * a;
                            s.lower_end = -disc * (a.abs() + ft.abs());
                            s.tight_end = disc * ft;
                        }
                    }
                },
                |s, _, o| {
                    o[0] = s.run.sum + s.lower_end;
                    o[1] = s.run.sum + s.upper_end;
                    o[2] = s.run.sum + s.tight_end;
                },
            )?
        }
        BoundTarget::Excess => {
            spec.require(&[Piece::GeneratorPartials, Piece::ObstacleTimeDerivative])?;
            #[derive(Default)]
            struct S {
                run: Trapezoid,
                term: f64,
            }
            let d = spec.dim();
            ctx.sample(
                &w,
                2,
                |s: &mut S, pt| {
                    let disc = discount(r, pt.s);
                    let mut g = [0.0; MAX_DIM];
                    s.run.push(pt.h_prev, disc * spec.hm_partials(pt.t, pt.x, &mut g[..d]));
                    if pt.event == Event::Terminal {
                        s.term = disc * (spec.h(pt.t, pt.x) + spec.dt_f(pt.t, pt.x) + spec.n(pt.x));
                    }
                },
                |s, _, o| {
                    o[0] = s.run.sum - s.term.abs();
                    o[1] = s.run.sum - s.term;
                },
            )?
        }
    };
    let gap_std_error = m.diff_std_error(1, 0);
    let mut it = m.estimates.into_iter();
    let lower = it.next().unwrap();
    let upper = it.next().unwrap();
    Ok(TimeBounds { lower, upper, tightened_upper: if tight { it.next() } else { None }, gap_std_error })
}

/// `w°_k` for every `k`, followed by `w̄` and `w̲` (finite horizon only), all from
/// the same paths. Index layout: `0..d` are `w°_1..w°_d`, then `d` is `w̄` and
/// `d+1` is `w̲`.
pub fn estimate_excess_functionals(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
) -> Result<MultiEstimate> {
    spec.require(&[Piece::GeneratorPartials, Piece::TerminalGradient, Piece::ObstacleGradient])?;
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    let d = spec.dim();
    let r = spec.kill_rate();
    let finite = spec.horizon() != Horizon::Infinite;
    let k_out = if finite { d + 2 } else { d };
    #[derive(Default)]
    struct S {
        run: [Trapezoid; MAX_DIM],
        term: [f64; MAX_DIM],
        dt_run: Trapezoid,
        dt_term: f64,
    }
    let w = ctx.walker(true);
    ctx.sample(
        &w,
        k_out,
        |s: &mut S, pt| {
            let disc = discount(r, pt.s);
            let mut g = [0.0; MAX_DIM];
            let dt = spec.hm_partials(pt.t, pt.x, &mut g[..d]);
            for k in 0..d {
                s.run[k].push(pt.h_prev, disc * dot_col(&g, pt.flow, d, k));
            }
            s.dt_run.push(pt.h_prev, disc * dt);
            if pt.event == Event::Terminal {
                let mut gf = [0.0; MAX_DIM];
                spec.grad_g(pt.x, &mut g[..d]);
                spec.grad_f(pt.t, pt.x, &mut gf[..d]);
                for j in 0..d {
                    g[j] -= gf[j];
                }
                for k in 0..d {
                    s.term[k] = disc * dot_col(&g, pt.flow, d, k);
                }
                if finite {
                    s.dt_term = disc * (spec.h(pt.t, pt.x) + spec.dt_f(pt.t, pt.x) + spec.n(pt.x));
                }
            }
        },
        |s, _, o| {
            for k in 0..d {
                o[k] = s.run[k].sum + s.term[k];
            }
            if finite {
                o[d] = s.dt_run.sum - s.dt_term;
                o[d + 1] = s.dt_run.sum - s.dt_term.abs();
            }
        },
    )
}

/// `w°_k(t,x)` for every `k`.
pub fn estimate_wcirc(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
) -> Result<MultiEstimate> {
    let mut m = estimate_excess_functionals(spec, t, x, boundary, settings)?;
    let d = spec.dim();
    if m.len() > d {
        let k = m.len();
        m.estimates.truncate(d);
        m.covariance = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| m.covariance[i * k + j]).collect();
    }
    Ok(m)
}

/// `(ŵ, φ)` for one-dimensional problems: `ŵ = E[∫_0^τ e^{∫_0^s (μ'(X_u) − r) du} ∂_x(h+m) ds]`
/// and `φ = E[τ]`.
pub fn estimate_what_phi(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
) -> Result<(Estimate, Estimate)> {
    if spec.dim() != 1 {
        return Err(Error::Unsupported("ŵ is defined for one-dimensional problems only".into()));
    }
    spec.require(&[Piece::GeneratorPartials])?;
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    let r = spec.kill_rate();
    #[derive(Default)]
    struct S {
        run: Trapezoid,
        tau: f64,
    }
    let w = ctx.walker(false);
    let m = ctx.sample(
        &w,
        2,
        |s: &mut S, pt| {
            let mut g = [0.0; 1];
            spec.hm_partials(pt.t, pt.x, &mut g);
            s.run.push(pt.h_prev, math::exp(pt.mu_exponent - r * pt.s) * g[0]);
            s.tau = pt.s;
        },
        |s, _, o| {
            o[0] = s.run.sum;
            o[1] = s.tau;
        },
    )?;
    let mut it = m.estimates.into_iter();
    Ok((it.next().unwrap(), it.next().unwrap()))
}

/// `E[∫_0^τ e^{-κs} ds]` under the settings' measure.
pub fn estimate_occupation(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
    kappa: f64,
) -> Result<Estimate> {
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    #[derive(Default)]
    struct S {
        run: Trapezoid,
    }
    let w = ctx.walker(false);
    let m =
        ctx.sample(&w, 1, |s: &mut S, pt| s.run.push(pt.h_prev, math::exp(-kappa * pt.s)), |s, _, o| o[0] = s.run.sum)?;
    Ok(m.estimates.into_iter().next().unwrap())
}

/// `E^Q[∫_0^τ e^{-κs} ds]` for the measure `Q` with kernel `eta`, computed both by
/// reweighting `P`-paths and by simulating the shifted drift, on common random
/// numbers. Outputs `[reweighted, shifted]`; `diff_std_error(0, 1)` is the joint SE.
pub fn estimate_occupation_paired(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
    kappa: f64,
    eta: &[f64],
) -> Result<MultiEstimate> {
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    if eta.len() != spec.dim() {
        return Err(Error::Parameter("measure change kernel has the wrong dimension".into()));
    }
    let modes = [
        MeasureChange { eta: eta.to_vec(), mode: MeasureMode::Reweight },
        MeasureChange { eta: eta.to_vec(), mode: MeasureMode::ShiftedDrift },
    ];
    let walkers: Vec<Walker<'_>> = modes
        .iter()
        .map(|m| {
            let mut w = ctx.walker(false);
            w.measure = Some(m);
            w
        })
        .collect();
    let rows = par::map(settings.n_paths, |p| -> Result<Option<Vec<f64>>> {
        let mut o = vec![0.0; 2];
        for (i, w) in walkers.iter().enumerate() {
            let mut run = Trapezoid::default();
            let mut lw = 0.0;
            let out = w.run(p as u64, x, |pt| {
                lw = pt.log_weight;
                run.push(pt.h_prev, math::exp(-kappa * pt.s));
            })?;
            if !out.valid {
                return Ok(None);
            }
            o[i] = run.sum * math::exp(lw);
        }
        Ok(o.iter().all(|v| v.is_finite()).then_some(o))
    });
    ctx.aggregate(rows, 2)
}

/// Value, gradient and time-derivative bounds from a single set of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationSet {
    pub value: Estimate,
    pub gradient: Vec<Estimate>,
    /// `(v̲, v̄)`; absent for infinite horizons.
    pub time_bounds: Option<TimeBounds>,
}

/// [`estimate_value`], [`estimate_gradient`] and the value-target
/// [`estimate_time_bounds`] in one pass.
pub fn estimate_representations(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    settings: &McSettings,
) -> Result<RepresentationSet> {
    spec.require(&[Piece::RunningGradient, Piece::ObstacleGradient, Piece::TerminalGradient])?;
    let finite = spec.horizon() != Horizon::Infinite;
    if finite {
        spec.require(&[
            Piece::RunningTimeDerivative,
            Piece::ObstacleTimeDerivative,
            Piece::TerminalGradient,
            Piece::TerminalHessian,
        ])?;
    }
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    let d = spec.dim();
    let r = spec.kill_rate();
    #[derive(Default)]
    struct S {
        value: Trapezoid,
        value_end: f64,
        grad: [Trapezoid; MAX_DIM],
        grad_end: [f64; MAX_DIM],
        dt: Trapezoid,
        lower_end: f64,
        upper_end: f64,
        tight_end: f64,
    }
    let w = ctx.walker(true);
    let m = ctx.sample(
        &w,
        d + 4,
        |s: &mut S, pt| {
            let disc = discount(r, pt.s);
            let mut g = [0.0; MAX_DIM];
            s.value.push(pt.h_prev, disc * spec.h(pt.t, pt.x));
            spec.grad_h(pt.t, pt.x, &mut g[..d]);
            for k in 0..d {
                s.grad[k].push(pt.h_prev, disc * dot_col(&g, pt.flow, d, k));
            }
            if finite {
                s.dt.push(pt.h_prev, disc * spec.dt_h(pt.t, pt.x));
            }
            match pt.event {
                Event::Running => return,
                Event::Stopped => {
                    s.value_end = disc * spec.f(pt.t, pt.x);
                    spec.grad_f(pt.t, pt.x, &mut g[..d]);
                    if finite {
                        let v = disc * spec.dt_f(pt.t, pt.x);
                        s.lower_end = v;
                        s.upper_end = v;
                        s.tight_end = v;
                    }
                }
                Event::Terminal => {
                    s.value_end = disc * spec.g(pt.x);
                    spec.grad_g(pt.x, &mut g[..d]);
                    if finite {
                        let a = spec.h(pt.t, pt.x) + spec.n(pt.x);
                        let ft = spec.dt_f(pt.t, pt.x);
                        s.upper_end = -disc * a;
                        s.lower_end = -disc * (a.abs() + ft.abs());
                        s.tight_end = disc * ft;
                    }
                }
            }
            for k in 0..d {
                s.grad_end[k] = disc * dot_col(&g, pt.flow, d, k);
            }
        },
        |s, _, o| {
            o[0] = s.value.sum + s.value_end;
            for k in 0..d {
                o[1 + k] = s.grad[k].sum + s.grad_end[k];
            }
            o[d + 1] = s.dt.sum + s.lower_end;
            o[d + 2] = s.dt.sum + s.upper_end;
            o[d + 3] = s.dt.sum + s.tight_end;
        },
    )?;
    let time_bounds = finite.then(|| TimeBounds {
        lower: m.estimates[d + 1].clone(),
        upper: m.estimates[d + 2].clone(),
        tightened_upper: spec.terminal_is_obstacle().then(|| m.estimates[d + 3].clone()),
        gap_std_error: m.diff_std_error(d + 2, d + 1),
    });
    Ok(RepresentationSet { value: m.estimates[0].clone(), gradient: m.estimates[1..=d].to_vec(), time_bounds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleProfile {
    /// Elapsed times `s` at which `Y` is observed.
    pub checkpoints: Vec<f64>,
    /// `E[Y_{s∧τ}]` per checkpoint, with joint covariance.
    pub values: MultiEstimate,
    /// `max_s |E[Y_s] − E[Y_0]| / SE(Y_s − Y_0)`.
    pub max_deviation_se: f64,
    /// Paths that left the surface's box; their `v̂` is taken at the nearest box point.
    pub clamped_paths: usize,
}

impl MartingaleProfile {
    pub fn holds(&self, n_se: f64) -> bool {
        self.max_deviation_se <= n_se
    }
}

/// `E[Y_{s∧τ}]` for `Y_u = e^{-ru} v̂(t+u, X_u) + ∫_0^u e^{-rq} h dq`, where `v̂` is
/// the solved surface, at each checkpoint `s` (elapsed time since `t`).
pub fn martingale_profile(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    boundary: &BoundarySurface,
    surface: &ValueSurface,
    settings: &McSettings,
    checkpoints: &[f64],
) -> Result<MartingaleProfile> {
    let ctx = Ctx::new(spec, t, x, boundary, settings)?;
    if checkpoints.is_empty() || checkpoints.iter().any(|s| !(*s >= 0.0 && t + s <= spec.effective_horizon())) {
        return Err(Error::Parameter("checkpoints must lie in [0, T - t]".into()));
    }
    let nodes: Vec<usize> =
        checkpoints.iter().map(|s| (math::floor(s / settings.dt + 0.5) as usize).min(ctx.grid.n_steps)).collect();
    let k = nodes.len();
    if k > 16 {
        return Err(Error::Parameter("at most 16 checkpoints".into()));
    }
    let r = spec.kill_rate();
    let d = spec.dim();
    let clamp = |y: &mut [f64]| -> bool {
        let mut moved = false;
        for a in &surface.grid.axes {
            let c = y[a.coord].clamp(a.lo, a.hi);
            moved |= c != y[a.coord];
            y[a.coord] = c;
        }
        moved
    };
    let eval = |tt: f64, xx: &[f64]| -> (f64, bool) {
        let mut y = [0.0; MAX_DIM];
        y[..d].copy_from_slice(xx);
        let moved = clamp(&mut y[..d]);
        (surface.value_at(tt, &y[..d]).unwrap_or(f64::NAN), moved)
    };
    #[derive(Default)]
    struct S {
        run: Trapezoid,
        y: [f64; 16],
        filled: usize,
        clamped: bool,
    }
    let mut w = ctx.walker(false);
    w.last_node = nodes.iter().copied().max();
    let clamped = core::sync::atomic::AtomicUsize::new(0);
    let m = ctx.sample(
        &w,
        k,
        |s: &mut S, pt| {
            let disc = discount(r, pt.s);
            s.run.push(pt.h_prev, disc * spec.h(pt.t, pt.x));
            let at_checkpoint = nodes.contains(&pt.step);
            let stopped = pt.event != Event::Running;
            if at_checkpoint || stopped {
                let (v, moved) = eval(pt.t, pt.x);
                s.clamped |= moved;
                let y = disc * v + s.run.sum;
                for (c, &n) in nodes.iter().enumerate() {
                    if n == pt.step || (stopped && n > pt.step) {
                        s.y[c] = y;
                        s.filled |= 1 << c;
                    }
                }
            }
        },
        |s, _, o| {
            if s.clamped {
                clamped.fetch_add(1, core::sync::atomic::Ordering::Relaxed);
            }
            o.copy_from_slice(&s.y[..o.len()]);
        },
    )?;
    let mut worst: f64 = 0.0;
    for c in 1..k {
        let se = m.diff_std_error(c, 0);
        let dev = (m.mean(c) - m.mean(0)).abs();
        worst = worst.max(if se > 0.0 {
            dev / se
        } else if dev > 1e-12 {
            f64::INFINITY
        } else {
            0.0
        });
    }
    Ok(MartingaleProfile {
        checkpoints: checkpoints.to_vec(),
        values: m,
        max_deviation_se: worst,
        clamped_paths: clamped.into_inner(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Orientation, Payoff};

    fn martingale_obstacle(d: usize, a: Vec<f64>) -> ProblemSpec {
        let mut sigma = vec![0.0; d * d];
        for i in 0..d {
            sigma[i * d + i] = 1.0;
        }
        ProblemSpec::builder(d)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0; d])
            .sigma(sigma)
            .obstacle(Payoff::linear(a.clone(), 0.0))
            .terminal(Payoff::linear(a, 0.0))
            .build()
            .unwrap()
    }

    #[test]
    fn immediate_stop_returns_obstacle() {
        let spec = martingale_obstacle(1, vec![2.0]);
        let b = BoundarySurface::constant(f64::INFINITY, Orientation::StopBelow, 0.0, 1.0, 0);
        let e = estimate_value(&spec, 0.2, &[0.7], &b, &McSettings::new(100, 0.01, 1)).unwrap();
        assert_eq!(e.mean, 1.4);
        assert_eq!(e.std_error, 0.0);
        let g = estimate_grad_v(&spec, 0.2, &[0.7], &b, &McSettings::new(100, 0.01, 1), 0).unwrap();
        assert_eq!(g.mean, 2.0);
    }

    #[test]
    fn martingale_obstacle_value_and_gradient() {
        let a = vec![1.5, -0.5];
        let spec = martingale_obstacle(2, a.clone());
        let b = BoundarySurface::constant(-0.3, Orientation::StopBelow, 0.0, 1.0, 1);
        let s = McSettings::new(20_000, 0.01, 3);
        let v = estimate_value(&spec, 0.0, &[0.1, 0.2], &b, &s).unwrap();
        assert!((v.mean - 0.05).abs() < 3.0 * v.std_error + 1e-12, "{v:?}");
        let g = estimate_gradient(&spec, 0.0, &[0.1, 0.2], &b, &s).unwrap();
        for k in 0..2 {
            assert!((g.mean(k) - a[k]).abs() < 3.0 * g.estimates[k].std_error + 1e-12);
        }
    }

    #[test]
    fn sandwich_is_ordered_pathwise() {
        let spec = martingale_obstacle(1, vec![1.0]);
        let b = BoundarySurface::constant(-0.5, Orientation::StopBelow, 0.0, 1.0, 0);
        let tb =
            estimate_time_bounds(&spec, 0.0, &[0.0], &b, &McSettings::new(2000, 0.01, 5), BoundTarget::Value).unwrap();
        assert!(tb.lower.mean <= tb.upper.mean);
    }

    #[test]
    fn deterministic_tau_gives_full_phi() {
        let spec = ProblemSpec::builder(1)
            .finite_horizon(2.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .running(Payoff::linear(vec![1.0], 0.0))
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .generator_partials(|_, _, g| {
                g[0] = 1.0;
                0.0
            })
            .build()
            .unwrap();
        let never = BoundarySurface::constant(f64::NEG_INFINITY, Orientation::StopBelow, 0.0, 2.0, 0);
        let (_, phi) = estimate_what_phi(&spec, 0.5, &[0.0], &never, &McSettings::new(50, 0.1, 1)).unwrap();
        assert!((phi.mean - 1.5).abs() < 1e-12);
        assert_eq!(phi.std_error, 0.0);
        let always = BoundarySurface::constant(f64::INFINITY, Orientation::StopBelow, 0.0, 2.0, 0);
        let (what, phi) = estimate_what_phi(&spec, 0.5, &[0.0], &always, &McSettings::new(50, 0.1, 1)).unwrap();
        assert_eq!((what.mean, phi.mean), (0.0, 0.0));
    }

    #[test]
    fn identity_measure_change_is_neutral() {
        let spec = martingale_obstacle(1, vec![1.0]);
        let b = BoundarySurface::constant(-0.5, Orientation::StopBelow, 0.0, 1.0, 0);
        let plain = McSettings::new(500, 0.01, 8);
        let id = plain.clone().with_measure(MeasureChange::identity(1));
        let a = estimate_value(&spec, 0.0, &[0.0], &b, &plain).unwrap();
        let c = estimate_value(&spec, 0.0, &[0.0], &b, &id).unwrap();
        assert_eq!(a.mean, c.mean);
    }

    #[test]
    fn missing_generator_partials_are_reported() {
        let spec = martingale_obstacle(1, vec![1.0]);
        let b = BoundarySurface::constant(-0.5, Orientation::StopBelow, 0.0, 1.0, 0);
        let err = estimate_wcirc(&spec, 0.0, &[0.0], &b, &McSettings::new(10, 0.1, 1)).unwrap_err();
        assert!(matches!(err, Error::MissingDerivative(_)));
    }
}

//! Obstacle problem `max(∂_t v + Lv − rv + h, f − v) = 0`, `v(T) = g`, on a tensor
//! grid with one or two active space axes, solved backward in time by a θ-scheme
//! with projected SOR on every slice.
//!
//! Coordinates that are not grid axes are frozen at fixed values; they must be
//! inert (zero drift and zero noise), so they act as parameters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::MAX_DIM;
use crate::problem::{Orientation, ProblemSpec, Truncation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    /// Index of the state coordinate this axis discretises.
    pub coord: usize,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(coord: usize, lo: f64, hi: f64, n: usize) -> Self {
        Self { coord, lo, hi, n }
    }

    #[inline]
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.node(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub t0: f64,
    pub t_end: f64,
    /// Number of time steps; there are `n_t + 1` time slices.
    pub n_t: usize,
    /// One or two active axes; the first always discretises `x1`.
    pub axes: Vec<Axis>,
    /// `(coordinate, value)` for every coordinate that is not an axis.
    pub frozen: Vec<(usize, f64)>,
}

impl Grid {
    pub fn new_1d(t0: f64, t_end: f64, n_t: usize, x1: (f64, f64, usize)) -> Self {
        Self { t0, t_end, n_t, axes: vec![Axis::new(0, x1.0, x1.1, x1.2)], frozen: Vec::new() }
    }

    pub fn new_2d(t0: f64, t_end: f64, n_t: usize, x1: (f64, f64, usize), second: Axis) -> Self {
        Self { t0, t_end, n_t, axes: vec![Axis::new(0, x1.0, x1.1, x1.2), second], frozen: Vec::new() }
    }

    pub fn with_frozen(mut self, coord: usize, value: f64) -> Self {
        self.frozen.push((coord, value));
        self
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_t as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_t {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_t).map(|k| self.time(k)).collect()
    }

    pub fn dim(&self) -> usize {
        self.axes.len() + self.frozen.len()
    }

    /// `(n along x1, n along the second axis or 1)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.axes[0].n, self.axes.get(1).map_or(1, |a| a.n))
    }

    pub fn nodes_per_slice(&self) -> usize {
        let (a, b) = self.shape();
        a * b
    }

    /// Same grid with time and space steps halved.
    pub fn refined(&self) -> Self {
        let mut g = self.clone();
        g.n_t *= 2;
        for a in &mut g.axes {
            a.n = 2 * a.n - 1;
        }
        g
    }

    /// Writes the state point of node `(i, j)` into `x`.
    pub fn point(&self, i: usize, j: usize, x: &mut [f64]) {
        x[self.axes[0].coord] = self.axes[0].node(i);
        if let Some(b) = self.axes.get(1) {
            x[b.coord] = b.node(j);
        }
        for &(c, v) in &self.frozen {
            x[c] = v;
        }
    }

    fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        let d = spec.dim();
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(Error::Grid("one or two active axes are supported".into()));
        }
        if self.axes[0].coord != 0 {
            return Err(Error::Grid("the first axis must discretise x1".into()));
        }
        let mut seen = [false; MAX_DIM];
        for c in self.axes.iter().map(|a| a.coord).chain(self.frozen.iter().map(|f| f.0)) {
            if c >= d || seen[c] {
                return Err(Error::Grid(format!("coordinate {c} out of range or assigned twice")));
            }
            seen[c] = true;
        }
        if self.dim() != d {
            return Err(Error::Grid(format!("grid covers {} of {d} coordinates", self.dim())));
        }
        for a in &self.axes {
            if a.n < 3 || !(a.lo < a.hi) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::Grid(format!("axis for x{} needs n >= 3 and lo < hi", a.coord + 1)));
            }
        }
        if self.n_t == 0 || !(self.t0 < self.t_end) || self.t0 < 0.0 {
            return Err(Error::Grid("time axis needs n_t >= 1 and 0 <= t0 < t_end".into()));
        }
        if (self.t_end - spec.effective_horizon()).abs() > 1e-9 * (1.0 + self.t_end) {
            return Err(Error::Grid(format!("grid must end at the (effective) horizon {}", spec.effective_horizon())));
        }
        let sigma = spec.sigma();
        for &(c, _) in &self.frozen {
            if sigma[c * d..(c + 1) * d].iter().any(|s| *s != 0.0) {
                return Err(Error::Grid(format!("frozen coordinate x{} has noise", c + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// 1 = fully implicit, 0.5 = Crank–Nicolson, 0 = explicit.
    pub theta: f64,
    pub omega: f64,
    /// Largest PSOR update accepted as converged, relative to `1 + max|v|` on the slice.
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { theta: 1.0, omega: 1.5, tol: 1e-10, max_sweeps: 10_000 }
    }
}

/// Solved value function on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSurface {
    pub grid: Grid,
    /// `[time][i][j]` with `i` along x1.
    pub v: Vec<f64>,
    /// `v − f`.
    pub w: Vec<f64>,
    pub settings: SolverSettings,
    /// PSOR sweeps per slice (index = time slice; the terminal slice needs none).
    pub sweeps: Vec<usize>,
    /// Interior nodes where the drift was upwinded because central differencing
    /// would lose monotonicity.
    pub upwind_nodes: usize,
    pub orientation: Orientation,
    pub truncation: Option<Truncation>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Continuation,
    Stopping,
    /// Box face, where `v = f` is imposed rather than solved for.
    Face,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub tol: f64,
    /// Same layout as [`ValueSurface::v`].
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdDerivatives {
    pub dt: f64,
    /// `∂_k v` for active coordinates, `None` for frozen ones.
    pub grad: Vec<Option<f64>>,
}

/// Coefficients of the discrete generator `L_h` at one node, on the 3×3 patch
/// indexed `(di+1)*3 + (dj+1)`.
type Stencil = [f64; 9];

fn build_stencils(spec: &ProblemSpec, grid: &Grid) -> Result<(Vec<Stencil>, usize)> {
    let d = spec.dim();
    let (na, nb) = grid.shape();
    let a = spec.diffusion();
    let ax = grid.axes[0];
    let ca = ax.coord;
    let da = ax.step();
    let second = grid.axes.get(1).copied();
    let mut st = vec![[0.0; 9]; na * nb];
    let mut upwind = 0;
    let mut x = [0.0; MAX_DIM];
    let mut mu = [0.0; MAX_DIM];
    for i in 0..na {
        for j in 0..nb {
            grid.point(i, j, &mut x[..d]);
            spec.drift(&x[..d], &mut mu[..d]);
            for &(c, _) in &grid.frozen {
                if mu[c] != 0.0 {
                    return Err(Error::Grid(format!("frozen coordinate x{} has nonzero drift", c + 1)));
                }
            }
            let on_face = i == 0 || i + 1 == na || (nb > 1 && (j == 0 || j + 1 == nb));
            if on_face {
                continue;
            }
            let s = &mut st[i * nb + j];
            let mut axis_terms = |s: &mut Stencil, m: f64, aii: f64, h: f64, stride: usize| {
                // stride 3 moves along x1, 1 along the second axis
                let diff = 0.5 * aii / (h * h);
                s[4 - stride] += diff;
                s[4 + stride] += diff;
                s[4] -= 2.0 * diff;
                if m.abs() * h > aii {
                    upwind += 1;
                    if m > 0.0 {
                        s[4 + stride] += m / h;
                        s[4] -= m / h;
                    } else {
                        s[4 - stride] -= m / h;
                        s[4] += m / h;
                    }
                } else {
                    s[4 + stride] += 0.5 * m / h;
                    s[4 - stride] -= 0.5 * m / h;
                }
            };
            axis_terms(s, mu[ca], a[ca * d + ca], da, 3);
            if let Some(bx) = second {
                let cb = bx.coord;
                let db = bx.step();
                axis_terms(s, mu[cb], a[cb * d + cb], db, 1);
                let cross = a[ca * d + cb] / (4.0 * da * db);
                s[8] += cross;
                s[0] += cross;
                s[2] -= cross;
                s[6] -= cross;
            }
        }
    }
    Ok((st, upwind))
}

/// Largest explicit step keeping the scheme monotone.
fn explicit_step_limit(stencils: &[Stencil], r: f64) -> f64 {
    let worst = stencils.iter().map(|s| -s[4]).fold(0.0f64, f64::max) + r;
    if worst > 0.0 {
        1.0 / worst
    } else {
        f64::INFINITY
    }
}

/// Solves the obstacle problem on `grid`.
pub fn solve_vi(spec: &ProblemSpec, grid: &Grid, settings: &SolverSettings) -> Result<ValueSurface> {
    grid.validate(spec)?;
    if !(0.0..=1.0).contains(&settings.theta) || !(settings.omega > 0.0 && settings.omega < 2.0) {
        return Err(Error::Parameter("need θ in [0,1] and ω in (0,2)".into()));
    }
    let d = spec.dim();
    let (na, nb) = grid.shape();
    let np = na * nb;
    let (stencils, upwind_nodes) = build_stencils(spec, grid)?;
    let dt = grid.dt();
    let r = spec.kill_rate();
    let theta = settings.theta;
    if theta < 1.0 {
        let limit = explicit_step_limit(&stencils, r);
        if theta == 0.0 && dt > limit {
            return Err(Error::Cfl { dt, required: limit });
        }
    }

    // Active neighbour offsets into the slice vector.
    let offsets: Vec<(usize, isize)> = (0..9)
        .filter(|&o| o != 4 && (nb > 1 || o % 3 == 1))
        .map(|o| (o, (o as isize / 3 - 1) * nb as isize + (o as isize % 3 - 1)))
        .collect();
    let is_face = |p: usize| {
        let (i, j) = (p / nb, p % nb);
        i == 0 || i + 1 == na || (nb > 1 && (j == 0 || j + 1 == nb))
    };
    let interior: Vec<usize> = (0..np).filter(|&p| !is_face(p)).collect();

    let eval_slice = |t: f64, terminal: bool, f_out: &mut [f64], h_out: &mut [f64]| {
        let mut x = [0.0; MAX_DIM];
        for p in 0..np {
            grid.point(p / nb, p % nb, &mut x[..d]);
            f_out[p] = if terminal { spec.g(&x[..d]) } else { spec.f(t, &x[..d]) };
            h_out[p] = spec.h(t, &x[..d]);
        }
    };

    let n_t = grid.n_t;
    let mut v = vec![0.0; (n_t + 1) * np];
    let mut w = vec![0.0; (n_t + 1) * np];
    let mut sweeps = vec![0; n_t + 1];
    let mut f_next = vec![0.0; np];
    let mut h_next = vec![0.0; np];
    let mut f_cur = vec![0.0; np];
    let mut h_cur = vec![0.0; np];
    let mut rhs = vec![0.0; np];

    let t_end = grid.time(n_t);
    eval_slice(t_end, true, &mut f_next, &mut h_next);
    v[n_t * np..].copy_from_slice(&f_next);
    // w at T is g − f(T, ·)
    {
        let mut x = [0.0; MAX_DIM];
        let mut obst = vec![0.0; np];
        for p in 0..np {
            grid.point(p / nb, p % nb, &mut x[..d]);
            obst[p] = spec.f(t_end, &x[..d]);
        }
        for p in 0..np {
            w[n_t * np + p] = f_next[p] - obst[p];
        }
    }

    for k in (0..n_t).rev() {
        let t = grid.time(k);
        eval_slice(t, false, &mut f_cur, &mut h_cur);
        let (head, tail) = v.split_at_mut((k + 1) * np);
        let cur = &mut head[k * np..];
        let next = &tail[..np];
        for &p in &interior {
            let s = &stencils[p];
            let mut lv = (s[4] - r) * next[p];
            for &(o, off) in &offsets {
                lv += s[o] * next[(p as isize + off) as usize];
            }
            rhs[p] = next[p] + dt * (theta * h_cur[p] + (1.0 - theta) * (lv + h_next[p]));
        }
        for p in 0..np {
            cur[p] = if is_face(p) { f_cur[p] } else { next[p].max(f_cur[p]) };
        }
        let scale = 1.0 + next.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut done = false;
        let mut residual = f64::INFINITY;
        for sweep in 1..=settings.max_sweeps {
            residual = 0.0;
            for &p in &interior {
                let s = &stencils[p];
                let diag = 1.0 + theta * dt * (r - s[4]);
                let mut acc = rhs[p];
                for &(o, off) in &offsets {
                    acc += theta * dt * s[o] * cur[(p as isize + off) as usize];
                }
                let old = cur[p];
                let new = (old + settings.omega * (acc / diag - old)).max(f_cur[p]);
                residual = residual.max((new - old).abs());
                cur[p] = new;
            }
            if !residual.is_finite() {
                break;
            }
            if residual < settings.tol * scale {
                sweeps[k] = sweep;
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::PsorDivergence { slice: k, residual });
        }
        for p in 0..np {
            w[k * np + p] = cur[p] - f_cur[p];
        }
        core::mem::swap(&mut f_next, &mut f_cur);
        core::mem::swap(&mut h_next, &mut h_cur);
    }

    let mut surface = ValueSurface {
        grid: grid.clone(),
        v,
        w,
        settings: *settings,
        sweeps,
        upwind_nodes,
        orientation: spec.orientation(),
        truncation: spec.truncation(),
        warnings: Vec::new(),
    };
    if upwind_nodes > 0 {
        surface.warnings.push(format!("drift upwinded at {upwind_nodes} nodes (first order there)"));
    }
    surface.face_warnings();
    Ok(surface)
}

impl ValueSurface {
    #[inline]
    pub fn index(&self, k: usize, i: usize, j: usize) -> usize {
        let (na, nb) = self.grid.shape();
        (k * na + i) * nb + j
    }

    pub fn default_tol(&self) -> f64 {
        let scale = self.v.iter().zip(&self.w).map(|(v, w)| (v - w).abs()).fold(0.0, f64::max);
        1e-9 * (1.0 + scale)
    }

    /// Range of `w` over the surface (used to scale level-set heights).
    pub fn w_range(&self) -> f64 {
        let lo = self.w.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    }

    fn face_warnings(&mut self) {
        let (na, nb) = self.grid.shape();
        let tol = self.default_tol();
        let n_t = self.grid.n_t;
        let mut counts = [0usize; 4];
        for k in 0..n_t {
            for j in 0..nb {
                if nb > 1 && (j == 0 || j + 1 == nb) {
                    continue;
                }
                if self.w[self.index(k, 1, j)] > tol {
                    counts[0] += 1;
                }
                if self.w[self.index(k, na - 2, j)] > tol {
                    counts[1] += 1;
                }
            }
            if nb > 1 {
                for i in 1..na - 1 {
                    if self.w[self.index(k, i, 1)] > tol {
                        counts[2] += 1;
                    }
                    if self.w[self.index(k, i, nb - 2)] > tol {
                        counts[3] += 1;
                    }
                }
            }
        }
        let names = ["lower x1 face", "upper x1 face", "lower second-axis face", "upper second-axis face"];
        for (c, name) in counts.iter().zip(names) {
            if *c > 0 {
                self.warnings.push(format!(
                    "{name} borders numerical continuation at {c} nodes; v = f there is artificial, consider widening the box"
                ));
            }
        }
    }

    /// Cell index and right-node weight of `t` on the time axis.
    fn time_cell(&self, t: f64) -> (usize, f64) {
        let g = &self.grid;
        let u = ((t - g.t0) / g.dt()).clamp(0.0, g.n_t as f64);
        let k = (crate::math::floor(u) as usize).min(g.n_t.saturating_sub(1));
        (k, u - k as f64)
    }

    fn space_cell(&self, axis: usize, x: f64) -> Result<(usize, f64)> {
        let a = self.grid.axes[axis];
        let u = (x - a.lo) / a.step();
        if !(u >= 0.0 && u <= (a.n - 1) as f64) {
            return Err(Error::EdgeProximity(format!("x{} = {x} outside [{}, {}]", a.coord + 1, a.lo, a.hi)));
        }
        let i = (crate::math::floor(u) as usize).min(a.n - 2);
        Ok((i, u - i as f64))
    }

    /// Multilinear interpolation of `v` at `(t, x)`; frozen coordinates of `x` are
    /// ignored.
    pub fn value_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.interpolate(&self.v, t, x)
    }

    pub fn excess_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.interpolate(&self.w, t, x)
    }

    fn interpolate(&self, data: &[f64], t: f64, x: &[f64]) -> Result<f64> {
        let (k, wt) = self.time_cell(t);
        let (i, wa) = self.space_cell(0, x[self.grid.axes[0].coord])?;
        let (j, wb) = match self.grid.axes.get(1) {
            Some(b) => self.space_cell(1, x[b.coord])?,
            None => (0, 0.0),
        };
        let nb = self.grid.shape().1;
        let mut acc = 0.0;
        for (dk, fk) in [(0, 1.0 - wt), (1, wt)] {
            for (di, fi) in [(0, 1.0 - wa), (1, wa)] {
                for (dj, fj) in [(0, 1.0 - wb), (1, wb)] {
                    if nb == 1 && dj == 1 {
                        continue;
                    }
                    let wgt = fk * fi * fj;
                    if wgt != 0.0 {
                        acc += wgt * data[self.index((k + dk).min(self.grid.n_t), i + di, j + dj)];
                    }
                }
            }
        }
        Ok(acc)
    }

    fn nodal_dt(&self, k: usize, i: usize, j: usize) -> f64 {
        let n = self.grid.n_t;
        let h = self.grid.dt();
        let v = |k| self.v[self.index(k, i, j)];
        if k == 0 {
            (v(1) - v(0)) / h
        } else if k == n {
            (v(n) - v(n - 1)) / h
        } else {
            (v(k + 1) - v(k - 1)) / (2.0 * h)
        }
    }

    fn nodal_dx(&self, axis: usize, k: usize, i: usize, j: usize) -> f64 {
        let h = self.grid.axes[axis].step();
        if axis == 0 {
            (self.v[self.index(k, i + 1, j)] - self.v[self.index(k, i - 1, j)]) / (2.0 * h)
        } else {
            (self.v[self.index(k, i, j + 1)] - self.v[self.index(k, i, j - 1)]) / (2.0 * h)
        }
    }

    /// Finite-difference `∂_t v` and `∇v` at `(t, x)`: nodal central differences in
    /// space, one-sided in time at the ends, interpolated multilinearly between
    /// nodes.
    pub fn fd_derivatives(&self, t: f64, x: &[f64]) -> Result<FdDerivatives> {
        let (k, wt) = self.time_cell(t);
        let (na, nb) = self.grid.shape();
        let (i, wa) = self.space_cell(0, x[0])?;
        let (j, wb) = match self.grid.axes.get(1) {
            Some(b) => self.space_cell(1, x[b.coord])?,
            None => (0, 0.0),
        };
        let i_hi = if wa > 0.0 { i + 1 } else { i };
        if i == 0 || i_hi + 1 >= na {
            return Err(Error::EdgeProximity(format!("x1 = {} within one node of the x1 faces", x[0])));
        }
        let j_hi = if wb > 0.0 { j + 1 } else { j };
        if nb > 1 && (j == 0 || j_hi + 1 >= nb) {
            return Err(Error::EdgeProximity("point within one node of the second-axis faces".into()));
        }
        let mut dt = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (dk, fk) in [(0, 1.0 - wt), (1, wt)] {
            for (di, fi) in [(0, 1.0 - wa), (1, wa)] {
                for (dj, fj) in [(0, 1.0 - wb), (1, wb)] {
                    let wgt = fk * fi * fj;
                    if wgt == 0.0 {
                        continue;
                    }
                    let (kk, ii, jj) = ((k + dk).min(self.grid.n_t), i + di, j + dj);
                    dt += wgt * self.nodal_dt(kk, ii, jj);
                    da += wgt * self.nodal_dx(0, kk, ii, jj);
                    if nb > 1 {
                        db += wgt * self.nodal_dx(1, kk, ii, jj);
                    }
                }
            }
        }
        let mut grad = vec![None; self.grid.dim()];
        grad[self.grid.axes[0].coord] = Some(da);
        if let Some(b) = self.grid.axes.get(1) {
            grad[b.coord] = Some(db);
        }
        Ok(FdDerivatives { dt, grad })
    }

    /// Node-by-node continuation/stopping classification with `w ≤ tol` as stopping.
    /// The terminal slice is entirely stopping.
    pub fn classify_regions(&self, tol: f64) -> RegionMask {
        let (na, nb) = self.grid.shape();
        let n_t = self.grid.n_t;
        let mut regions = Vec::with_capacity(self.v.len());
        for k in 0..=n_t {
            for i in 0..na {
                for j in 0..nb {
                    let face = i == 0 || i + 1 == na || (nb > 1 && (j == 0 || j + 1 == nb));
                    regions.push(if face {
                        Region::Face
                    } else if k == n_t || self.w[self.index(k, i, j)] <= tol {
                        Region::Stopping
                    } else {
                        Region::Continuation
                    });
                }
            }
        }
        RegionMask { tol, regions }
    }
}

/// A `(time slice, second-axis index)` column whose interior x1-nodes are not of
/// the form stopping-then-continuation (stop-below) or its mirror.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskViolation {
    pub slice: usize,
    pub column: usize,
    /// First x1 index at which the order breaks.
    pub index: usize,
}

/// Columns of the mask that are not monotone in x1. Face nodes are skipped.
pub fn mask_monotonicity_violations(surface: &ValueSurface, mask: &RegionMask) -> Vec<MaskViolation> {
    let (na, nb) = surface.grid.shape();
    let below = surface.orientation == Orientation::StopBelow;
    let mut out = Vec::new();
    for k in 0..=surface.grid.n_t {
        for j in 0..nb {
            let mut switched = false;
            for step in 1..na - 1 {
                let i = if below { step } else { na - 1 - step };
                match mask.regions[surface.index(k, i, j)] {
                    Region::Face => {}
                    Region::Continuation => switched = true,
                    Region::Stopping if switched => {
                        out.push(MaskViolation { slice: k, column: j, index: i });
                        break;
                    }
                    Region::Stopping => {}
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Payoff;

    fn constant_obstacle() -> ProblemSpec {
        ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.1])
            .sigma(vec![0.4])
            .obstacle(Payoff::constant(1.0))
            .terminal(Payoff::constant(1.0))
            .build()
            .unwrap()
    }

    #[test]
    fn constant_obstacle_gives_constant_value() {
        let spec = constant_obstacle();
        let s = solve_vi(&spec, &Grid::new_1d(0.0, 1.0, 20, (-2.0, 2.0, 41)), &SolverSettings::default()).unwrap();
        assert!(s.v.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let mask = s.classify_regions(s.default_tol());
        assert!(mask.regions.iter().all(|r| *r != Region::Continuation));
    }

    #[test]
    fn martingale_obstacle_is_reproduced() {
        let spec = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![0.5])
            .obstacle(Payoff::linear(vec![1.0], 0.0))
            .terminal(Payoff::linear(vec![1.0], 0.0))
            .build()
            .unwrap();
        let s = solve_vi(&spec, &Grid::new_1d(0.0, 1.0, 50, (-3.0, 3.0, 61)), &SolverSettings::default()).unwrap();
        for k in 0..=50 {
            for i in 0..61 {
                let x = s.grid.axes[0].node(i);
                assert!((s.v[s.index(k, i, 0)] - x).abs() < 1e-8);
            }
        }
        let d = s.fd_derivatives(0.3, &[0.05]).unwrap();
        assert!((d.grad[0].unwrap() - 1.0).abs() < 1e-8);
        assert!(d.dt.abs() < 1e-8);
    }

    #[test]
    fn explicit_scheme_respects_cfl() {
        let spec = constant_obstacle();
        let grid = Grid::new_1d(0.0, 1.0, 4, (-2.0, 2.0, 401));
        let err = solve_vi(&spec, &grid, &SolverSettings { theta: 0.0, ..Default::default() }).unwrap_err();
        let Error::Cfl { required, .. } = err else { panic!("expected CFL error, got {err:?}") };
        let n = (1.0 / required).ceil() as usize + 1;
        let ok = Grid::new_1d(0.0, 1.0, n, (-2.0, 2.0, 401));
        assert!(solve_vi(&spec, &ok, &SolverSettings { theta: 0.0, ..Default::default() }).is_ok());
    }

    #[test]
    fn grid_must_reach_horizon() {
        let spec = constant_obstacle();
        let err = solve_vi(&spec, &Grid::new_1d(0.0, 0.5, 4, (-1.0, 1.0, 5)), &SolverSettings::default());
        assert!(matches!(err, Err(Error::Grid(_))));
    }

    #[test]
    fn edge_points_are_refused() {
        let spec = constant_obstacle();
        let s = solve_vi(&spec, &Grid::new_1d(0.0, 1.0, 4, (-2.0, 2.0, 5)), &SolverSettings::default()).unwrap();
        assert!(matches!(s.fd_derivatives(0.5, &[-1.5]), Err(Error::EdgeProximity(_))));
        assert!(s.fd_derivatives(0.5, &[0.0]).is_ok());
    }

    #[test]
    fn put_like_problem_has_monotone_mask() {
        // Perpetual-put flavour: stop when x is low, payoff (1 - x)^+ smoothed.
        let spec = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .kill_rate(0.2)
            .constant_drift(vec![0.0])
            .sigma(vec![0.3])
            .obstacle(Payoff::linear(vec![-1.0], 1.0))
            .terminal(Payoff::linear(vec![-1.0], 1.0))
            .build()
            .unwrap();
        let s = solve_vi(&spec, &Grid::new_1d(0.0, 1.0, 100, (-2.0, 3.0, 201)), &SolverSettings::default()).unwrap();
        let mask = s.classify_regions(s.default_tol());
        assert!(mask_monotonicity_violations(&s, &mask).is_empty());
        assert!(s.v.iter().zip(&s.w).all(|(_, w)| *w >= -1e-10));
        assert!(mask.regions.contains(&Region::Continuation));
    }

    #[test]
    fn frozen_coordinate_must_be_inert() {
        let spec = ProblemSpec::builder(2)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0, 0.3])
            .sigma(vec![1.0, 0.0, 0.0, 0.0])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let grid = Grid::new_1d(0.0, 1.0, 4, (-1.0, 1.0, 5)).with_frozen(1, 0.0);
        assert!(matches!(solve_vi(&spec, &grid, &SolverSettings::default()), Err(Error::Grid(_))));
    }
}

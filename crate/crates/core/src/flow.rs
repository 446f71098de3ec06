//! Euler–Maruyama simulation of `X`, its derivative flow `∂X`, entry times into a
//! stopping set and the pathwise sanity bounds on both.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boundary::BoundarySurface;
use crate::error::{Error, Result};
use crate::math::{self, MAX_DIM};
use crate::par;
use crate::problem::{Orientation, ProblemSpec};
use crate::rng::PathStream;

/// Uniform time grid `t0, t0+dt, ...` ending exactly at `t_end` with a short final
/// step when `(t_end - t0)/dt` is not an integer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Parameter(format!("time step must be positive, got {dt}")));
        }
        if !(t_end >= t0) {
            return Err(Error::Parameter(format!("start time {t0} after end time {t_end}")));
        }
        let n_steps = math::ceil((t_end - t0) / dt - 1e-9).max(0.0) as usize;
        Ok(Self { t0, t_end, dt, n_steps })
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.dt
        }
    }

    /// Length of step `i` (from node `i` to node `i+1`).
    #[inline]
    pub fn step(&self, i: usize) -> f64 {
        self.time(i + 1) - self.time(i)
    }

    pub fn len(&self) -> f64 {
        self.t_end - self.t0
    }
}

/// How a Girsanov change of measure with constant kernel `η` is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureMode {
    /// Simulate under the original measure and weight each path by
    /// `exp(ηᵀB_s − ½‖η‖²s)`.
    Reweight,
    /// Simulate the new-measure law directly: the drift is shifted by `σ η` and all
    /// weights are one.
    ShiftedDrift,
}

/// Change of measure `dP̃/dP = exp(ηᵀB_T − ½‖η‖²T)`, under which `B_s − ηs` is a
/// Brownian motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureChange {
    pub eta: Vec<f64>,
    pub mode: MeasureMode,
}

impl MeasureChange {
    pub fn identity(dim: usize) -> Self {
        Self { eta: vec![0.0; dim], mode: MeasureMode::Reweight }
    }

    fn eta_sq(&self) -> f64 {
        self.eta.iter().map(|e| e * e).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Event {
    Running,
    /// First node (before the final one) on the stopping side of the boundary.
    Stopped,
    /// Final node reached without stopping.
    Terminal,
}

/// State of one path at one time node, handed to estimator visitors.
pub(crate) struct PathPoint<'a> {
    pub step: usize,
    /// Length of the step that led to this node; zero at the start.
    pub h_prev: f64,
    /// Elapsed time since `t0`.
    pub s: f64,
    pub t: f64,
    pub x: &'a [f64],
    /// Row-major `∂X`, entry `(j,k) = ∂_k X^j`; empty when not tracked.
    pub flow: &'a [f64],
    pub log_weight: f64,
    /// `∫_0^s ∂_1 μ_1(X_u) du`.
    pub mu_exponent: f64,
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct PathOutcome {
    pub valid: bool,
    /// Node at which the path stopped or reached the end; `None` if cut short.
    pub stopped_at: Option<usize>,
    pub hit_terminal: bool,
}

/// Streaming path engine shared by bundles, diagnostics and estimators.
pub(crate) struct Walker<'a> {
    pub spec: &'a ProblemSpec,
    pub grid: TimeGrid,
    pub boundary: Option<&'a BoundarySurface>,
    pub measure: Option<&'a MeasureChange>,
    pub track_flow: bool,
    pub seed: u64,
    /// Stop simulating after this node even if the path has not stopped.
    pub last_node: Option<usize>,
}

impl<'a> Walker<'a> {
    pub fn new(spec: &'a ProblemSpec, grid: TimeGrid, seed: u64) -> Self {
        Self { spec, grid, boundary: None, measure: None, track_flow: false, seed, last_node: None }
    }

    fn stops(&self, t: f64, x: &[f64]) -> Result<bool> {
        let Some(b) = self.boundary else { return Ok(false) };
        let v = b.eval(t, &x[1..]);
        if v.is_nan() {
            return Err(Error::BoundaryNan { t, tail: x[1..].to_vec() });
        }
        Ok(b.orientation.stops(x[0], v))
    }

    /// Simulates path number `path` from `x0`, calling `visit` at every node up to
    /// and including the stopping node.
    pub fn run(&self, path: u64, x0: &[f64], mut visit: impl FnMut(&PathPoint)) -> Result<PathOutcome> {
        let spec = self.spec;
        let d = spec.dim();
        let sigma = spec.sigma();
        let mut stream = PathStream::new(self.seed, path);
        let mut x = [0.0; MAX_DIM];
        x[..d].copy_from_slice(x0);
        let mut flow = [0.0; MAX_DIM * MAX_DIM];
        let fl = if self.track_flow { d * d } else { 0 };
        for k in 0..d {
            flow[k * d + k] = 1.0;
        }
        let mut mu = [0.0; MAX_DIM];
        let mut jac = [0.0; MAX_DIM * MAX_DIM];
        let mut tmp = [0.0; MAX_DIM * MAX_DIM];
        let mut z = [0.0; MAX_DIM];
        let (eta, eta_sq, shifted) = match self.measure {
            Some(m) => (&m.eta[..], m.eta_sq(), m.mode == MeasureMode::ShiftedDrift),
            None => (&[][..], 0.0, false),
        };
        let reweight = !eta.is_empty() && !shifted;
        let mut log_weight = 0.0;
        let mut mu_exponent = 0.0;
        let n = self.grid.n_steps;
        let last = self.last_node.unwrap_or(n).min(n);
        let mut h_prev = 0.0;

        for i in 0..=last {
            let t = self.grid.time(i);
            let event = if i == n {
                Event::Terminal
            } else if self.stops(t, &x[..d])? {
                Event::Stopped
            } else {
                Event::Running
            };
            visit(&PathPoint {
                step: i,
                h_prev,
                s: t - self.grid.t0,
                t,
                x: &x[..d],
                flow: &flow[..fl],
                log_weight,
                mu_exponent,
                event,
            });
            match event {
                Event::Stopped => return Ok(PathOutcome { valid: true, stopped_at: Some(i), hit_terminal: false }),
                Event::Terminal => return Ok(PathOutcome { valid: true, stopped_at: Some(i), hit_terminal: true }),
                Event::Running if i == last => break,
                Event::Running => {}
            }

            let h = self.grid.step(i);
            let sq = math::sqrt(h);
            stream.fill_normals(&mut z[..d]);
            spec.drift(&x[..d], &mut mu[..d]);
            spec.drift_jacobian(&x[..d], &mut jac[..d * d]);
            mu_exponent += h * jac[0];
            if self.track_flow {
                // ∂X ← ∂X + h ∇μ(X_old) ∂X
                for j in 0..d {
                    for k in 0..d {
                        let mut s = 0.0;
                        for l in 0..d {
                            s += jac[j * d + l] * flow[l * d + k];
                        }
                        tmp[j * d + k] = flow[j * d + k] + h * s;
                    }
                }
                flow[..d * d].copy_from_slice(&tmp[..d * d]);
            }
            for j in 0..d {
                let mut noise = 0.0;
                let mut shift = 0.0;
                for k in 0..d {
                    noise += sigma[j * d + k] * z[k];
                    if shifted {
                        shift += sigma[j * d + k] * eta[k];
                    }
                }
                x[j] += (mu[j] + shift) * h + noise * sq;
            }
            if reweight {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += eta[k] * z[k];
                }
                log_weight += dot * sq - 0.5 * eta_sq * h;
            }
            h_prev = h;
            let finite = x[..d].iter().all(|v| v.is_finite())
                && flow[..fl].iter().all(|v| v.is_finite())
                && log_weight.is_finite();
            if !finite {
                return Ok(PathOutcome { valid: false, stopped_at: None, hit_terminal: false });
            }
        }
        Ok(PathOutcome { valid: true, stopped_at: None, hit_terminal: false })
    }
}

/// Stored simulated paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub t0: f64,
    pub x0: Vec<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub dim: usize,
    pub rng_seed: u64,
    /// Stream index of the first path; path `p` of this bundle uses stream
    /// `path_offset + p`.
    pub path_offset: u64,
    pub grid: TimeGrid,
    /// `[path][node][component]`.
    pub states: Vec<f64>,
    /// `[path][node][j*d+k]`, filled by [`derivative_flow`].
    pub flow: Option<Vec<f64>>,
    /// `[path][node]` log Radon–Nikodym weights, set by a measure change.
    pub log_weights: Option<Vec<f64>>,
    pub measure: Option<MeasureChange>,
    pub valid: Vec<bool>,
    pub warnings: Vec<String>,
}

impl PathBundle {
    pub fn nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let o = (path * self.nodes() + node) * self.dim;
        &self.states[o..o + self.dim]
    }

    pub fn flow_at(&self, path: usize, node: usize) -> Option<&[f64]> {
        let dd = self.dim * self.dim;
        self.flow.as_ref().map(|f| {
            let o = (path * self.nodes() + node) * dd;
            &f[o..o + dd]
        })
    }

    /// Radon–Nikodym weight of `path` at `node` (one when no change is applied).
    pub fn weight(&self, path: usize, node: usize) -> f64 {
        match &self.log_weights {
            Some(w) => math::exp(w[path * self.nodes() + node]),
            None => 1.0,
        }
    }

    pub fn invalid_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
}

fn check_start(spec: &ProblemSpec, t0: f64, x0: &[f64]) -> Result<()> {
    spec.check_point(t0, x0)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("start point must be finite".into()));
    }
    Ok(())
}

fn record_paths(
    spec: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    paths: core::ops::Range<u64>,
    dt: f64,
    seed: u64,
    measure: Option<&MeasureChange>,
) -> Result<PathBundle> {
    check_start(spec, t0, x0)?;
    let grid = TimeGrid::new(t0, spec.effective_horizon(), dt)?;
    let d = spec.dim();
    let nodes = grid.n_steps + 1;
    let n_paths = (paths.end - paths.start) as usize;
    let mut walker = Walker::new(spec, grid, seed);
    walker.measure = measure;
    let per_path = par::map(n_paths, |p| {
        let mut st = vec![f64::NAN; nodes * d];
        let mut lw = vec![0.0; nodes];
        let out = walker.run(paths.start + p as u64, x0, |pt| {
            st[pt.step * d..(pt.step + 1) * d].copy_from_slice(pt.x);
            lw[pt.step] = pt.log_weight;
        });
        out.map(|o| (st, lw, o.valid))
    });
    let mut states = Vec::with_capacity(n_paths * nodes * d);
    let mut log_w = Vec::with_capacity(n_paths * nodes);
    let mut valid = Vec::with_capacity(n_paths);
    for r in per_path {
        let (s, w, v) = r?;
        states.extend_from_slice(&s);
        log_w.extend_from_slice(&w);
        valid.push(v);
    }
    let mut warnings = Vec::new();
    let bad = valid.iter().filter(|v| !**v).count();
    if bad > 0 {
        warnings.push(format!("{bad} paths produced non-finite states and are excluded"));
    }
    let weighted = measure.is_some_and(|m| m.mode == MeasureMode::Reweight);
    Ok(PathBundle {
        t0,
        x0: x0.to_vec(),
        dt,
        n_steps: grid.n_steps,
        n_paths,
        dim: d,
        rng_seed: seed,
        path_offset: paths.start,
        grid,
        states,
        flow: None,
        log_weights: weighted.then_some(log_w),
        measure: measure.cloned(),
        valid,
        warnings,
    })
}

/// Simulates `n_paths` Euler–Maruyama paths of `X` from `(t0, x0)` up to the
/// (effective) horizon.
pub fn simulate_paths(
    spec: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<PathBundle> {
    record_paths(spec, t0, x0, 0..n_paths as u64, dt, seed, None)
}

/// Like [`simulate_paths`] for the stream range `paths`; concatenating chunks gives
/// the same paths as one large call.
pub fn simulate_path_range(
    spec: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    paths: core::ops::Range<u64>,
    dt: f64,
    seed: u64,
) -> Result<PathBundle> {
    record_paths(spec, t0, x0, paths, dt, seed, None)
}

/// Fills the derivative flow by the forward Euler recursion
/// `∂X ← ∂X + dt ∇μ(X) ∂X` from the identity.
pub fn derivative_flow(spec: &ProblemSpec, mut bundle: PathBundle) -> PathBundle {
    let d = bundle.dim;
    let dd = d * d;
    let nodes = bundle.nodes();
    let grid = bundle.grid;
    let b = &bundle;
    let per_path = par::map(b.n_paths, |p| {
        let mut out = vec![f64::NAN; nodes * dd];
        if !b.valid[p] {
            return out;
        }
        let mut jac = [0.0; MAX_DIM * MAX_DIM];
        out[..dd].fill(0.0);
        for k in 0..d {
            out[k * d + k] = 1.0;
        }
        for i in 0..b.n_steps {
            let h = grid.step(i);
            spec.drift_jacobian(b.state(p, i), &mut jac[..dd]);
            let (prev, next) = out[i * dd..(i + 2) * dd].split_at_mut(dd);
            for j in 0..d {
                for k in 0..d {
                    let mut s = 0.0;
                    for l in 0..d {
                        s += jac[j * d + l] * prev[l * d + k];
                    }
                    next[j * d + k] = prev[j * d + k] + h * s;
                }
            }
        }
        out
    });
    bundle.flow = Some(per_path.concat());
    bundle
}

/// Re-simulates the bundle's paths under a change of measure. `Reweight` keeps the
/// states and attaches weights computed from the same Brownian increments;
/// `ShiftedDrift` replaces the states by paths with drift `μ + σ η`.
pub fn apply_measure_change(spec: &ProblemSpec, change: &MeasureChange, bundle: &PathBundle) -> Result<PathBundle> {
    if change.eta.len() != spec.dim() {
        return Err(Error::Parameter(format!(
            "measure change kernel has {} components, expected {}",
            change.eta.len(),
            spec.dim()
        )));
    }
    let range = bundle.path_offset..bundle.path_offset + bundle.n_paths as u64;
    let out = record_paths(spec, bundle.t0, &bundle.x0, range, bundle.dt, bundle.rng_seed, Some(change))?;
    if let Some(w) = &out.log_weights {
        if w.iter().any(|v| !(v.is_finite() && math::exp(*v) > 0.0)) {
            return Err(Error::NumericOverflow("Radon–Nikodym weight underflowed or overflowed".into()));
        }
    }
    Ok(if bundle.flow.is_some() { derivative_flow(spec, out) } else { out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingResult {
    /// First node on the stopping side; `n_steps` if none before the final node.
    pub tau_index: usize,
    pub hit_terminal: bool,
    pub state_at_tau: Vec<f64>,
}

/// Discretely monitored entry times of the bundle's paths into the stopping set
/// of `boundary`. Invalid paths are reported as `None`.
pub fn hitting_time(
    bundle: &PathBundle,
    boundary: &BoundarySurface,
    orientation: Orientation,
) -> Result<Vec<Option<HittingResult>>> {
    let mut out = Vec::with_capacity(bundle.n_paths);
    for p in 0..bundle.n_paths {
        if !bundle.valid[p] {
            out.push(None);
            continue;
        }
        let mut hit = None;
        for i in 0..bundle.n_steps {
            let x = bundle.state(p, i);
            let t = bundle.grid.time(i);
            let b = boundary.eval(t, &x[1..]);
            if b.is_nan() {
                return Err(Error::BoundaryNan { t, tail: x[1..].to_vec() });
            }
            if orientation.stops(x[0], b) {
                hit = Some(i);
                break;
            }
        }
        let tau_index = hit.unwrap_or(bundle.n_steps);
        out.push(Some(HittingResult {
            tau_index,
            hit_terminal: hit.is_none(),
            state_at_tau: bundle.state(p, tau_index).to_vec(),
        }));
    }
    Ok(out)
}

/// A path whose derivative flow exceeded the pathwise Gronwall bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallViolation {
    pub path: u64,
    pub k: usize,
    /// `bound - sup_t ‖∂_k X_t‖²` (negative).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovCheck {
    /// Empirical `P(τ = T - t)`.
    pub p_terminal: f64,
    /// Empirical `E[τ]/(T - t)`.
    pub mean_tau_ratio: f64,
    /// Standard error of the per-path difference.
    pub std_error: f64,
    /// `mean_tau_ratio + 3 SE - p_terminal`; nonnegative when the check holds.
    pub margin: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_paths: usize,
    pub n_valid: usize,
    /// Violations of `sup_t ‖∂_k X_t‖² ≤ 2 exp(T ∫ Σ_j ‖∇μ_j‖² ds)`.
    pub gronwall_violations: Vec<GronwallViolation>,
    /// Violations of the same bound with exponent `2T ∫ Σ_j ‖∇μ_j‖² ds`, which is
    /// what Gronwall's inequality delivers for any drift.
    pub gronwall_rigorous_violations: usize,
    /// Largest observed `sup‖∂_k X‖² / bound`.
    pub gronwall_max_ratio: f64,
    pub markov: MarkovCheck,
}

impl DiagnosticsReport {
    pub fn clean(&self) -> bool {
        self.gronwall_violations.is_empty() && self.markov.holds
    }
}

/// Per-path ingredients of the diagnostics.
#[derive(Clone, Copy)]
struct PathDiag {
    valid: bool,
    sup_sq: [f64; MAX_DIM],
    jac_integral: f64,
    tau: f64,
    terminal: bool,
}

fn frobenius_sq(jac: &[f64]) -> f64 {
    jac.iter().map(|v| v * v).sum()
}

fn finish_diagnostics(spec: &ProblemSpec, horizon: f64, diags: &[PathDiag], path_offset: u64) -> DiagnosticsReport {
    let d = spec.dim();
    let mut violations = Vec::new();
    let mut rigorous = 0;
    let mut max_ratio: f64 = 0.0;
    let mut diff = Vec::with_capacity(diags.len());
    let mut term = Vec::with_capacity(diags.len());
    let mut ratio = Vec::with_capacity(diags.len());
    for (p, g) in diags.iter().enumerate() {
        if !g.valid {
            continue;
        }
        let bound = 2.0 * math::exp(horizon * g.jac_integral);
        let rigorous_bound = 2.0 * math::exp(2.0 * horizon * g.jac_integral);
        for k in 0..d {
            max_ratio = max_ratio.max(g.sup_sq[k] / bound);
            if g.sup_sq[k] > bound {
                violations.push(GronwallViolation { path: path_offset + p as u64, k, margin: bound - g.sup_sq[k] });
            }
            if g.sup_sq[k] > rigorous_bound {
                rigorous += 1;
            }
        }
        let ind = if g.terminal { 1.0 } else { 0.0 };
        let r = if horizon > 0.0 { g.tau / horizon } else { 1.0 };
        term.push(ind);
        ratio.push(r);
        diff.push(ind - r);
    }
    let n_valid = term.len();
    let (p_terminal, _) = math::mean_and_se(&term);
    let (mean_tau_ratio, _) = math::mean_and_se(&ratio);
    let (mean_diff, se) = math::mean_and_se(&diff);
    let margin = 3.0 * se - mean_diff;
    DiagnosticsReport {
        n_paths: diags.len(),
        n_valid,
        gronwall_violations: violations,
        gronwall_rigorous_violations: rigorous,
        gronwall_max_ratio: max_ratio,
        markov: MarkovCheck {
            p_terminal,
            mean_tau_ratio,
            std_error: se,
            margin,
            holds: n_valid > 0 && margin >= -1e-12,
        },
    }
}

/// Checks the pathwise Gronwall bound on `∂X` and the Markov inequality
/// `P(τ = T-t) ≤ E[τ]/(T-t)` on a bundle with filled flow.
pub fn diagnostics(
    spec: &ProblemSpec,
    bundle: &PathBundle,
    results: &[Option<HittingResult>],
) -> Result<DiagnosticsReport> {
    if bundle.flow.is_none() {
        return Err(Error::Parameter("diagnostics need the derivative flow".into()));
    }
    let d = bundle.dim;
    let dd = d * d;
    let mut diags = Vec::with_capacity(bundle.n_paths);
    let mut jac = [0.0; MAX_DIM * MAX_DIM];
    for p in 0..bundle.n_paths {
        let res = results.get(p).cloned().flatten();
        let mut g = PathDiag {
            valid: bundle.valid[p] && res.is_some(),
            sup_sq: [0.0; MAX_DIM],
            jac_integral: 0.0,
            tau: 0.0,
            terminal: false,
        };
        if g.valid {
            let res = res.unwrap();
            for i in 0..=bundle.n_steps {
                let f = bundle.flow_at(p, i).unwrap();
                for k in 0..d {
                    let s: f64 = (0..d).map(|j| f[j * d + k] * f[j * d + k]).sum();
                    g.sup_sq[k] = g.sup_sq[k].max(s);
                }
                if i < bundle.n_steps {
                    spec.drift_jacobian(bundle.state(p, i), &mut jac[..dd]);
                    g.jac_integral += bundle.grid.step(i) * frobenius_sq(&jac[..dd]);
                }
            }
            g.tau = bundle.grid.time(res.tau_index) - bundle.t0;
            g.terminal = res.hit_terminal;
        }
        diags.push(g);
    }
    Ok(finish_diagnostics(spec, bundle.grid.len(), &diags, bundle.path_offset))
}

/// [`diagnostics`] without storing paths: simulates `n_paths` from `(t0, x0)`,
/// stopping against `boundary`, and keeps only running maxima and integrals.
pub fn diagnostics_streaming(
    spec: &ProblemSpec,
    t0: f64,
    x0: &[f64],
    boundary: &BoundarySurface,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<DiagnosticsReport> {
    check_start(spec, t0, x0)?;
    let grid = TimeGrid::new(t0, spec.effective_horizon(), dt)?;
    let d = spec.dim();
    // Paths run to the horizon without stopping: the Gronwall bound concerns the
    // whole flow, while τ is read off along the way.
    let mut walker = Walker::new(spec, grid, seed);
    walker.track_flow = true;
    let per_path = par::map(n_paths, |p| -> Result<PathDiag> {
        let mut g = PathDiag { valid: false, sup_sq: [0.0; MAX_DIM], jac_integral: 0.0, tau: 0.0, terminal: true };
        let mut jac = [0.0; MAX_DIM * MAX_DIM];
        let mut prev_frob = 0.0;
        let mut stopped = false;
        let mut err = None;
        let out = walker.run(p as u64, x0, |pt| {
            g.jac_integral += pt.h_prev * prev_frob;
            spec.drift_jacobian(pt.x, &mut jac[..d * d]);
            prev_frob = frobenius_sq(&jac[..d * d]);
            for k in 0..d {
                let s: f64 = (0..d).map(|j| pt.flow[j * d + k] * pt.flow[j * d + k]).sum();
                g.sup_sq[k] = g.sup_sq[k].max(s);
            }
            if !stopped && err.is_none() {
                if pt.event == Event::Terminal {
                    stopped = true;
                    g.tau = pt.s;
                } else {
                    let b = boundary.eval(pt.t, &pt.x[1..]);
                    if b.is_nan() {
                        err = Some(Error::BoundaryNan { t: pt.t, tail: pt.x[1..].to_vec() });
                    } else if boundary.orientation.stops(pt.x[0], b) {
                        stopped = true;
                        g.tau = pt.s;
                        g.terminal = false;
                    }
                }
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        g.valid = out.valid;
        Ok(g)
    });
    let diags: Vec<PathDiag> = per_path.into_iter().collect::<Result<_>>()?;
    Ok(finish_diagnostics(spec, grid.len(), &diags, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Payoff;

    fn bm(mu: f64, sigma: f64, t: f64) -> ProblemSpec {
        ProblemSpec::builder(1)
            .finite_horizon(t)
            .constant_drift(vec![mu])
            .sigma(vec![sigma])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap()
    }

    fn ou(kappa: f64, zeta: f64, sigma: f64, t: f64) -> ProblemSpec {
        ProblemSpec::builder(1)
            .finite_horizon(t)
            .drift(move |x, m| m[0] = kappa * (zeta - x[0]), move |_, j| j[0] = -kappa)
            .sigma(vec![sigma])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap()
    }

    #[test]
    fn grid_has_short_final_step() {
        let g = TimeGrid::new(0.0, 1.0, 0.3).unwrap();
        assert_eq!(g.n_steps, 4);
        assert!((g.step(3) - 0.1).abs() < 1e-12);
        assert_eq!(g.time(4), 1.0);
        assert_eq!(TimeGrid::new(0.0, 1.0, 0.25).unwrap().n_steps, 4);
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let spec = bm(0.0, 0.0, 1.0);
        let b = simulate_paths(&spec, 0.0, &[0.7], 5, 0.1, 3).unwrap();
        assert!(b.states.iter().all(|&x| x == 0.7));
    }

    #[test]
    fn arithmetic_bm_mean() {
        let spec = bm(0.4, 0.5, 1.0);
        let b = simulate_paths(&spec, 0.0, &[1.0], 20_000, 0.05, 11).unwrap();
        let ends: Vec<f64> = (0..b.n_paths).map(|p| b.state(p, b.n_steps)[0]).collect();
        let (m, se) = math::mean_and_se(&ends);
        assert!((m - 1.4).abs() < 3.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn ou_mean_matches_closed_form() {
        let (kappa, zeta, x0, t) = (0.8, 0.5, 2.0, 1.5);
        let spec = ou(kappa, zeta, 0.3, t);
        let b = simulate_paths(&spec, 0.0, &[x0], 20_000, 0.005, 5).unwrap();
        let ends: Vec<f64> = (0..b.n_paths).map(|p| b.state(p, b.n_steps)[0]).collect();
        let (m, se) = math::mean_and_se(&ends);
        let exact = zeta + (x0 - zeta) * math::exp(-kappa * t);
        // Euler bias for the mean is O(dt).
        assert!((m - exact).abs() < 3.0 * se + 0.01, "mean {m} exact {exact} se {se}");
    }

    #[test]
    fn flow_of_linear_contraction() {
        let spec = ou(1.0, 0.0, 0.2, 1.0);
        let b = derivative_flow(&spec, simulate_paths(&spec, 0.0, &[0.0], 3, 1e-3, 1).unwrap());
        let f = b.flow_at(2, b.n_steps).unwrap()[0];
        assert!((f - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn constant_drift_flow_is_identity() {
        let spec = ProblemSpec::builder(2)
            .finite_horizon(1.0)
            .constant_drift(vec![0.1, -0.2])
            .sigma(vec![1.0, 0.0, 0.3, 0.5])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let b = derivative_flow(&spec, simulate_paths(&spec, 0.0, &[0.0, 0.0], 4, 0.1, 1).unwrap());
        for p in 0..4 {
            for i in 0..=b.n_steps {
                assert_eq!(b.flow_at(p, i).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
            }
        }
    }

    #[test]
    fn chunked_simulation_matches_single_call() {
        let spec = ou(0.5, 0.0, 0.4, 1.0);
        let all = simulate_paths(&spec, 0.0, &[0.3], 10, 0.1, 9).unwrap();
        let tail = simulate_path_range(&spec, 0.0, &[0.3], 6..10, 0.1, 9).unwrap();
        for p in 0..4 {
            for i in 0..=all.n_steps {
                assert_eq!(all.state(6 + p, i), tail.state(p, i));
            }
        }
    }

    #[test]
    fn extreme_boundaries() {
        let spec = bm(0.0, 1.0, 1.0);
        let b = simulate_paths(&spec, 0.0, &[0.0], 50, 0.1, 2).unwrap();
        let never = BoundarySurface::constant(f64::NEG_INFINITY, Orientation::StopBelow, 0.0, 1.0, 0);
        let always = BoundarySurface::constant(f64::INFINITY, Orientation::StopBelow, 0.0, 1.0, 0);
        for r in hitting_time(&b, &never, Orientation::StopBelow).unwrap() {
            let r = r.unwrap();
            assert!(r.hit_terminal);
            assert_eq!(r.tau_index, b.n_steps);
        }
        for r in hitting_time(&b, &always, Orientation::StopBelow).unwrap() {
            assert_eq!(r.unwrap().tau_index, 0);
        }
    }

    #[test]
    fn nan_boundary_is_an_error() {
        let spec = bm(0.0, 1.0, 1.0);
        let b = simulate_paths(&spec, 0.0, &[0.0], 2, 0.5, 2).unwrap();
        let nan = BoundarySurface::constant(f64::NAN, Orientation::StopBelow, 0.0, 1.0, 0);
        assert!(matches!(hitting_time(&b, &nan, Orientation::StopBelow), Err(Error::BoundaryNan { .. })));
    }

    #[test]
    fn exploding_paths_are_excluded() {
        let spec = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .drift(|x, m| m[0] = x[0] * x[0] * x[0], |x, j| j[0] = 3.0 * x[0] * x[0])
            .sigma(vec![0.0])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let b = simulate_paths(&spec, 0.0, &[50.0], 3, 0.1, 0).unwrap();
        assert_eq!(b.invalid_count(), 3);
        assert_eq!(b.warnings.len(), 1);
    }

    #[test]
    fn gronwall_and_markov_on_ou() {
        let spec = ou(0.7, 0.0, 0.5, 1.0);
        let bnd = BoundarySurface::constant(-0.4, Orientation::StopBelow, 0.0, 1.0, 0);
        let b = derivative_flow(&spec, simulate_paths(&spec, 0.0, &[0.2], 2000, 0.01, 4).unwrap());
        let hits = hitting_time(&b, &bnd, Orientation::StopBelow).unwrap();
        let rep = diagnostics(&spec, &b, &hits).unwrap();
        assert!(rep.clean(), "{rep:?}");
        let streamed = diagnostics_streaming(&spec, 0.0, &[0.2], &bnd, 2000, 0.01, 4).unwrap();
        assert_eq!(rep.markov, streamed.markov);
        assert_eq!(rep.gronwall_violations, streamed.gronwall_violations);
    }

    #[test]
    fn markov_equality_case() {
        let spec = bm(0.0, 1.0, 1.0);
        let never = BoundarySurface::constant(f64::NEG_INFINITY, Orientation::StopBelow, 0.0, 1.0, 0);
        let rep = diagnostics_streaming(&spec, 0.0, &[0.0], &never, 100, 0.1, 1).unwrap();
        assert_eq!(rep.markov.p_terminal, 1.0);
        assert!((rep.markov.mean_tau_ratio - 1.0).abs() < 1e-12);
        assert!(rep.markov.holds);
        assert_eq!(rep.gronwall_max_ratio, 0.5);
    }
}

//! Free boundaries `x1 = b(t, x2, ..., xd)`: storage, evaluation, extraction from a
//! solved value surface, slopes and Lipschitz estimates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::MAX_DIM;
use crate::pde::{Region, ValueSurface};
use crate::problem::{Orientation, ProblemSpec};
use crate::represent::{estimate_excess_functionals, Estimate, McSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    /// Edge of the stopping set of a solved surface.
    PdeExact,
    /// Level set `w = delta` of a solved surface.
    DeltaLevel {
        delta: f64,
    },
    Analytic,
}

/// A boundary sampled on `times × tail_axes`.
///
/// Values may be `±∞`: with stop-below orientation `+∞` means the whole column is
/// stopping and `-∞` that none of it is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySurface {
    pub id: String,
    pub times: Vec<f64>,
    /// Node coordinates of each tail axis `x2..xd`. A single node means the boundary
    /// is constant in that coordinate.
    pub tail_axes: Vec<Vec<f64>>,
    /// Time-major, then tail axes in order (last axis fastest).
    pub values: Vec<f64>,
    pub provenance: Provenance,
    pub orientation: Orientation,
    pub warnings: Vec<String>,
}

/// Index of the cell containing `x` and the interpolation weight of its right node.
/// Positions outside the axis are clamped to the end nodes.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let i = match axis.binary_search_by(|a| a.partial_cmp(&x).unwrap_or(core::cmp::Ordering::Less)) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    };
    let w = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, w)
}

fn fnv1a(bytes: impl Iterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl BoundarySurface {
    pub fn new(
        times: Vec<f64>,
        tail_axes: Vec<Vec<f64>>,
        values: Vec<f64>,
        provenance: Provenance,
        orientation: Orientation,
    ) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Grid("boundary times must be strictly increasing".into()));
        }
        for a in &tail_axes {
            if a.is_empty() || a.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Grid("boundary tail axes must be strictly increasing".into()));
            }
        }
        let expected = times.len() * tail_axes.iter().map(Vec::len).product::<usize>();
        if values.len() != expected {
            return Err(Error::Grid(format!("expected {expected} boundary values, got {}", values.len())));
        }
        let mut s = Self { id: String::new(), times, tail_axes, values, provenance, orientation, warnings: Vec::new() };
        s.id = s.content_id();
        Ok(s)
    }

    /// The same value at every `(t, tail)` on `[t0, t1]`.
    pub fn constant(value: f64, orientation: Orientation, t0: f64, t1: f64, tail_dim: usize) -> Self {
        Self::new(vec![t0, t1], vec![vec![0.0]; tail_dim], vec![value; 2], Provenance::Analytic, orientation)
            .expect("constant boundary is well formed")
    }

    /// Boundary sampled from a closed form on the given nodes.
    pub fn from_fn(
        times: Vec<f64>,
        tail_axes: Vec<Vec<f64>>,
        orientation: Orientation,
        b: impl Fn(f64, &[f64]) -> f64,
    ) -> Result<Self> {
        let shape: Vec<usize> = tail_axes.iter().map(Vec::len).collect();
        let cells: usize = shape.iter().product();
        let mut values = Vec::with_capacity(times.len() * cells);
        let mut tail = vec![0.0; tail_axes.len()];
        for &t in &times {
            for c in 0..cells {
                unravel(c, &shape, |k, i| tail[k] = tail_axes[k][i]);
                values.push(b(t, &tail));
            }
        }
        Self::new(times, tail_axes, values, Provenance::Analytic, orientation)
    }

    fn content_id(&self) -> String {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        h = fnv1a(self.times.iter().flat_map(|v| v.to_bits().to_le_bytes()), h);
        for a in &self.tail_axes {
            h = fnv1a(a.iter().flat_map(|v| v.to_bits().to_le_bytes()), h);
        }
        h = fnv1a(self.values.iter().flat_map(|v| v.to_bits().to_le_bytes()), h);
        let tag = match self.provenance {
            Provenance::PdeExact => String::from("b0"),
            Provenance::DeltaLevel { delta } => format!("bdelta{delta:e}"),
            Provenance::Analytic => String::from("analytic"),
        };
        format!("{tag}-{h:016x}")
    }

    pub fn tail_dim(&self) -> usize {
        self.tail_axes.len()
    }

    pub fn tail_shape(&self) -> Vec<usize> {
        self.tail_axes.iter().map(Vec::len).collect()
    }

    pub fn cells_per_slice(&self) -> usize {
        self.tail_axes.iter().map(Vec::len).product()
    }

    /// Flat index of node `(time index, tail multi-index)`.
    pub fn index(&self, ti: usize, tail_idx: &[usize]) -> usize {
        let mut c = 0;
        for (k, &i) in tail_idx.iter().enumerate() {
            c = c * self.tail_axes[k].len() + i;
        }
        ti * self.cells_per_slice() + c
    }

    pub fn node(&self, ti: usize, tail_idx: &[usize]) -> f64 {
        self.values[self.index(ti, tail_idx)]
    }

    /// `b(t, tail)`. Multilinear where every surrounding node is finite, otherwise
    /// the nearest node. Arguments outside the sampled range are clamped.
    pub fn eval(&self, t: f64, tail: &[f64]) -> f64 {
        let k = self.tail_axes.len();
        debug_assert!(tail.len() >= k);
        let mut base = [0usize; 1 + crate::math::MAX_DIM];
        let mut frac = [0.0f64; 1 + crate::math::MAX_DIM];
        let mut len = [1usize; 1 + crate::math::MAX_DIM];
        let (i, w) = locate(&self.times, t);
        base[0] = i;
        frac[0] = w;
        len[0] = self.times.len();
        for a in 0..k {
            let (i, w) = locate(&self.tail_axes[a], tail[a]);
            base[a + 1] = i;
            frac[a + 1] = w;
            len[a + 1] = self.tail_axes[a].len();
        }
        let dims = k + 1;
        let flat = |offs: usize| {
            let mut idx = 0;
            for a in 0..dims {
                let bit = (offs >> a) & 1;
                let i = (base[a] + bit).min(len[a] - 1);
                idx = idx * len[a] + i;
            }
            idx
        };
        let mut acc = 0.0;
        let mut all_finite = true;
        for offs in 0..(1usize << dims) {
            let mut wgt = 1.0;
            for a in 0..dims {
                wgt *= if (offs >> a) & 1 == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            let v = self.values[flat(offs)];
            if !v.is_finite() {
                all_finite = false;
                break;
            }
            acc += wgt * v;
        }
        if all_finite {
            return acc;
        }
        let mut nearest = 0;
        for a in 0..dims {
            if frac[a] >= 0.5 {
                nearest |= 1 << a;
            }
        }
        self.values[flat(nearest)]
    }

    /// Whether `x` lies in the stopping set described by this boundary at time `t`.
    pub fn in_stopping(&self, t: f64, x: &[f64]) -> bool {
        self.orientation.stops(x[0], self.eval(t, &x[1..]))
    }

    /// Stacks boundaries computed at the nodes of a new trailing tail axis.
    pub fn stack(layers: &[BoundarySurface], axis: Vec<f64>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Grid("no boundary layers to stack".into()))?;
        if layers.len() != axis.len() {
            return Err(Error::Grid("one layer per axis node required".into()));
        }
        for l in layers {
            if l.times != first.times || l.tail_axes != first.tail_axes || l.orientation != first.orientation {
                return Err(Error::Grid("stacked layers must share their grid and orientation".into()));
            }
        }
        let cells = first.cells_per_slice();
        let mut values = Vec::with_capacity(first.values.len() * layers.len());
        for ti in 0..first.times.len() {
            for c in 0..cells {
                for l in layers {
                    values.push(l.values[ti * cells + c]);
                }
            }
        }
        let mut tail_axes = first.tail_axes.clone();
        tail_axes.push(axis);
        let mut s = Self::new(first.times.clone(), tail_axes, values, first.provenance, first.orientation)?;
        for (i, l) in layers.iter().enumerate() {
            s.warnings.extend(l.warnings.iter().map(|w| format!("layer {i}: {w}")));
        }
        Ok(s)
    }
}

/// Calls `f(axis, index)` for each component of the multi-index of flat cell `c`.
pub(crate) fn unravel(mut c: usize, shape: &[usize], mut f: impl FnMut(usize, usize)) {
    for k in (0..shape.len()).rev() {
        f(k, c % shape[k]);
        c /= shape[k];
    }
}

/// Level heights `{1e-2, 1e-3, 1e-4}` scaled by the range of `w` on the surface.
pub fn default_deltas(surface: &ValueSurface) -> Vec<f64> {
    let scale = surface.w_range().max(f64::MIN_POSITIVE);
    vec![1e-2 * scale, 1e-3 * scale, 1e-4 * scale]
}

/// Tail axes of boundaries extracted from `surface`: the interior nodes of the
/// second grid axis, or a single node for a frozen coordinate.
fn tail_axes_of(surface: &ValueSurface) -> Vec<Vec<f64>> {
    let g = &surface.grid;
    (1..g.dim())
        .map(|c| {
            if let Some(a) = g.axes.iter().find(|a| a.coord == c) {
                (1..a.n - 1).map(|j| a.node(j)).collect()
            } else {
                vec![g.frozen.iter().find(|f| f.0 == c).map(|f| f.1).unwrap_or(0.0)]
            }
        })
        .collect()
}

/// Boundary of the solved surface: for `delta = 0` the edge of the stopping set,
/// for `delta > 0` the level set `w = delta` located by linear interpolation in x1.
///
/// Each `(t, tail)` column is scanned over interior x1-nodes. A column entirely on
/// one side gives `±∞`. The terminal slice is omitted; evaluation beyond the last
/// stored time clamps.
pub fn extract_boundary(surface: &ValueSurface, delta: f64) -> Result<BoundarySurface> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Parameter("delta must be finite and nonnegative".into()));
    }
    let g = &surface.grid;
    let (na, nb) = g.shape();
    let ax = g.axes[0];
    let below = surface.orientation == Orientation::StopBelow;
    let mask = (delta == 0.0).then(|| surface.classify_regions(surface.default_tol()));
    let columns: Vec<usize> = if nb > 1 { (1..nb - 1).collect() } else { vec![0] };
    let times: Vec<f64> = (0..g.n_t).map(|k| g.time(k)).collect();
    let mut values = Vec::with_capacity(times.len() * columns.len());
    let mut multi = 0usize;
    for k in 0..g.n_t {
        for &j in &columns {
            // Walk from the stopping side towards the continuation side.
            let order = |step: usize| if below { step } else { na - 1 - step };
            let x_at = |i: usize| ax.node(i);
            let b = if let Some(mask) = &mask {
                let mut last_stop = None;
                let mut any_cont = false;
                for step in 1..na - 1 {
                    let i = order(step);
                    match mask.regions[surface.index(k, i, j)] {
                        Region::Stopping => last_stop = Some(i),
                        Region::Continuation => any_cont = true,
                        Region::Face => {}
                    }
                }
                let inf = if below { f64::INFINITY } else { f64::NEG_INFINITY };
                match (last_stop, any_cont) {
                    (None, _) => -inf,
                    (Some(_), false) => inf,
                    (Some(i), true) => x_at(i),
                }
            } else {
                let mut crossing = None;
                let mut count = 0;
                let mut any_above = false;
                let mut any_below = false;
                for step in 1..na - 2 {
                    let (i0, i1) = (order(step), order(step + 1));
                    let (w0, w1) = (surface.w[surface.index(k, i0, j)], surface.w[surface.index(k, i1, j)]);
                    any_above |= w0 > delta || w1 > delta;
                    any_below |= w0 <= delta || w1 <= delta;
                    if w0 <= delta && w1 > delta {
                        let f = (delta - w0) / (w1 - w0);
                        crossing = Some(x_at(i0) + f * (x_at(i1) - x_at(i0)));
                        count += 1;
                    }
                }
                if count > 1 {
                    multi += 1;
                }
                let inf = if below { f64::INFINITY } else { f64::NEG_INFINITY };
                match crossing {
                    Some(x) => x,
                    None if !any_below => -inf,
                    None if !any_above => inf,
                    // Only downward crossings: treat as no stopping region in the column.
                    None => -inf,
                }
            };
            values.push(b);
        }
    }
    let provenance = if delta == 0.0 { Provenance::PdeExact } else { Provenance::DeltaLevel { delta } };
    let mut out = BoundarySurface::new(times, tail_axes_of(surface), values, provenance, surface.orientation)?;
    if multi > 0 {
        out.warnings
            .push(format!("{multi} columns cross the level {delta:e} more than once; the outermost crossing is used"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingViolation {
    /// Larger level of the pair (`f64::NAN`-free; zero denotes `b_0`).
    pub delta_hi: f64,
    pub delta_lo: f64,
    pub time: f64,
    pub tail: Vec<f64>,
    /// `b_{delta_lo} − b_{delta_hi}`, positive when the order is broken.
    pub excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub deltas: Vec<f64>,
    /// `sup |b_δ − b_0|` over cells where both are finite.
    pub sup_gaps: Vec<f64>,
    pub tolerance: f64,
    pub violations: Vec<OrderingViolation>,
    pub worst: Option<OrderingViolation>,
    /// Vacuously true when `b0` has no finite cell.
    pub gaps_strictly_decreasing: bool,
}

impl ConvergenceReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty() && self.gaps_strictly_decreasing
    }
}

fn delta_of(b: &BoundarySurface) -> f64 {
    match b.provenance {
        Provenance::DeltaLevel { delta } => delta,
        _ => 0.0,
    }
}

/// Checks `b_δ ≥ b_δ' ≥ b_0` cellwise (within `tolerance`) for the family ordered by
/// strictly decreasing δ, and reports the sup-norm gaps to `b_0`.
pub fn convergence_check(
    b0: &BoundarySurface,
    family: &[BoundarySurface],
    tolerance: f64,
) -> Result<ConvergenceReport> {
    let deltas: Vec<f64> = family.iter().map(delta_of).collect();
    if deltas.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::Parameter("family must be ordered by strictly decreasing delta".into()));
    }
    for b in family {
        if b.times != b0.times || b.tail_axes != b0.tail_axes {
            return Err(Error::Grid("family members must share the grid of b0".into()));
        }
    }
    let sign = if b0.orientation == Orientation::StopBelow { 1.0 } else { -1.0 };
    let shape = b0.tail_shape();
    let cells = b0.cells_per_slice();
    let mut violations = Vec::new();
    let mut chain: Vec<&BoundarySurface> = family.iter().collect();
    chain.push(b0);
    for pair in chain.windows(2) {
        let (hi, lo) = (pair[0], pair[1]);
        for (n, (a, b)) in hi.values.iter().zip(&lo.values).enumerate() {
            let excess = sign * (b - a);
            let broken =
                if a.is_finite() && b.is_finite() { excess > tolerance } else { excess > 0.0 && !excess.is_nan() };
            if broken {
                let mut tail = vec![0.0; shape.len()];
                unravel(n % cells, &shape, |k, i| tail[k] = b0.tail_axes[k][i]);
                violations.push(OrderingViolation {
                    delta_hi: delta_of(hi),
                    delta_lo: delta_of(lo),
                    time: b0.times[n / cells],
                    tail,
                    excess,
                });
            }
        }
    }
    let sup_gaps: Vec<f64> = family
        .iter()
        .map(|b| {
            b.values
                .iter()
                .zip(&b0.values)
                .filter(|(a, c)| a.is_finite() && c.is_finite())
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    // With an empty stopping set there is nothing to converge to.
    let empty = b0.values.iter().all(|b| !b.is_finite());
    let gaps_strictly_decreasing = empty || sup_gaps.windows(2).all(|w| w[1] < w[0]);
    let worst =
        violations.iter().cloned().max_by(|a, b| a.excess.partial_cmp(&b.excess).unwrap_or(core::cmp::Ordering::Equal));
    Ok(ConvergenceReport { deltas, sup_gaps, tolerance, violations, worst, gaps_strictly_decreasing })
}

/// Sub-rectangle of `(t, tail)` space. Empty tail ranges mean "everything".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub t_range: (f64, f64),
    pub tail_ranges: Vec<(f64, f64)>,
}

impl Window {
    /// `[t_lo, t_hi]` over the whole tail.
    pub fn time_only(t_lo: f64, t_hi: f64) -> Self {
        Self { t_range: (t_lo, t_hi), tail_ranges: Vec::new() }
    }
}

/// Default collar excluded near the horizon, as a fraction of `T`.
pub const DEFAULT_COLLAR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest `|Δb/Δt|` between neighbouring cells in the window.
    pub l_t: f64,
    /// Largest `|Δb/Δx_k|` per tail axis (zero for single-node axes).
    pub l_tail: Vec<f64>,
    /// Time spacing used, i.e. node spacing times `time_stride`.
    pub dt: f64,
    pub time_stride: usize,
    pub tail_steps: Vec<f64>,
    pub cells: usize,
}

/// Largest finite-difference slopes of `bsurf` inside `window`. Time differences
/// are taken `time_stride` nodes apart (1 = neighbours).
pub fn lipschitz_estimate(bsurf: &BoundarySurface, window: &Window, time_stride: usize) -> Result<LipschitzEstimate> {
    let stride = time_stride.max(1);
    let shape = bsurf.tail_shape();
    let cells = bsurf.cells_per_slice();
    let in_tail = |tail_idx: &[usize]| {
        tail_idx.iter().enumerate().all(|(k, &i)| match window.tail_ranges.get(k) {
            Some(&(lo, hi)) => (lo..=hi).contains(&bsurf.tail_axes[k][i]),
            None => true,
        })
    };
    let t_in: Vec<usize> =
        (0..bsurf.times.len()).filter(|&k| (window.t_range.0..=window.t_range.1).contains(&bsurf.times[k])).collect();
    let mut infinite = Vec::new();
    let mut count = 0;
    let mut idx = vec![0usize; shape.len()];
    for &k in &t_in {
        for c in 0..cells {
            unravel(c, &shape, |a, i| idx[a] = i);
            if !in_tail(&idx) {
                continue;
            }
            count += 1;
            let v = bsurf.values[k * cells + c];
            if !v.is_finite() {
                let mut cell = vec![bsurf.times[k]];
                cell.extend(idx.iter().enumerate().map(|(a, &i)| bsurf.tail_axes[a][i]));
                infinite.push(cell);
            }
        }
    }
    if !infinite.is_empty() {
        return Err(Error::InfiniteCells(infinite));
    }
    if count == 0 {
        return Err(Error::Parameter("window contains no boundary cells".into()));
    }
    let mut l_t: f64 = 0.0;
    let mut l_tail = vec![0.0f64; shape.len()];
    for &k in &t_in {
        for c in 0..cells {
            unravel(c, &shape, |a, i| idx[a] = i);
            if !in_tail(&idx) {
                continue;
            }
            let v = bsurf.values[k * cells + c];
            let k2 = k + stride;
            if t_in.contains(&k2) {
                let dt = bsurf.times[k2] - bsurf.times[k];
                l_t = l_t.max((bsurf.values[k2 * cells + c] - v).abs() / dt);
            }
            for a in 0..shape.len() {
                if idx[a] + 1 < shape[a] {
                    idx[a] += 1;
                    if in_tail(&idx) {
                        let h = bsurf.tail_axes[a][idx[a]] - bsurf.tail_axes[a][idx[a] - 1];
                        l_tail[a] = l_tail[a].max((bsurf.values[bsurf.index(k, &idx)] - v).abs() / h);
                    }
                    idx[a] -= 1;
                }
            }
        }
    }
    let dt = if bsurf.times.len() > 1 { (bsurf.times[1] - bsurf.times[0]) * stride as f64 } else { 0.0 };
    let tail_steps = bsurf.tail_axes.iter().map(|a| if a.len() > 1 { a[1] - a[0] } else { 0.0 }).collect();
    Ok(LipschitzEstimate { l_t, l_tail, dt, time_stride: stride, tail_steps, cells: count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopeMethod {
    FiniteDifference,
    ImplicitRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSlope {
    /// State coordinate (0-based; 1 is `x2`).
    pub coord: usize,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeEstimate {
    pub time: f64,
    pub tail: Vec<f64>,
    pub b: f64,
    pub method: SlopeMethod,
    /// Interval for `∂_t b`; a point interval for finite differences and for the
    /// one-dimensional implicit formula. `None` when no bound is available.
    pub dt_interval: Option<(f64, f64)>,
    pub dt_std_errors: (f64, f64),
    pub tail_slopes: Vec<TailSlope>,
    /// `w°_1` at the cell (implicit ratio, `d ≥ 2`).
    pub denominator: Option<Estimate>,
}

/// Cell `(time index, tail multi-index)` of a boundary surface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub time: usize,
    pub tail: Vec<usize>,
}

fn finite_or_err(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Parameter(format!("{what} is not finite")))
    }
}

/// Finite-difference slopes of `level` at `cell`: central where both neighbours
/// exist, one-sided otherwise.
pub fn boundary_slopes_fd(level: &BoundarySurface, cell: &Cell) -> Result<SlopeEstimate> {
    let shape = level.tail_shape();
    if cell.time >= level.times.len()
        || cell.tail.len() != shape.len()
        || cell.tail.iter().zip(&shape).any(|(i, n)| i >= n)
    {
        return Err(Error::Parameter("cell outside the boundary grid".into()));
    }
    let b = finite_or_err(level.node(cell.time, &cell.tail), "boundary at the cell")?;
    let nt = level.times.len();
    let (k0, k1) = (cell.time.saturating_sub(1), (cell.time + 1).min(nt - 1));
    let dt = if k1 > k0 {
        let lo = finite_or_err(level.node(k0, &cell.tail), "time neighbour")?;
        let hi = finite_or_err(level.node(k1, &cell.tail), "time neighbour")?;
        (hi - lo) / (level.times[k1] - level.times[k0])
    } else {
        0.0
    };
    let mut tail_slopes = Vec::new();
    for a in 0..shape.len() {
        if shape[a] < 2 {
            continue;
        }
        let mut lo_idx = cell.tail.clone();
        let mut hi_idx = cell.tail.clone();
        lo_idx[a] = lo_idx[a].saturating_sub(1);
        hi_idx[a] = (hi_idx[a] + 1).min(shape[a] - 1);
        let lo = finite_or_err(level.node(cell.time, &lo_idx), "tail neighbour")?;
        let hi = finite_or_err(level.node(cell.time, &hi_idx), "tail neighbour")?;
        let h = level.tail_axes[a][hi_idx[a]] - level.tail_axes[a][lo_idx[a]];
        tail_slopes.push(TailSlope { coord: a + 1, value: (hi - lo) / h, std_error: 0.0 });
    }
    Ok(SlopeEstimate {
        time: level.times[cell.time],
        tail: cell.tail.iter().enumerate().map(|(a, &i)| level.tail_axes[a][i]).collect(),
        b,
        method: SlopeMethod::FiniteDifference,
        dt_interval: Some((dt, dt)),
        dt_std_errors: (0.0, 0.0),
        tail_slopes,
        denominator: None,
    })
}

/// Implicit-function slopes of the level set `level` at `cell`.
///
/// In one dimension `b' = −∂_t w / ∂_x w` with derivatives of the solved surface.
/// Otherwise Monte Carlo estimates at `(t, b_δ, tail)` with stopping against
/// `stopping` give `∂_k b = −w°_k / w°_1` and `∂_t b ∈ [−w̄/w°_1, −w̲/w°_1]`.
pub fn boundary_slopes_implicit(
    spec: &ProblemSpec,
    surface: Option<&ValueSurface>,
    level: &BoundarySurface,
    stopping: &BoundarySurface,
    cell: &Cell,
    settings: &McSettings,
) -> Result<SlopeEstimate> {
    let fd = boundary_slopes_fd(level, cell)?;
    let d = spec.dim();
    let t = fd.time;
    let mut x = [0.0; MAX_DIM];
    x[0] = fd.b;
    x[1..d].copy_from_slice(&fd.tail);
    if d == 1 {
        let surface =
            surface.ok_or_else(|| Error::Parameter("one-dimensional slopes need the solved surface".into()))?;
        let der = surface.fd_derivatives(t, &x[..1])?;
        let mut gf = [0.0; 1];
        spec.grad_f(t, &x[..1], &mut gf);
        let wt = der.dt - spec.dt_f(t, &x[..1]);
        let wx = der.grad[0].unwrap_or(f64::NAN) - gf[0];
        if !(wx > 0.0) {
            return Err(Error::DegenerateDenominator { mean: wx, std_error: 0.0 });
        }
        let s = -wt / wx;
        return Ok(SlopeEstimate {
            method: SlopeMethod::ImplicitRatio,
            dt_interval: Some((s, s)),
            tail_slopes: Vec::new(),
            ..fd
        });
    }
    let m = estimate_excess_functionals(spec, t, &x[..d], stopping, settings)?;
    let den = m.estimates[0].clone();
    if !(den.mean > 3.0 * den.std_error) {
        return Err(Error::DegenerateDenominator { mean: den.mean, std_error: den.std_error });
    }
    let tail_slopes = (1..d)
        .map(|k| {
            let (value, std_error) = m.neg_ratio(k, 0);
            TailSlope { coord: k, value, std_error }
        })
        .collect();
    let (dt_interval, dt_std_errors) = if m.len() >= d + 2 {
        let (lo, se_lo) = m.neg_ratio(d, 0);
        let (hi, se_hi) = m.neg_ratio(d + 1, 0);
        (Some((lo, hi)), (se_lo, se_hi))
    } else {
        (None, (0.0, 0.0))
    };
    Ok(SlopeEstimate {
        method: SlopeMethod::ImplicitRatio,
        dt_interval,
        dt_std_errors,
        tail_slopes,
        denominator: Some(den),
        ..fd
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_boundary_interpolates_exactly() {
        let b = BoundarySurface::from_fn(
            vec![0.0, 0.5, 1.0],
            vec![vec![-1.0, 0.0, 1.0]],
            Orientation::StopBelow,
            |t, z| 2.0 * t - 3.0 * z[0],
        )
        .unwrap();
        assert!((b.eval(0.3, &[0.25]) - (0.6 - 0.75)).abs() < 1e-14);
        // clamped outside the grid
        assert_eq!(b.eval(2.0, &[5.0]), b.eval(1.0, &[1.0]));
    }

    #[test]
    fn infinite_corner_falls_back_to_nearest_node() {
        let b = BoundarySurface::new(
            vec![0.0, 1.0],
            vec![],
            vec![1.0, f64::INFINITY],
            Provenance::PdeExact,
            Orientation::StopBelow,
        )
        .unwrap();
        assert_eq!(b.eval(0.4, &[]), 1.0);
        assert_eq!(b.eval(0.6, &[]), f64::INFINITY);
    }

    #[test]
    fn stacking_adds_a_trailing_axis() {
        let mk = |c: f64| BoundarySurface::constant(c, Orientation::StopBelow, 0.0, 1.0, 0);
        let s = BoundarySurface::stack(&[mk(1.0), mk(3.0)], vec![0.0, 2.0]).unwrap();
        assert_eq!(s.tail_dim(), 1);
        assert!((s.eval(0.5, &[1.0]) - 2.0).abs() < 1e-15);
        assert!(s.in_stopping(0.5, &[1.9, 1.0]));
        assert!(!s.in_stopping(0.5, &[2.1, 1.0]));
    }

    #[test]
    fn ids_track_content() {
        let a = BoundarySurface::constant(1.0, Orientation::StopBelow, 0.0, 1.0, 0);
        let b = BoundarySurface::constant(1.0, Orientation::StopBelow, 0.0, 1.0, 0);
        let c = BoundarySurface::constant(2.0, Orientation::StopBelow, 0.0, 1.0, 0);
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, c.id);
    }

    fn put_surface() -> (ProblemSpec, ValueSurface) {
        use crate::pde::{solve_vi, Grid, SolverSettings};
        use crate::problem::Payoff;
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
        (spec, s)
    }

    #[test]
    fn levels_converge_monotonically_to_the_stopping_edge() {
        let (_, s) = put_surface();
        let b0 = extract_boundary(&s, 0.0).unwrap();
        assert_eq!(b0.times.len(), 100);
        assert!(b0.values.iter().all(|b| b.is_finite()));
        let fam: Vec<_> = default_deltas(&s).into_iter().map(|d| extract_boundary(&s, d).unwrap()).collect();
        let dx = s.grid.axes[0].step();
        let rep = convergence_check(&b0, &fam, dx / 2.0).unwrap();
        assert!(rep.violations.is_empty(), "{:?}", rep.worst);
        assert!(rep.sup_gaps[0] > rep.sup_gaps[2]);
        // the boundary moves down as time to maturity grows
        assert!(fam[2].values[0] <= fam[2].values[98] + dx);
    }

    #[test]
    fn lipschitz_reports_infinite_cells() {
        let b = BoundarySurface::new(
            vec![0.0, 0.5, 1.0],
            vec![],
            vec![0.0, f64::NEG_INFINITY, 1.0],
            Provenance::PdeExact,
            Orientation::StopBelow,
        )
        .unwrap();
        match lipschitz_estimate(&b, &Window::time_only(0.0, 1.0), 1) {
            Err(Error::InfiniteCells(c)) => assert_eq!(c, vec![vec![0.5]]),
            other => panic!("{other:?}"),
        }
        let l = lipschitz_estimate(&b, &Window::time_only(0.0, 0.0), 1).unwrap();
        assert_eq!(l.l_t, 0.0);
    }

    #[test]
    fn lipschitz_of_linear_surface() {
        let b = BoundarySurface::from_fn(
            (0..11).map(|k| k as f64 / 10.0).collect(),
            vec![(0..5).map(|j| j as f64).collect()],
            Orientation::StopBelow,
            |t, z| 3.0 * t - 0.5 * z[0],
        )
        .unwrap();
        let l = lipschitz_estimate(&b, &Window { t_range: (0.0, 1.0), tail_ranges: vec![(1.0, 3.0)] }, 2).unwrap();
        assert!((l.l_t - 3.0).abs() < 1e-12);
        assert!((l.l_tail[0] - 0.5).abs() < 1e-12);
        assert_eq!(l.cells, 33);
        let fd = boundary_slopes_fd(&b, &Cell { time: 4, tail: vec![2] }).unwrap();
        assert!((fd.dt_interval.unwrap().0 - 3.0).abs() < 1e-12);
        assert!((fd.tail_slopes[0].value + 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_implicit_slope_agrees_with_differences() {
        let (spec, s) = put_surface();
        let level = extract_boundary(&s, default_deltas(&s)[1]).unwrap();
        let b0 = extract_boundary(&s, 0.0).unwrap();
        let cell = Cell { time: 50, tail: vec![] };
        let imp = boundary_slopes_implicit(&spec, Some(&s), &level, &b0, &cell, &McSettings::new(1, 0.01, 0)).unwrap();
        let fd = boundary_slopes_fd(&level, &cell).unwrap();
        let (a, b) = (imp.dt_interval.unwrap().0, fd.dt_interval.unwrap().0);
        assert!(a.is_finite() && a > 0.0);
        assert!((a - b).abs() < 0.5 * a.abs().max(b.abs()) + 0.05, "implicit {a} vs fd {b}");
    }
}

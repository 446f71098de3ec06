//! Built-in problems: an irreversible-investment problem in one dimension and a
//! three-dimensional price/demand/capacity family in three variants.
//!
//! In the three-dimensional examples the state is ordered `(y, x, z)` (or
//! `(θ, x, z)` with `θ = ln y`), so that the stopping coordinate comes first. `z`
//! carries no dynamics and is treated as a parameter: PDE solves freeze it and
//! sweep it over a grid.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boundary::{extract_boundary, BoundarySurface};
use crate::conditions::Region;
use crate::error::{Error, Result};
use crate::flow::{MeasureChange, MeasureMode};
use crate::math;
use crate::pde::{solve_vi, Axis, Grid, SolverSettings, ValueSurface};
use crate::problem::{Orientation, Payoff, ProblemSpec, DEFAULT_TRUNCATION_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleName {
    Example1,
    Example2a,
    Example2b,
    Example2c,
}

impl ExampleName {
    pub const ALL: [ExampleName; 4] =
        [ExampleName::Example1, ExampleName::Example2a, ExampleName::Example2b, ExampleName::Example2c];

    pub fn as_str(self) -> &'static str {
        match self {
            ExampleName::Example1 => "example1",
            ExampleName::Example2a => "example2a",
            ExampleName::Example2b => "example2b",
            ExampleName::Example2c => "example2c",
        }
    }

    /// Parameter names and defaults.
    pub fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            ExampleName::Example1 => {
                &[("r", 0.1), ("alpha", 0.5), ("c1", 1.0), ("c2", 1.0), ("mu", 0.0), ("sigma", 0.25), ("T", 1.0)]
            }
            ExampleName::Example2a => {
                &[("r", 0.1), ("alpha", 0.05), ("beta", 0.3), ("mu", 0.02), ("sigma", 0.3), ("T", 1.0)]
            }
            ExampleName::Example2b | ExampleName::Example2c => &[
                ("r", 0.1),
                ("alpha", 0.05),
                ("beta", 0.3),
                ("mu", 0.02),
                ("sigma", 0.3),
                ("zeta", 0.0),
                ("cap", DEFAULT_TRUNCATION_CAP),
            ],
        }
    }

    pub fn dim(self) -> usize {
        match self {
            ExampleName::Example1 => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for ExampleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExampleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExampleName::ALL.into_iter().find(|n| n.as_str() == s.to_ascii_lowercase()).ok_or_else(|| {
            Error::Parameter(format!("unknown example `{s}` (expected example1, example2a, example2b or example2c)"))
        })
    }
}

/// An example name with parameter overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleId {
    pub name: ExampleName,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ExampleId {
    pub fn new(name: ExampleName) -> Self {
        Self { name, params: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    /// Overrides merged over the defaults. Unknown keys are an error.
    pub fn resolved(&self) -> Result<BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, f64> = self.name.defaults().iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in &self.params {
            let key = if k == "alpha_ou" && self.name != ExampleName::Example1 { "alpha" } else { k.as_str() };
            match out.get_mut(key) {
                Some(slot) => *slot = *v,
                None => {
                    let known: Vec<&str> = self.name.defaults().iter().map(|(k, _)| *k).collect();
                    return Err(Error::Parameter(format!(
                        "{} has no parameter `{k}` (known: {})",
                        self.name,
                        known.join(", ")
                    )));
                }
            }
            if !v.is_finite() {
                return Err(Error::Parameter(format!("parameter `{k}` must be finite")));
            }
        }
        Ok(out)
    }
}

/// A built example: the problem plus what the pipeline needs to treat it.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: ExampleId,
    pub params: BTreeMap<String, f64>,
    pub spec: ProblemSpec,
    /// Coordinate names in state order.
    pub coords: Vec<&'static str>,
    /// Coordinates without dynamics, swept as parameters.
    pub parameter_coords: Vec<usize>,
    /// Change of measure used by the slope estimates (example2c).
    pub measure: Option<MeasureChange>,
}

impl Example {
    pub fn param(&self, key: &str) -> f64 {
        self.params[key]
    }
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Parameter(msg.to_string()))
    }
}

pub fn build_example(id: &ExampleId) -> Result<Example> {
    let p = id.resolved()?;
    let g = |k: &str| p[k];
    let (spec, coords, parameter_coords, measure) = match id.name {
        ExampleName::Example1 => {
            let (r, alpha, c1, c2, mu, sigma, t) = (g("r"), g("alpha"), g("c1"), g("c2"), g("mu"), g("sigma"), g("T"));
            check(r > 0.0, "example1 requires r > 0")?;
            check(alpha > 0.0 && alpha < 1.0, "example1 requires alpha in (0,1)")?;
            check(c1 >= c2 && c2 >= 0.0, "example1 requires c1 >= c2 >= 0")?;
            check(sigma > 0.0 && t > 0.0, "example1 requires sigma > 0 and T > 0")?;
            let k = 1.0 - alpha;
            let builder = ProblemSpec::builder(1)
                .name("example1")
                .finite_horizon(t)
                .kill_rate(r)
                .constant_drift(vec![mu])
                .sigma(vec![sigma])
                .running(
                    Payoff::new(move |_, x| -math::exp(-k * x[0]))
                        .with_time_derivative(|_, _| 0.0)
                        .with_gradient(move |_, x, o| o[0] = k * math::exp(-k * x[0])),
                )
                .obstacle(Payoff::constant(-c1))
                .generator_partials(move |_, x, o| {
                    o[0] = k * math::exp(-k * x[0]);
                    0.0
                });
            let spec =
                if c1 == c2 { builder.terminal_equals_obstacle() } else { builder.terminal(Payoff::constant(-c2)) }
                    .build()?;
            (spec, vec!["x"], vec![], None)
        }
        ExampleName::Example2a => {
            let (r, alpha, beta, mu, sigma, t) = (g("r"), g("alpha"), g("beta"), g("mu"), g("sigma"), g("T"));
            check(r > 0.0, "example2a requires r > 0")?;
            check(sigma > 0.0 && beta >= 0.0 && t > 0.0, "example2a requires sigma > 0, beta >= 0, T > 0")?;
            let spec = ProblemSpec::builder(3)
                .name("example2a")
                .finite_horizon(t)
                .kill_rate(r)
                .constant_drift(vec![mu, alpha, 0.0])
                .sigma(diag3(sigma, beta))
                .running(Payoff::linear(vec![0.0, -1.0, 1.0], 0.0))
                .obstacle(Payoff::linear(vec![-1.0, 0.0, 0.0], 0.0))
                .terminal(Payoff::linear(vec![-1.0, 0.0, 0.0], 0.0))
                .generator_partials(move |_, _, o| {
                    o.copy_from_slice(&[r, -1.0, 1.0]);
                    0.0
                })
                .build()?;
            (spec, vec!["y", "x", "z"], vec![2], None)
        }
        ExampleName::Example2b => {
            let (r, alpha, beta, mu, sigma, zeta, cap) =
                (g("r"), g("alpha"), g("beta"), g("mu"), g("sigma"), g("zeta"), g("cap"));
            check(r > alpha.max(mu), "example2b requires r > max(alpha, mu)")?;
            check(alpha >= 0.0 && sigma > 0.0 && beta >= 0.0, "example2b requires alpha >= 0, sigma > 0, beta >= 0")?;
            let spec = ProblemSpec::builder(3)
                .name("example2b")
                .infinite_horizon()
                .truncation_cap(cap)
                .kill_rate(r)
                .drift(
                    move |x, o| {
                        o[0] = mu;
                        o[1] = alpha * (zeta - x[1]);
                        o[2] = 0.0;
                    },
                    move |_, j| {
                        j.fill(0.0);
                        j[4] = -alpha;
                    },
                )
                .sigma(diag3(sigma, beta))
                .running(Payoff::linear(vec![0.0, -1.0, 1.0], 0.0))
                .obstacle(Payoff::linear(vec![-1.0, 0.0, 0.0], 0.0))
                .terminal_equals_obstacle()
                .generator_partials(move |_, _, o| {
                    o.copy_from_slice(&[r, -1.0, 1.0]);
                    0.0
                })
                .build()?;
            (spec, vec!["y", "x", "z"], vec![2], None)
        }
        ExampleName::Example2c => {
            let (r, alpha, beta, mu, sigma, zeta, cap) =
                (g("r"), g("alpha"), g("beta"), g("mu"), g("sigma"), g("zeta"), g("cap"));
            check(r > alpha.max(mu), "example2c requires r > max(alpha, mu)")?;
            check(alpha >= 0.0 && sigma > 0.0 && beta >= 0.0, "example2c requires alpha >= 0, sigma > 0, beta >= 0")?;
            let spec = ProblemSpec::builder(3)
                .name("example2c")
                .infinite_horizon()
                .truncation_cap(cap)
                .kill_rate(r)
                .drift(
                    move |x, o| {
                        o[0] = mu - 0.5 * sigma * sigma;
                        o[1] = alpha * (zeta - x[1]);
                        o[2] = 0.0;
                    },
                    move |_, j| {
                        j.fill(0.0);
                        j[4] = -alpha;
                    },
                )
                .sigma(diag3(sigma, beta))
                .running(Payoff::linear(vec![0.0, -1.0, 1.0], 0.0))
                .obstacle(
                    Payoff::new(|_, x| -math::exp(x[0]))
                        .with_time_derivative(|_, _| 0.0)
                        .with_second_time_derivative(|_, _| 0.0)
                        .with_gradient(|_, x, o| {
                            o.fill(0.0);
                            o[0] = -math::exp(x[0]);
                        })
                        .with_hessian(|_, x, o| {
                            o.fill(0.0);
                            o[0] = -math::exp(x[0]);
                        }),
                )
                .terminal_equals_obstacle()
                .generator_partials(move |_, x, o| {
                    o.copy_from_slice(&[(r - mu) * math::exp(x[0]), -1.0, 1.0]);
                    0.0
                })
                .build()?;
            let measure = MeasureChange { eta: vec![sigma, 0.0, 0.0], mode: MeasureMode::Reweight };
            (spec, vec!["theta", "x", "z"], vec![2], Some(measure))
        }
    };
    Ok(Example { id: id.clone(), params: p, spec, coords, parameter_coords, measure })
}

fn diag3(a: f64, b: f64) -> Vec<f64> {
    vec![a, 0.0, 0.0, 0.0, b, 0.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    /// Zero crossing of `h + m` (example1).
    Gamma,
    /// Bound `1/(r − μ)` on the parameter slope (example2c).
    SlopeBound,
    /// Whether `g = f(T)` (example1).
    TerminalEqualsObstacle,
    /// Shape of the stopping set.
    StoppingShape,
    /// Integrand of the `∂_x v` representation (example1).
    GradientIntegrand,
    /// Exact boundary slopes `(∂_x b, ∂_z b)` (example2a) or `∂_z b` (example2b).
    BoundarySlopes,
}

/// `(1−α) e^{−rs−(1−α)x}`: integrate along paths up to the stopping time to get `∂_x v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientIntegrand {
    pub alpha: f64,
    pub r: f64,
}

impl GradientIntegrand {
    pub fn eval(&self, s: f64, x: f64) -> f64 {
        let k = 1.0 - self.alpha;
        k * math::exp(-self.r * s - k * x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AnalyticReference {
    Scalar { value: f64 },
    Flag { value: bool },
    Vector { values: Vec<f64> },
    Shape { coord: usize, orientation: Orientation, description: String },
    Integrand { integrand: GradientIntegrand },
}

pub fn analytic_reference(id: &ExampleId, quantity: Quantity) -> Result<AnalyticReference> {
    let p = id.resolved()?;
    let unsupported = || Err(Error::Unsupported(format!("{quantity:?} is not available for {}", id.name)));
    use ExampleName::*;
    Ok(match (id.name, quantity) {
        (Example1, Quantity::Gamma) => {
            AnalyticReference::Scalar { value: math::ln(1.0 / (p["r"] * p["c1"])) / (1.0 - p["alpha"]) }
        }
        (Example1, Quantity::TerminalEqualsObstacle) => AnalyticReference::Flag { value: p["c1"] == p["c2"] },
        (Example1, Quantity::GradientIntegrand) => {
            AnalyticReference::Integrand { integrand: GradientIntegrand { alpha: p["alpha"], r: p["r"] } }
        }
        (Example1, Quantity::StoppingShape) => AnalyticReference::Shape {
            coord: 0,
            orientation: Orientation::StopBelow,
            description: "S = {(t,x): x <= b(t)}".into(),
        },
        (Example2c, Quantity::SlopeBound) => AnalyticReference::Scalar { value: 1.0 / (p["r"] - p["mu"]) },
        (Example2a | Example2b, Quantity::StoppingShape) => AnalyticReference::Shape {
            coord: 0,
            orientation: Orientation::StopBelow,
            description: "S = {(t,y,x,z): y <= b(t,x,z)}".into(),
        },
        (Example2c, Quantity::StoppingShape) => AnalyticReference::Shape {
            coord: 0,
            orientation: Orientation::StopBelow,
            description: "S = {(theta,x,z): theta <= b(x,z)}".into(),
        },
        (Example2a, Quantity::BoundarySlopes) => {
            AnalyticReference::Vector { values: vec![1.0 / p["r"], -1.0 / p["r"]] }
        }
        (Example2b, Quantity::BoundarySlopes) => AnalyticReference::Vector { values: vec![-1.0 / p["r"]] },
        _ => return unsupported(),
    })
}

/// Resolution of the default grids. `Standard` is the acceptance resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    Coarse,
    Standard,
}

/// Default PDE grid for the slice `z` (ignored for example1).
pub fn default_grid(ex: &Example, z: f64, res: Resolution) -> Grid {
    let p = &ex.params;
    let coarse = res == Resolution::Coarse;
    let big_t = ex.spec.effective_horizon();
    match ex.id.name {
        ExampleName::Example1 => {
            let gamma = gamma_or(ex, 4.6);
            let (nt, nx) = if coarse { (100, 150) } else { (400, 600) };
            Grid::new_1d(0.0, big_t, nt, (gamma - 3.0, gamma + 2.5, nx))
        }
        ExampleName::Example2a | ExampleName::Example2b => {
            let r = p["r"];
            let mu = p["mu"];
            let (xr, margin_lo, margin_hi) =
                if ex.id.name == ExampleName::Example2a { (2.5, 3.5, 3.0) } else { (4.0, 15.0, 10.0) };
            // γ(x, z) = (x − z + μ)/r; the boundary lies below it.
            let lo = (-xr - z + mu) / r - margin_lo;
            let hi = (xr - z + mu) / r + margin_hi;
            let (nt, ny, nx) = match (ex.id.name, coarse) {
                (ExampleName::Example2a, false) => (400, 600, 49),
                (ExampleName::Example2a, true) => (100, 200, 25),
                (_, false) => (500, 400, 41),
                (_, true) => (250, 160, 21),
            };
            Grid::new_2d(0.0, big_t, nt, (lo, hi, ny), Axis::new(1, -xr, xr, nx)).with_frozen(2, z)
        }
        ExampleName::Example2c => {
            // Continuation extends upward without bound, so the upper face sits
            // about 3.5 standard deviations of θ_T above the boundary.
            let (nt, nth, nx) = if coarse { (250, 141, 21) } else { (500, 281, 41) };
            Grid::new_2d(0.0, big_t, nt, (-4.0, 10.0, nth), Axis::new(1, -4.0, 4.0, nx)).with_frozen(2, z)
        }
    }
}

fn gamma_or(ex: &Example, fallback: f64) -> f64 {
    match analytic_reference(&ex.id, Quantity::Gamma) {
        Ok(AnalyticReference::Scalar { value }) if value.is_finite() => value,
        _ => fallback,
    }
}

/// Region on which conditions are sampled.
pub fn default_region(ex: &Example) -> Region {
    let big_t = ex.spec.effective_horizon();
    match ex.id.name {
        ExampleName::Example1 => {
            let g = gamma_or(ex, 4.6);
            Region { t: (0.0, big_t), x: vec![(g - 3.0, g + 2.5)] }
        }
        ExampleName::Example2a => Region { t: (0.0, big_t), x: vec![(-30.0, 30.0), (-2.5, 2.5), (-2.0, 2.0)] },
        ExampleName::Example2b => Region { t: (0.0, big_t), x: vec![(-50.0, 50.0), (-4.0, 4.0), (-2.0, 2.0)] },
        ExampleName::Example2c => Region { t: (0.0, big_t), x: vec![(-4.0, 6.0), (-4.0, 4.0), (-2.0, 2.0)] },
    }
}

/// Values of the parameter coordinate `z` swept by default.
pub fn default_z_values(ex: &Example) -> Vec<f64> {
    match ex.id.name {
        ExampleName::Example1 => vec![0.0],
        ExampleName::Example2c => vec![-1.5, -1.0, -0.5],
        _ => vec![-0.5, 0.0, 0.5],
    }
}

/// Probe points `(t, x)` in the continuation region, away from the box faces.
pub fn default_probes(ex: &Example) -> Vec<(f64, Vec<f64>)> {
    match ex.id.name {
        ExampleName::Example1 => {
            let g = gamma_or(ex, 4.6);
            let t = ex.spec.effective_horizon();
            [(0.1, 0.15), (0.3, 0.25), (0.5, 0.35), (0.7, 0.45), (0.2, 0.6)]
                .iter()
                .map(|&(s, dx)| (s * t, vec![g + dx]))
                .collect()
        }
        ExampleName::Example2a | ExampleName::Example2b => {
            let (r, mu) = (ex.params["r"], ex.params["mu"]);
            let gamma = |x: f64, z: f64| (x - z + mu) / r;
            let t = if ex.id.name == ExampleName::Example2a { ex.spec.effective_horizon() } else { 1.0 };
            [(0.2, 0.0, 0.8), (0.4, 0.1, 1.5), (0.5, -0.2, 0.5), (0.6, 0.2, 1.0), (0.8, -0.1, 2.0)]
                .iter()
                .map(|&(s, x, dy)| (s * t, vec![gamma(x, 0.0) + dy, x, 0.0]))
                .collect()
        }
        ExampleName::Example2c => [
            (0.0, 0.0, -1.0, 2.5),
            (1.0, 0.2, -1.0, 3.0),
            (2.0, -0.2, -0.5, 1.0),
            (0.5, 0.1, -1.5, 3.2),
            (1.5, 0.0, -1.0, 2.5),
        ]
        .iter()
        .map(|&(t, x, z, th)| (t, vec![th, x, z]))
        .collect(),
    }
}

/// One solve per `z` value, with boundaries stacked along a trailing `z` axis.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub z_values: Vec<f64>,
    pub surfaces: Vec<ValueSurface>,
    /// Edge of the stopping set, tail `(x, z)`.
    pub b0: BoundarySurface,
    /// Level sets for each `δ`, same layout as `b0`.
    pub levels: Vec<(f64, BoundarySurface)>,
}

/// Solves the slices `z ∈ z_values` on `grid_for(z)` and stacks the boundaries.
/// `deltas` are absolute level heights.
pub fn sweep(
    ex: &Example,
    z_values: &[f64],
    grid_for: impl Fn(f64) -> Grid,
    settings: &SolverSettings,
    deltas: &[f64],
) -> Result<Sweep> {
    if ex.parameter_coords.is_empty() {
        return Err(Error::Unsupported(format!("{} has no parameter coordinate to sweep", ex.id.name)));
    }
    if z_values.is_empty() {
        return Err(Error::Parameter("empty z sweep".into()));
    }
    let mut surfaces = Vec::with_capacity(z_values.len());
    let mut b0s = Vec::new();
    let mut lv: Vec<Vec<BoundarySurface>> = vec![Vec::new(); deltas.len()];
    for &z in z_values {
        let s = solve_vi(&ex.spec, &grid_for(z), settings)?;
        b0s.push(extract_boundary(&s, 0.0)?);
        for (k, &d) in deltas.iter().enumerate() {
            lv[k].push(extract_boundary(&s, d)?);
        }
        surfaces.push(s);
    }
    let b0 = stack_z(&b0s, z_values)?;
    let levels = deltas
        .iter()
        .zip(lv)
        .map(|(&d, layers)| stack_z(&layers, z_values).map(|b| (d, b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sweep { z_values: z_values.to_vec(), surfaces, b0, levels })
}

/// Stacks per-slice boundaries (tail `(x, z_frozen)`) into one with a `z` axis.
/// Slices must share their x nodes.
pub fn stack_z(layers: &[BoundarySurface], z_values: &[f64]) -> Result<BoundarySurface> {
    // Each slice has tail axes [x nodes, single z node]; drop the singleton first.
    let flat: Vec<BoundarySurface> = layers
        .iter()
        .map(|b| {
            let mut c = b.clone();
            if c.tail_axes.last().is_some_and(|a| a.len() == 1) {
                c.tail_axes.pop();
            }
            c
        })
        .collect();
    let mut out = BoundarySurface::stack(&flat, z_values.to_vec())?;
    out.provenance = layers[0].provenance;
    for (l, z) in layers.iter().zip(z_values) {
        for w in &l.warnings {
            out.warnings.push(format!("z={z}: {w}"));
        }
    }
    Ok(out)
}

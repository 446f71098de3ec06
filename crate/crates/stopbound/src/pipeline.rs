//! The batch pipeline: conditions, solve, boundary family, slopes, Monte Carlo.

use std::collections::BTreeMap;

use serde::Serialize;
use stopbound_core::boundary::{
    boundary_slopes_fd, boundary_slopes_implicit, convergence_check, extract_boundary, lipschitz_estimate,
    BoundarySurface, Cell, ConvergenceReport, LipschitzEstimate, SlopeEstimate, Window, DEFAULT_COLLAR,
};
use stopbound_core::conditions::{
    applicability, check_condition, Applicability, CheckSettings, ConditionReport, ConditionTag, Region,
};
use stopbound_core::examples::{
    build_example, default_grid, default_probes, default_region, default_z_values, stack_z, Example, ExampleName,
    Resolution,
};
use stopbound_core::flow::{diagnostics_streaming, DiagnosticsReport, MeasureChange};
use stopbound_core::pde::{mask_monotonicity_violations, solve_vi, Grid, SolverSettings, ValueSurface};
use stopbound_core::represent::{
    estimate_occupation_paired, estimate_representations, martingale_profile, MartingaleProfile, McSettings,
    RepresentationSet,
};
use stopbound_core::{gamma_curve, Horizon, Orientation, ProblemSpec};

use crate::config::{GridConfig, Probe, ProblemRef, RunConfig};
use crate::error::RunError;
use crate::formats::{boundary_csv, surface_csv, to_json};
use crate::manifest::ArtifactWriter;

/// One PDE solve; `z` is the value of the parameter coordinate, if any.
#[derive(Debug, Clone)]
pub struct Slice {
    pub z: Option<f64>,
    pub grid: Grid,
}

/// Everything the pipeline needs about a problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub spec: ProblemSpec,
    /// Coordinate names in state order.
    pub coords: Vec<String>,
    /// State coordinate without dynamics that is swept over the slices.
    pub parameter_coord: Option<usize>,
    pub slices: Vec<Slice>,
    /// Box sampled by the condition checks.
    pub region: Region,
    pub probes: Vec<Probe>,
    /// Change of measure cross-checked at slope cells, with the occupation discount.
    pub measure: Option<(MeasureChange, f64)>,
    /// Default Euler step for Monte Carlo.
    pub mc_dt: f64,
}

impl Problem {
    /// Built-in example with the config's grid and sweep settings applied.
    pub fn from_example(ex: &Example, cfg: &RunConfig) -> Result<Self, RunError> {
        let res = cfg.grid.resolution.unwrap_or(Resolution::Standard);
        let parameter_coord = ex.parameter_coords.first().copied();
        let zs = match (&cfg.z_values, parameter_coord) {
            (Some(_), None) => {
                return Err(RunError::Config(format!("{} has no parameter coordinate; drop z_values", ex.id.name)))
            }
            (Some(z), Some(_)) => z.clone(),
            (None, Some(_)) => default_z_values(ex),
            (None, None) => vec![0.0],
        };
        let slices =
            zs.iter().map(|&z| Slice { z: parameter_coord.map(|_| z), grid: default_grid(ex, z, res) }).collect();
        let spec = ex.spec.clone();
        // The e^θ payoff of example2c magnifies the discrete-monitoring bias.
        let mc_dt = match ex.id.name {
            ExampleName::Example2c => 0.01,
            _ if spec.truncation().is_some() => 0.05,
            _ => 1e-3,
        };
        let measure = ex.measure.clone().map(|m| {
            let kappa = ex.params.get("r").copied().unwrap_or(0.0) - ex.params.get("mu").copied().unwrap_or(0.0);
            (m, kappa)
        });
        Ok(Self {
            name: ex.id.name.to_string(),
            spec,
            coords: ex.coords.iter().map(|c| c.to_string()).collect(),
            parameter_coord,
            slices,
            region: default_region(ex),
            probes: default_probes(ex).into_iter().map(|(t, x)| Probe { t, x }).collect(),
            measure,
            mc_dt,
        })
    }
}

type Builder = Box<dyn Fn(&RunConfig) -> Result<Problem, RunError> + Send + Sync>;

/// Custom problems addressable from configs as `{"custom": name}`.
#[derive(Default)]
pub struct Registry {
    custom: BTreeMap<String, Builder>,
}

impl Registry {
    pub fn register(
        &mut self,
        name: &str,
        build: impl Fn(&RunConfig) -> Result<Problem, RunError> + Send + Sync + 'static,
    ) {
        self.custom.insert(name.to_string(), Box::new(build));
    }

    pub fn resolve(&self, cfg: &RunConfig) -> Result<Problem, RunError> {
        let mut p = match &cfg.problem {
            ProblemRef::Example(id) => {
                let ex = build_example(id).map_err(|e| RunError::Config(e.to_string()))?;
                Problem::from_example(&ex, cfg)?
            }
            ProblemRef::Custom(name) => {
                let b = self
                    .custom
                    .get(name)
                    .ok_or_else(|| RunError::Config(format!("no custom problem named `{name}` is registered")))?;
                b(cfg)?
            }
        };
        apply_grid_overrides(&mut p.slices, &cfg.grid)?;
        Ok(p)
    }
}

fn apply_grid_overrides(slices: &mut [Slice], g: &GridConfig) -> Result<(), RunError> {
    for s in slices {
        let grid = &mut s.grid;
        if let Some(n) = g.n_t {
            grid.n_t = n;
        }
        if let Some(n) = g.n_x1 {
            grid.axes[0].n = n;
        }
        if let Some((lo, hi)) = g.x1 {
            grid.axes[0].lo = lo;
            grid.axes[0].hi = hi;
        }
        if g.n_x2.is_some() || g.x2.is_some() {
            let Some(a) = grid.axes.get_mut(1) else {
                return Err(RunError::Config("grid.n_x2/grid.x2 given for a problem with one spatial axis".into()));
            };
            if let Some(n) = g.n_x2 {
                a.n = n;
            }
            if let Some((lo, hi)) = g.x2 {
                a.lo = lo;
                a.hi = hi;
            }
        }
    }
    Ok(())
}

/// A verification check: passes iff `lower ≤ value ≤ upper`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Distance to the nearest violated side; negative when failing.
    pub margin: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, lower: Option<f64>, upper: Option<f64>) -> Self {
        let lo = lower.map_or(f64::INFINITY, |l| value - l);
        let hi = upper.map_or(f64::INFINITY, |u| u - value);
        let margin = lo.min(hi);
        Self { name: name.into(), value, lower, upper, margin, passed: margin >= 0.0 }
    }

    pub fn at_most(name: impl Into<String>, value: f64, upper: f64) -> Self {
        Self::new(name, value, None, Some(upper))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionsArtifact {
    pub problem: String,
    pub reports: Vec<ConditionReport>,
    pub applicability: Applicability,
}

#[derive(Debug, Clone, Serialize)]
struct SliceMeta<'a> {
    z: Option<f64>,
    grid: &'a Grid,
    settings: SolverSettings,
    sweeps_total: usize,
    sweeps_max: usize,
    upwind_nodes: usize,
    w_range: f64,
    mask_tol: f64,
    mask_violations: usize,
    warnings: &'a [String],
}

#[derive(Debug, Clone, Serialize)]
struct SurfaceMeta<'a> {
    problem: &'a str,
    coords: &'a [String],
    columns: Vec<String>,
    export_max_nodes: (usize, usize, usize),
    psor_tolerance: f64,
    truncation: Option<stopbound_core::problem::Truncation>,
    slices: Vec<SliceMeta<'a>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellSlope {
    pub cell: Cell,
    pub finite_difference: SlopeEstimate,
    pub implicit: Option<SlopeEstimate>,
    pub implicit_error: Option<String>,
    /// Reweighted and shifted-drift occupation estimates with their joint SE.
    pub measure_pair: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopesArtifact {
    /// Level used for the Lipschitz estimate (the smallest).
    pub lipschitz_delta: f64,
    /// Level used for the cell slopes (the largest, where `∂_1 w` is well away from zero).
    pub cell_delta: f64,
    pub deltas: Vec<f64>,
    pub convergence: ConvergenceReport,
    pub lipschitz: Option<LipschitzEstimate>,
    pub lipschitz_error: Option<String>,
    pub window: Window,
    pub cells: Vec<CellSlope>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeResult {
    pub t: f64,
    pub x: Vec<f64>,
    pub pde_value: f64,
    pub pde_dt: f64,
    pub pde_gradient: Vec<Option<f64>>,
    pub mc: RepresentationSet,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbesArtifact {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub probes: Vec<ProbeResult>,
    pub martingale: Option<MartingaleProfile>,
    pub diagnostics: Option<DiagnosticsReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub problem: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub conditions: Vec<(ConditionTag, stopbound_core::conditions::Verdict)>,
    pub applicability: Applicability,
    pub lipschitz_l_t: Option<f64>,
    pub notes: Vec<String>,
}

impl Summary {
    pub fn render(&self) -> String {
        let mut s = format!("problem {}  seed {}\n\nconditions (informational)\n", self.problem, self.seed);
        for (tag, v) in &self.conditions {
            let v = serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            s.push_str(&format!("  {:<22} {v}\n", tag.as_str()));
        }
        let a = &self.applicability;
        s.push_str(&format!(
            "  applicability: lipschitz_1d={} under_f={} under_g={} custom_path={}\n",
            a.lipschitz_1d, a.under_f, a.under_g, a.custom_path
        ));
        for n in &a.notes {
            s.push_str(&format!("  note: {n}\n"));
        }
        if let Some(l) = self.lipschitz_l_t {
            s.push_str(&format!("\nlipschitz L_t of the smallest level set: {l:.6}\n"));
        }
        s.push_str("\nchecks\n");
        for c in &self.checks {
            let bound = match (c.lower, c.upper) {
                (Some(l), Some(u)) => format!("in [{l:.6e}, {u:.6e}]"),
                (Some(l), None) => format!(">= {l:.6e}"),
                (None, Some(u)) => format!("<= {u:.6e}"),
                (None, None) => String::new(),
            };
            s.push_str(&format!(
                "  {} {:<34} {:.6e} {bound}  margin {:.3e}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.margin
            ));
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!("\n{} checks, {failed} failed\n", self.checks.len()));
        s
    }
}

/// Result of a completed pipeline.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Summary,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.summary.passed {
            0
        } else {
            1
        }
    }
}

/// Runs every stage, writing artifacts to `cfg.output_dir`. On error the manifest
/// records the failing stage and is left marked incomplete.
pub fn run(cfg: &RunConfig, registry: &Registry) -> Result<Outcome, RunError> {
    cfg.validate()?;
    let problem = registry.resolve(cfg)?;
    let probes = select_probes(&problem, cfg)?;
    let mut out = ArtifactWriter::create(&cfg.output_dir)?;
    match run_stages(cfg, &problem, &probes, &mut out) {
        Ok(o) => {
            out.finish()?;
            Ok(o)
        }
        Err(e) => {
            out.fail(&e)?;
            Err(e)
        }
    }
}

fn select_probes(p: &Problem, cfg: &RunConfig) -> Result<Vec<Probe>, RunError> {
    let d = p.spec.dim();
    let matches_slice = |pr: &Probe| match p.parameter_coord {
        Some(c) => p.slices.iter().any(|s| s.z == Some(pr.x[c])),
        None => true,
    };
    match &cfg.probes {
        Some(ps) => {
            for pr in ps {
                if pr.x.len() != d {
                    return Err(RunError::Config(format!(
                        "probe {:?} has {} coordinates, problem has {d}",
                        pr.x,
                        pr.x.len()
                    )));
                }
                if !matches_slice(pr) {
                    return Err(RunError::Config(format!(
                        "probe {:?}: its parameter coordinate is not among z_values",
                        pr.x
                    )));
                }
                if !(pr.t >= 0.0 && pr.t < p.spec.effective_horizon()) {
                    return Err(RunError::Config(format!("probe time {} outside [0, T)", pr.t)));
                }
            }
            Ok(ps.clone())
        }
        None => Ok(p.probes.iter().filter(|pr| matches_slice(pr)).cloned().collect()),
    }
}

fn slice_for<'a>(p: &Problem, surfaces: &'a [ValueSurface], x: &[f64]) -> &'a ValueSurface {
    match p.parameter_coord {
        Some(c) => {
            let i = p.slices.iter().position(|s| s.z == Some(x[c])).expect("probe slices checked up front");
            &surfaces[i]
        }
        None => &surfaces[0],
    }
}

fn run_stages(cfg: &RunConfig, p: &Problem, probes: &[Probe], out: &mut ArtifactWriter) -> Result<Outcome, RunError> {
    let spec = &p.spec;
    let d = spec.dim();
    let seed = cfg.mc.seed;
    let mut checks = Vec::new();
    let mut notes = Vec::new();

    // Conditions.
    out.stage("conditions")?;
    let tags: Vec<ConditionTag> = match &cfg.conditions {
        Some(t) => t.clone(),
        None => ConditionTag::ALL.into_iter().filter(|t| *t != ConditionTag::Thm43).collect(),
    };
    let cs = CheckSettings::with_samples(cfg.condition_samples, seed);
    let reports = tags
        .iter()
        .map(|&t| check_condition(spec, t, &p.region, &cs))
        .collect::<Result<Vec<_>, _>>()
        .map_err(RunError::at("conditions"))?;
    let appl = applicability(d, matches!(spec.horizon(), Horizon::Finite(_)), &reports);
    let conditions: Vec<_> = reports.iter().map(|r| (r.tag, r.verdict)).collect();
    out.write(
        "conditions.json",
        &to_json(&ConditionsArtifact { problem: p.name.clone(), reports, applicability: appl.clone() }),
    )?;

    // Solve.
    out.stage("solve")?;
    let settings = SolverSettings::default();
    let mut surfaces = Vec::with_capacity(p.slices.len());
    let mut csv = String::new();
    let mut metas_raw = Vec::new();
    for (i, s) in p.slices.iter().enumerate() {
        let surf = solve_vi(spec, &s.grid, &settings).map_err(RunError::at("solve"))?;
        let mask = surf.classify_regions(surf.default_tol());
        let viol = mask_monotonicity_violations(&surf, &mask).len();
        let name = match s.z {
            Some(z) => format!("mask-monotone[z={z}]"),
            None => "mask-monotone".into(),
        };
        checks.push(Check::at_most(name, viol as f64, 0.0));
        csv.push_str(&surface_csv(&surf, &mask, cfg.export.surface_max_nodes, i == 0));
        metas_raw.push((mask.tol, viol));
        for w in &surf.warnings {
            notes.push(format!("solve{}: {w}", s.z.map(|z| format!(" z={z}")).unwrap_or_default()));
        }
        surfaces.push(surf);
    }
    let meta = SurfaceMeta {
        problem: &p.name,
        coords: &p.coords,
        columns: std::iter::once("t".to_string())
            .chain((1..=d).map(|k| format!("x{k}")))
            .chain(["v", "w", "region"].map(String::from))
            .collect(),
        export_max_nodes: cfg.export.surface_max_nodes,
        psor_tolerance: settings.tol,
        truncation: spec.truncation(),
        slices: surfaces
            .iter()
            .zip(&p.slices)
            .zip(&metas_raw)
            .map(|((s, sl), &(mask_tol, mask_violations))| SliceMeta {
                z: sl.z,
                grid: &s.grid,
                settings: s.settings,
                sweeps_total: s.sweeps.iter().sum(),
                sweeps_max: s.sweeps.iter().copied().max().unwrap_or(0),
                upwind_nodes: s.upwind_nodes,
                w_range: s.w_range(),
                mask_tol,
                mask_violations,
                warnings: &s.warnings,
            })
            .collect(),
    };
    out.write("value_surface.csv", csv.as_bytes())?;
    out.write("value_surface.json", &to_json(&meta))?;

    // Boundary family.
    out.stage("boundary")?;
    let scale = surfaces.iter().map(ValueSurface::w_range).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let deltas: Vec<f64> = cfg.deltas.iter().map(|r| r * scale).collect();
    let extract = |delta: f64| -> Result<BoundarySurface, RunError> {
        let layers = surfaces
            .iter()
            .map(|s| extract_boundary(s, delta))
            .collect::<Result<Vec<_>, _>>()
            .map_err(RunError::at("boundary"))?;
        match p.parameter_coord {
            Some(_) => {
                let zs: Vec<f64> = p.slices.iter().map(|s| s.z.unwrap_or(0.0)).collect();
                stack_z(&layers, &zs).map_err(RunError::at("boundary"))
            }
            None => Ok(layers.into_iter().next().unwrap()),
        }
    };
    let b0 = extract(0.0)?;
    let levels = deltas.iter().map(|&dl| extract(dl)).collect::<Result<Vec<_>, _>>()?;
    let dx1 = p.slices.iter().map(|s| s.grid.axes[0].step()).fold(0.0, f64::max);
    let conv = convergence_check(&b0, &levels, 0.5 * dx1).map_err(RunError::at("boundary"))?;
    checks.push(Check::at_most("delta-ordering-violations", conv.violations.len() as f64, 0.0));
    checks.push(Check::new(
        "delta-gaps-strictly-decreasing",
        conv.gaps_strictly_decreasing as u8 as f64,
        Some(1.0),
        None,
    ));
    let (gamma_excess, skipped) = gamma_excess(spec, &b0, &p.slices);
    if skipped > 0 {
        notes.push(format!("gamma curve unavailable in {skipped} boundary cells"));
    }
    if let Some(e) = gamma_excess {
        checks.push(Check::at_most("b0-within-gamma-plus-dx1", e, dx1));
    }
    for w in b0.warnings.iter().chain(levels.iter().flat_map(|l| &l.warnings)) {
        notes.push(format!("boundary: {w}"));
    }
    let tail_names: Vec<String> = (2..=d).map(|k| format!("x{k}")).collect();
    let mut all: Vec<&BoundarySurface> = vec![&b0];
    all.extend(levels.iter());
    out.write("boundary.csv", boundary_csv(&all, &tail_names).as_bytes())?;

    // Slopes and Lipschitz.
    out.stage("slopes")?;
    let big_t = spec.effective_horizon();
    let t0 = p.slices[0].grid.t0;
    let span = big_t - t0;
    let window = match cfg.slopes.window {
        Some((a, b)) => Window::time_only(t0 + a * span, t0 + b * span),
        None => Window::time_only(t0, big_t - DEFAULT_COLLAR * span),
    };
    let level = levels.last().expect("deltas are non-empty");
    let bdt = if level.times.len() > 1 { level.times[1] - level.times[0] } else { span };
    let stride = ((cfg.slopes.lipschitz_span * span / bdt).round() as usize).max(1);
    let (lipschitz, lipschitz_error) = match lipschitz_estimate(level, &window, stride) {
        Ok(l) => (Some(l), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mc = McSettings::new(cfg.mc.n_paths, cfg.mc.dt.unwrap_or(p.mc_dt), seed);
    let slope_level = levels.first().expect("deltas are non-empty");
    let cells = slope_cells(cfg, p, &surfaces, slope_level, &b0, &window, &mc, &mut checks, &mut notes)?;
    let slopes = SlopesArtifact {
        lipschitz_delta: *deltas.last().unwrap(),
        cell_delta: deltas[0],
        deltas: deltas.clone(),
        convergence: conv,
        lipschitz: lipschitz.clone(),
        lipschitz_error: lipschitz_error.clone(),
        window,
        cells,
    };
    out.write("slopes.json", &to_json(&slopes))?;
    if let Some(e) = lipschitz_error {
        notes.push(format!("lipschitz: {e}"));
    }

    // Monte Carlo at the probes.
    out.stage("probes")?;
    let mut results = Vec::new();
    for (i, pr) in probes.iter().enumerate() {
        let surf = slice_for(p, &surfaces, &pr.x);
        let fd = surf.fd_derivatives(pr.t, &pr.x).map_err(RunError::at("probes"))?;
        let v = surf.value_at(pr.t, &pr.x).map_err(RunError::at("probes"))?;
        let rep = estimate_representations(spec, pr.t, &pr.x, &b0, &mc).map_err(RunError::at("probes"))?;
        let dt = surf.grid.dt();
        let steps: Vec<(usize, f64)> = surf.grid.axes.iter().map(|a| (a.coord, a.step())).collect();
        let hmax = steps.iter().map(|s| s.1).fold(0.0, f64::max);
        let tol = |se: f64, h: f64| 3.0 * se + 2.0 * (h * h + dt);
        let e = &rep.value;
        checks.push(Check::at_most(format!("probe{i}-value"), (v - e.mean).abs(), tol(e.std_error, hmax)));
        for &(k, h) in &steps {
            if let Some(g) = fd.grad[k] {
                let e = &rep.gradient[k];
                checks.push(Check::at_most(
                    format!("probe{i}-grad-x{}", k + 1),
                    (g - e.mean).abs(),
                    tol(e.std_error, h),
                ));
            }
        }
        if let Some(tb) = &rep.time_bounds {
            let lo = tb.lower.mean - 3.0 * tb.lower.std_error - 5.0 * dt;
            let hi = tb.upper.mean + 3.0 * tb.upper.std_error + 5.0 * dt;
            checks.push(Check::new(format!("probe{i}-dt-sandwich"), fd.dt, Some(lo), Some(hi)));
            if let Some(tu) = &tb.tightened_upper {
                checks.push(Check::at_most(
                    format!("probe{i}-dt-tightened"),
                    fd.dt,
                    tu.mean + 3.0 * tu.std_error + 5.0 * dt,
                ));
            }
        }
        results.push(ProbeResult {
            t: pr.t,
            x: pr.x.clone(),
            pde_value: v,
            pde_dt: fd.dt,
            pde_gradient: fd.grad,
            mc: rep,
        });
    }
    let (mut martingale, mut diagnostics) = (None, None);
    if let Some(pr) = probes.first() {
        if cfg.mc.martingale {
            let surf = slice_for(p, &surfaces, &pr.x);
            let s = (big_t - pr.t).min(5.0);
            let cps = [0.0, s / 3.0, 2.0 * s / 3.0, s];
            let prof =
                martingale_profile(spec, pr.t, &pr.x, &b0, surf, &mc, &cps).map_err(RunError::at("martingale"))?;
            checks.push(Check::at_most("martingale-max-deviation-se", prof.max_deviation_se, 3.0));
            martingale = Some(prof);
        }
        let diag = diagnostics_streaming(spec, pr.t, &pr.x, &b0, cfg.mc.diagnostic_paths, mc.dt, seed)
            .map_err(RunError::at("diagnostics"))?;
        checks.push(Check::at_most("gronwall-violations", diag.gronwall_violations.len() as f64, 0.0));
        checks.push(Check::new("markov-margin", diag.markov.margin, Some(0.0), None));
        diagnostics = Some(diag);
    }
    out.write(
        "probes.json",
        &to_json(&ProbesArtifact { n_paths: mc.n_paths, dt: mc.dt, seed, probes: results, martingale, diagnostics }),
    )?;

    out.stage("summary")?;
    let summary = Summary {
        problem: p.name.clone(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
        conditions,
        applicability: appl,
        lipschitz_l_t: lipschitz.map(|l| l.l_t),
        notes,
    };
    out.write("summary.json", &to_json(&summary))?;
    out.write("summary.txt", summary.render().as_bytes())?;
    Ok(Outcome { summary })
}

/// Largest `b0 − γ` (stop-below) or `γ − b0` (stop-above) over cells with finite
/// `γ`, and the number of cells where `γ` could not be located.
pub fn gamma_excess(spec: &ProblemSpec, b0: &BoundarySurface, slices: &[Slice]) -> (Option<f64>, usize) {
    let (lo, hi) = slices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), s| (l.min(s.grid.axes[0].lo), h.max(s.grid.axes[0].hi)));
    let below = spec.orientation() == Orientation::StopBelow;
    let shape = b0.tail_shape();
    let cells = b0.cells_per_slice();
    let mut tail = vec![0.0; shape.len()];
    let mut idx = vec![0usize; shape.len()];
    let mut worst: Option<f64> = None;
    let mut skipped = 0;
    for (ti, &t) in b0.times.iter().enumerate() {
        for c in 0..cells {
            let mut rem = c;
            for a in (0..shape.len()).rev() {
                idx[a] = rem % shape[a];
                tail[a] = b0.tail_axes[a][idx[a]];
                rem /= shape[a];
            }
            let g = match gamma_curve(spec, t, &tail, (lo, hi)) {
                Ok(g) if g.is_finite() => g,
                Ok(_) => continue,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let b = b0.node(ti, &idx);
            let e = if below { b - g } else { g - b };
            if !e.is_nan() {
                worst = Some(worst.map_or(e, |w: f64| w.max(e)));
            }
        }
    }
    (worst, skipped)
}

/// Cells in the window where the level and `b0` are finite, spreading the
/// requested count over time and starting from the middle of the tail.
fn finite_cells(level: &BoundarySurface, b0: &BoundarySurface, window: &Window, count: usize) -> Vec<Cell> {
    let t_idx: Vec<usize> = (0..level.times.len())
        .filter(|&k| {
            k > 0 && k + 1 < level.times.len() && (window.t_range.0..=window.t_range.1).contains(&level.times[k])
        })
        .collect();
    if t_idx.is_empty() || count == 0 {
        return Vec::new();
    }
    let shape = level.tail_shape();
    let mid: Vec<usize> = shape.iter().map(|n| n / 2).collect();
    let mut out = Vec::new();
    for c in 0..count {
        let k = t_idx[(t_idx.len() * (2 * c + 1)) / (2 * count)];
        // Walk outward from the centre along the first tail axis.
        for off in 0..shape.first().copied().unwrap_or(1) {
            let mut tail = mid.clone();
            if let Some(n) = shape.first() {
                let sign = if off % 2 == 0 { 1isize } else { -1 };
                let j = mid[0] as isize + sign * ((off as isize + 1) / 2);
                if j < 0 || j >= *n as isize {
                    continue;
                }
                tail[0] = j as usize;
            }
            let cell = Cell { time: k, tail };
            let finite = |b: &BoundarySurface| {
                let (t0, t1) = (cell.time.saturating_sub(1), cell.time + 1);
                [t0, cell.time, t1].iter().all(|&ti| b.node(ti, &cell.tail).is_finite())
            };
            if finite(level) && b0.node(cell.time, &cell.tail).is_finite() && !out.contains(&cell) {
                out.push(cell);
                break;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn slope_cells(
    cfg: &RunConfig,
    p: &Problem,
    surfaces: &[ValueSurface],
    level: &BoundarySurface,
    b0: &BoundarySurface,
    window: &Window,
    mc: &McSettings,
    checks: &mut Vec<Check>,
    notes: &mut Vec<String>,
) -> Result<Vec<CellSlope>, RunError> {
    let spec = &p.spec;
    let d = spec.dim();
    let n_cells = if d == 1 { level.times.len() } else { cfg.slopes.mc_cells };
    let cells = if d == 1 {
        (1..level.times.len().saturating_sub(1))
            .filter(|&k| (window.t_range.0..=window.t_range.1).contains(&level.times[k]))
            .map(|k| Cell { time: k, tail: Vec::new() })
            .filter(|c| (c.time - 1..=c.time + 1).all(|k| level.node(k, &[]).is_finite()))
            .collect()
    } else {
        finite_cells(level, b0, window, n_cells)
    };
    let dt_grid = surfaces[0].grid.dt();
    let mut out = Vec::new();
    let (mut compared, mut agreeing) = (0usize, 0usize);
    for cell in cells {
        let fd = boundary_slopes_fd(level, &cell).map_err(RunError::at("slopes"))?;
        let surface = (d == 1).then(|| &surfaces[0]);
        let (implicit, implicit_error) = match boundary_slopes_implicit(spec, surface, level, b0, &cell, mc) {
            Ok(s) => (Some(s), None),
            Err(e @ stopbound_core::Error::DegenerateDenominator { .. }) => (None, Some(e.to_string())),
            Err(e) => return Err(RunError::at("slopes")(e)),
        };
        if let (Some(im), Some((f, _))) = (&implicit, fd.dt_interval) {
            if let Some((lo, hi)) = im.dt_interval {
                let (se_lo, se_hi) = im.dt_std_errors;
                compared += 1;
                if lo - 3.0 * se_lo - 5.0 * dt_grid <= f && f <= hi + 3.0 * se_hi + 5.0 * dt_grid {
                    agreeing += 1;
                }
            }
        }
        let measure_pair = match &p.measure {
            Some((m, kappa)) if d > 1 => {
                let mut x = vec![fd.b];
                x.extend_from_slice(&fd.tail);
                let pair = estimate_occupation_paired(spec, fd.time, &x, b0, mc, *kappa, &m.eta)
                    .map_err(RunError::at("slopes"))?;
                let jse = pair.diff_std_error(0, 1);
                checks.push(Check::at_most(
                    format!("measure-agreement[t={},tail={:?}]", fd.time, fd.tail),
                    (pair.mean(0) - pair.mean(1)).abs(),
                    3.0 * jse,
                ));
                Some((pair.mean(0), pair.mean(1), jse))
            }
            _ => None,
        };
        out.push(CellSlope { cell, finite_difference: fd, implicit, implicit_error, measure_pair });
    }
    if compared > 0 {
        let c = Check::new("slope-dt-agreement-fraction", agreeing as f64 / compared as f64, Some(0.9), None);
        if d == 1 {
            checks.push(c);
        } else {
            // Both sides carry the PDE error of the second axis here; reported only.
            notes.push(format!(
                "implicit and finite-difference time slopes agree at {agreeing} of {compared} Monte Carlo cells (informational)"
            ));
        }
    }
    Ok(out)
}

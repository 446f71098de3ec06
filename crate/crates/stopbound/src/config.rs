//! Run configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stopbound_core::conditions::ConditionTag;
use stopbound_core::examples::{ExampleId, Resolution};

use crate::error::RunError;

/// Version of the configuration schema understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "STOPBOUND_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemRef {
    /// A built-in example with parameter overrides.
    Example(ExampleId),
    /// A problem registered through [`crate::pipeline::Registry`].
    Custom(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemRef,
    #[serde(default)]
    pub grid: GridConfig,
    /// Values of the parameter coordinate to solve for (swept problems only).
    #[serde(default)]
    pub z_values: Option<Vec<f64>>,
    #[serde(default)]
    pub mc: McConfig,
    /// Level heights as fractions of the surface's `w` range, strictly decreasing.
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Condition tags to check; `None` checks every tag except `Thm4.3`.
    #[serde(default)]
    pub conditions: Option<Vec<ConditionTag>>,
    #[serde(default = "default_condition_samples")]
    pub condition_samples: usize,
    /// Monte Carlo probe points; `None` uses the problem's defaults.
    #[serde(default)]
    pub probes: Option<Vec<Probe>>,
    #[serde(default)]
    pub slopes: SlopeConfig,
    #[serde(default)]
    pub export: ExportConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub resolution: Option<Resolution>,
    pub n_t: Option<usize>,
    pub n_x1: Option<usize>,
    pub x1: Option<(f64, f64)>,
    pub n_x2: Option<usize>,
    pub x2: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    /// Euler step; `None` uses the problem's default.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Paths for the Gronwall/Markov diagnostics.
    #[serde(default = "default_diagnostic_paths")]
    pub diagnostic_paths: usize,
    /// Run the martingale check at the first probe.
    #[serde(default = "yes")]
    pub martingale: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: default_n_paths(),
            dt: None,
            seed: 0,
            diagnostic_paths: default_diagnostic_paths(),
            martingale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeConfig {
    /// Lipschitz window as fractions of the horizon; the default ends at the collar.
    #[serde(default)]
    pub window: Option<(f64, f64)>,
    /// Time span of the Lipschitz difference quotients as a fraction of the horizon.
    #[serde(default = "default_span")]
    pub lipschitz_span: f64,
    /// Cells that get Monte Carlo implicit-ratio slopes (multi-dimensional problems).
    #[serde(default = "default_mc_cells")]
    pub mc_cells: usize,
}

impl Default for SlopeConfig {
    fn default() -> Self {
        Self { window: None, lipschitz_span: default_span(), mc_cells: default_mc_cells() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    /// Maximum nodes written per axis `(t, x1, second axis)`; ends are always kept.
    #[serde(default = "default_max_nodes")]
    pub surface_max_nodes: (usize, usize, usize),
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { surface_max_nodes: default_max_nodes() }
    }
}

fn default_deltas() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}
fn default_condition_samples() -> usize {
    512
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("stopbound-out")
}
fn default_n_paths() -> usize {
    20_000
}
fn default_diagnostic_paths() -> usize {
    10_000
}
fn yes() -> bool {
    true
}
fn default_span() -> f64 {
    0.025
}
fn default_mc_cells() -> usize {
    3
}
fn default_max_nodes() -> (usize, usize, usize) {
    (41, 121, 21)
}

impl RunConfig {
    /// Defaults for a built-in example.
    pub fn for_example(id: ExampleId) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            problem: ProblemRef::Example(id),
            grid: GridConfig::default(),
            z_values: None,
            mc: McConfig::default(),
            deltas: default_deltas(),
            conditions: None,
            condition_samples: default_condition_samples(),
            probes: None,
            slopes: SlopeConfig::default(),
            export: ExportConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RunError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| RunError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the seed precedence: explicit flag, then the environment, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<(), RunError> {
        if let Some(s) = flag {
            self.mc.seed = s;
        } else if let Some(v) = env {
            self.mc.seed = v
                .trim()
                .parse()
                .map_err(|_| RunError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.mc.n_paths == 0 {
            return bad("mc.n_paths must be positive".into());
        }
        if self.mc.diagnostic_paths == 0 {
            return bad("mc.diagnostic_paths must be positive".into());
        }
        if let Some(dt) = self.mc.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad("mc.dt must be a positive number".into());
            }
        }
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return bad("deltas must be a non-empty list of positive numbers".into());
        }
        if self.deltas.windows(2).any(|w| w[1] >= w[0]) {
            return bad("deltas must be strictly decreasing".into());
        }
        if self.condition_samples == 0 {
            return bad("condition_samples must be positive".into());
        }
        if let Some((a, b)) = self.slopes.window {
            if !(0.0 <= a && a < b && b <= 1.0) {
                return bad("slopes.window must satisfy 0 <= lo < hi <= 1".into());
            }
        }
        if !(self.slopes.lipschitz_span > 0.0 && self.slopes.lipschitz_span < 1.0) {
            return bad("slopes.lipschitz_span must lie in (0, 1)".into());
        }
        let g = &self.grid;
        for (n, what) in [(g.n_t, "grid.n_t"), (g.n_x1, "grid.n_x1"), (g.n_x2, "grid.n_x2")] {
            if n.is_some_and(|n| n < 3) {
                return bad(format!("{what} must be at least 3"));
            }
        }
        for (r, what) in [(g.x1, "grid.x1"), (g.x2, "grid.x2")] {
            if r.is_some_and(|(a, b)| !(a < b && a.is_finite() && b.is_finite())) {
                return bad(format!("{what} must be an increasing finite range"));
            }
        }
        let (a, b, c) = self.export.surface_max_nodes;
        if a < 2 || b < 2 || c < 2 {
            return bad("export.surface_max_nodes entries must be at least 2".into());
        }
        if let Some(zs) = &self.z_values {
            if zs.is_empty() || zs.iter().any(|z| !z.is_finite()) {
                return bad("z_values must be a non-empty list of finite numbers".into());
            }
        }
        if let Some(ps) = &self.probes {
            if ps.iter().any(|p| !p.t.is_finite() || p.x.iter().any(|v| !v.is_finite())) {
                return bad("probe coordinates must be finite".into());
            }
        }
        Ok(())
    }
}

/// Reads probe points from CSV rows `t,x1,...,xd`. Blank lines, `#` comments and a
/// header row starting with `t` are skipped.
pub fn read_probes(text: &str) -> Result<Vec<Probe>, RunError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| RunError::Config(format!("probes: {e}")))?;
        if rec.iter().all(str::is_empty) || (i == 0 && rec.get(0) == Some("t")) {
            continue;
        }
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| RunError::Config(format!("probes line {}: {e}", i + 1)))?;
        if vals.len() < 2 {
            return Err(RunError::Config(format!("probes line {}: need t and at least one coordinate", i + 1)));
        }
        out.push(Probe { t: vals[0], x: vals[1..].to_vec() });
    }
    if out.is_empty() {
        return Err(RunError::Config("probes file has no points".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use stopbound_core::examples::ExampleName;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg =
            RunConfig::from_json(r#"{"schema_version": 1, "problem": {"example": {"name": "example1"}}}"#).unwrap();
        assert_eq!(cfg, RunConfig::for_example(ExampleId::new(ExampleName::Example1)));
    }

    #[test]
    fn zero_paths_and_bad_versions_are_rejected() {
        let mut cfg = RunConfig::for_example(ExampleId::new(ExampleName::Example1));
        cfg.mc.n_paths = 0;
        assert!(matches!(cfg.validate(), Err(RunError::Config(_))));
        let err = RunConfig::from_json(r#"{"schema_version": 7, "problem": {"custom": "x"}}"#).unwrap_err();
        assert!(err.to_string().contains("schema_version"));
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "problem": {"custom": "x"}, "bogus": 1}"#).is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = RunConfig::for_example(ExampleId::new(ExampleName::Example1));
        cfg.mc.seed = 1;
        cfg.resolve_seed(None, None).unwrap();
        assert_eq!(cfg.mc.seed, 1);
        cfg.resolve_seed(None, Some("5")).unwrap();
        assert_eq!(cfg.mc.seed, 5);
        cfg.resolve_seed(Some(9), Some("5")).unwrap();
        assert_eq!(cfg.mc.seed, 9);
        assert!(cfg.resolve_seed(None, Some("x")).is_err());
    }

    #[test]
    fn probe_csv() {
        let p = read_probes("t,x1\n# comment\n0.1, 4.7\n\n0.2,4.8\n").unwrap();
        assert_eq!(p, vec![Probe { t: 0.1, x: vec![4.7] }, Probe { t: 0.2, x: vec![4.8] }]);
        assert!(read_probes("0.1\n").is_err());
        assert!(read_probes("# nothing\n").is_err());
    }
}

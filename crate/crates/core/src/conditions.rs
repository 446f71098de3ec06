//! Sampled checks of the structural and growth conditions a problem must satisfy
//! for the boundary regularity results to apply.
//!
//! A check never proves a condition: the best verdict is "holds on sample".
//! Conditions asserting the existence of a constant report the smallest constant
//! that works on the sample. They are also re-evaluated on dilations of the region;
//! if the required constant keeps growing (or a required lower bound keeps
//! shrinking) the condition is reported violated, since no constant can work on
//! the whole space.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{halton, MAX_DIM};
use crate::problem::{gamma_curve, Horizon, Orientation, Piece, ProblemSpec, GENERATOR_PIECES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionTag {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    #[serde(rename = "Cor3.2-i")]
    Cor32I,
    #[serde(rename = "Cor3.2-ii")]
    Cor32Ii,
    AssumptionRegularity,
    /// Extra hypotheses of the one-dimensional Lipschitz theorem.
    #[serde(rename = "Thm4.3")]
    Thm43,
}

impl ConditionTag {
    pub const ALL: [ConditionTag; 11] = [
        ConditionTag::A,
        ConditionTag::B,
        ConditionTag::C,
        ConditionTag::D,
        ConditionTag::E,
        ConditionTag::F,
        ConditionTag::G,
        ConditionTag::Cor32I,
        ConditionTag::Cor32Ii,
        ConditionTag::AssumptionRegularity,
        ConditionTag::Thm43,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionTag::A => "A",
            ConditionTag::B => "B",
            ConditionTag::C => "C",
            ConditionTag::D => "D",
            ConditionTag::E => "E",
            ConditionTag::F => "F",
            ConditionTag::G => "G",
            ConditionTag::Cor32I => "Cor3.2-i",
            ConditionTag::Cor32Ii => "Cor3.2-ii",
            ConditionTag::AssumptionRegularity => "AssumptionRegularity",
            ConditionTag::Thm43 => "Thm4.3",
        }
    }
}

impl fmt::Display for ConditionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionTag::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown condition tag `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    HoldsOnSample,
    Violated,
    NotCheckable,
}

/// Bounded box `[t_lo, t_hi] × Π [x_lo, x_hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub t: (f64, f64),
    pub x: Vec<(f64, f64)>,
}

impl Region {
    fn validate(&self, d: usize, horizon: f64) -> Result<()> {
        if self.x.len() != d {
            return Err(Error::Parameter(format!("region has {} axes, problem has {d}", self.x.len())));
        }
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ok(self.t) || self.t.0 < 0.0 || self.t.1 > horizon || !self.x.iter().all(|r| ok(*r)) {
            return Err(Error::Parameter("region must be a bounded box inside [0, T] × R^d".into()));
        }
        Ok(())
    }

    /// Spatial dilation about the centre by `s`.
    fn dilated(&self, s: f64) -> Region {
        let x = self
            .x
            .iter()
            .map(|&(a, b)| {
                let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
                (c - s * r, c + s * r)
            })
            .collect();
        Region { t: self.t, x }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub clause: String,
    pub t: f64,
    pub x: Vec<f64>,
    /// Amount by which the inequality fails (positive).
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConstant {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseResult {
    pub name: String,
    pub verdict: Verdict,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub tag: ConditionTag,
    pub region: Region,
    pub n_samples: usize,
    pub seed: u64,
    pub verdict: Verdict,
    pub clauses: Vec<ClauseResult>,
    pub witnesses: Vec<Witness>,
    pub constants: Vec<NamedConstant>,
    /// Derivative pieces evaluated by finite differences.
    pub fd_pieces: Vec<String>,
    pub notes: Vec<String>,
}

impl ConditionReport {
    pub fn holds(&self) -> bool {
        self.verdict == Verdict::HoldsOnSample
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckSettings {
    pub n_samples: usize,
    /// Offset into the low-discrepancy sequence.
    pub seed: u64,
    /// Dilation factors for growth probes.
    pub growth_factors: Vec<f64>,
    /// Ratio between consecutive dilations treated as unbounded growth.
    pub growth_ratio: f64,
    /// Absolute slack on sign conditions, scaled by `1 + |value|`.
    pub tol: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { n_samples: 512, seed: 0, growth_factors: vec![4.0, 16.0, 64.0], growth_ratio: 1.5, tol: 1e-10 }
    }
}

impl CheckSettings {
    pub fn with_samples(n_samples: usize, seed: u64) -> Self {
        Self { n_samples, seed, ..Self::default() }
    }
}

/// Extra inputs of the one-dimensional Lipschitz hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzHypotheses {
    /// Candidate interval `I = (t1, t2)`.
    pub interval: (f64, f64),
    /// Level `r` above the γ-curve on `I`.
    pub level: f64,
    /// `b(t0)` for some `t0 ∈ I`, if known.
    pub boundary_at_t0: Option<f64>,
}

struct Point {
    t: f64,
    x: [f64; MAX_DIM],
}

fn sample(region: &Region, n: usize, seed: u64) -> Vec<Point> {
    let d = region.x.len();
    let dims = d + 1;
    let lerp = |(a, b): (f64, f64), u: f64| a + u * (b - a);
    let mut pts = Vec::with_capacity(n + (1 << dims));
    for c in 0..(1usize << dims) {
        let mut x = [0.0; MAX_DIM];
        let t = if c & 1 == 1 { region.t.1 } else { region.t.0 };
        for k in 0..d {
            x[k] = if (c >> (k + 1)) & 1 == 1 { region.x[k].1 } else { region.x[k].0 };
        }
        pts.push(Point { t, x });
    }
    let mut u = [0.0; MAX_DIM + 1];
    for i in 0..n as u64 {
        halton(seed + i + 1, dims, &mut u);
        let mut x = [0.0; MAX_DIM];
        for k in 0..d {
            x[k] = lerp(region.x[k], u[k + 1]);
        }
        pts.push(Point { t: lerp(region.t, u[0]), x });
    }
    pts
}

/// Outcome of one clause before it is merged into a report.
struct Outcome {
    clause: ClauseResult,
    witnesses: Vec<Witness>,
    constants: Vec<NamedConstant>,
}

impl Outcome {
    fn new(name: &str, verdict: Verdict, note: Option<String>) -> Self {
        Self {
            clause: ClauseResult { name: name.to_string(), verdict, note },
            witnesses: Vec::new(),
            constants: Vec::new(),
        }
    }

    fn not_checkable(name: &str, note: &str) -> Self {
        Self::new(name, Verdict::NotCheckable, Some(note.to_string()))
    }
}

struct Checker<'a> {
    spec: &'a ProblemSpec,
    region: &'a Region,
    settings: &'a CheckSettings,
    d: usize,
    /// `+1` for stop-below problems, `-1` for stop-above, applied to `∂_1`.
    s1: f64,
}

/// Sample point `(t, x)` where no finite constant works, with its `lhs`.
type BadPoint = (f64, [f64; MAX_DIM], f64);

impl<'a> Checker<'a> {
    fn points(&self, region: &Region) -> Vec<Point> {
        sample(region, self.settings.n_samples, self.settings.seed)
    }

    fn slack(&self, v: f64) -> f64 {
        self.settings.tol * (1.0 + v.abs())
    }

    fn witness(&self, clause: &str, t: f64, x: &[f64], margin: f64) -> Witness {
        Witness { clause: clause.to_string(), t, x: x[..self.d].to_vec(), margin }
    }

    /// `value(t, x) >= 0` everywhere on the base sample.
    fn sign(&self, name: &str, value: impl Fn(f64, &[f64]) -> f64) -> Outcome {
        let mut out = Outcome::new(name, Verdict::HoldsOnSample, None);
        for p in self.points(self.region) {
            let v = value(p.t, &p.x[..self.d]);
            if !(v >= -self.slack(v)) {
                out.witnesses.push(self.witness(name, p.t, &p.x, if v.is_nan() { f64::INFINITY } else { -v }));
            }
        }
        if !out.witnesses.is_empty() {
            out.clause.verdict = Verdict::Violated;
        }
        out
    }

    /// Smallest `c >= 0` with `lhs <= c * scale` on a region's sample, where the
    /// closure returns `(lhs, scale)`. `Err` carries the points where no finite
    /// constant works.
    fn required_constant(
        &self,
        region: &Region,
        pair: &impl Fn(f64, &[f64]) -> (f64, f64),
    ) -> core::result::Result<(f64, f64, [f64; MAX_DIM]), Vec<BadPoint>> {
        let mut c: f64 = 0.0;
        let mut arg = (self.region.t.0, [0.0; MAX_DIM]);
        let mut bad = Vec::new();
        for p in self.points(region) {
            let (lhs, scale) = pair(p.t, &p.x[..self.d]);
            if !(lhs.is_finite() && scale.is_finite()) {
                bad.push((p.t, p.x, f64::INFINITY));
            } else if lhs <= self.slack(lhs) {
                continue;
            } else if scale <= 0.0 {
                bad.push((p.t, p.x, lhs));
            } else if lhs / scale > c {
                c = lhs / scale;
                arg = (p.t, p.x);
            }
        }
        if bad.is_empty() {
            Ok((c, arg.0, arg.1))
        } else {
            Err(bad)
        }
    }

    fn growing(&self, seq: &[f64]) -> bool {
        let q = self.settings.growth_ratio;
        seq.len() >= 3 && seq.windows(2).skip(seq.len() - 3).all(|w| w[1] > q * w[0] && w[1] > 0.0)
    }

    /// Constant-existence clause `lhs <= c * scale`, with growth probes.
    fn upper(&self, name: &str, constant: &str, pair: impl Fn(f64, &[f64]) -> (f64, f64)) -> Outcome {
        let mut out = Outcome::new(name, Verdict::HoldsOnSample, None);
        let (c0, _, _) = match self.required_constant(self.region, &pair) {
            Ok(v) => v,
            Err(bad) => {
                out.clause.verdict = Verdict::Violated;
                out.clause.note = Some("dominating side vanishes where the dominated side does not".into());
                out.witnesses = bad.iter().map(|(t, x, m)| self.witness(name, *t, x, *m)).collect();
                return out;
            }
        };
        let mut seq = vec![c0];
        let mut last = None;
        for &s in &self.settings.growth_factors {
            match self.required_constant(&self.region.dilated(s), &pair) {
                Ok((c, t, x)) => {
                    seq.push(c);
                    last = Some((t, x));
                }
                Err(bad) => {
                    out.clause.verdict = Verdict::Violated;
                    out.clause.note = Some(format!("no finite constant on the region dilated by {s}"));
                    out.witnesses = bad.iter().map(|(t, x, m)| self.witness(name, *t, x, *m)).collect();
                    return out;
                }
            }
        }
        if self.growing(&seq) {
            let (t, x) = last.unwrap_or((self.region.t.0, [0.0; MAX_DIM]));
            out.clause.verdict = Verdict::Violated;
            out.clause.note = Some(format!("required constant grows without bound under dilation: {seq:?}"));
            out.witnesses.push(self.witness(name, t, &x, seq[seq.len() - 1] - c0));
        } else {
            out.constants.push(NamedConstant { name: constant.to_string(), value: c0 });
        }
        out
    }

    /// Positive lower bound `value >= c > 0`, with decay probes.
    fn lower(&self, name: &str, constant: &str, value: impl Fn(f64, &[f64]) -> f64) -> Outcome {
        let mut out = Outcome::new(name, Verdict::HoldsOnSample, None);
        let inf_on = |region: &Region| {
            let mut best = (f64::INFINITY, 0.0, [0.0; MAX_DIM]);
            for p in self.points(region) {
                let v = value(p.t, &p.x[..self.d]);
                let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
                if v < best.0 {
                    best = (v, p.t, p.x);
                }
            }
            best
        };
        let (c0, t0, x0) = inf_on(self.region);
        if !(c0 > 0.0) {
            out.clause.verdict = Verdict::Violated;
            out.witnesses.push(self.witness(name, t0, &x0, -c0));
            return out;
        }
        // Track 1/c so that decay shows up as growth.
        let mut seq = vec![1.0 / c0];
        let mut last = (t0, x0);
        for &s in &self.settings.growth_factors {
            let (c, t, x) = inf_on(&self.region.dilated(s));
            if !(c > 0.0) {
                out.clause.verdict = Verdict::Violated;
                out.clause.note = Some(format!("lower bound fails on the region dilated by {s}"));
                out.witnesses.push(self.witness(name, t, &x, -c));
                return out;
            }
            seq.push(1.0 / c);
            last = (t, x);
        }
        if self.growing(&seq) {
            out.clause.verdict = Verdict::Violated;
            out.clause.note = Some(format!(
                "lower bound decays to zero under dilation: {:?}",
                seq.iter().map(|v| 1.0 / v).collect::<Vec<_>>()
            ));
            out.witnesses.push(self.witness(name, last.0, &last.1, c0 - 1.0 / seq[seq.len() - 1]));
        } else {
            out.constants.push(NamedConstant { name: constant.to_string(), value: c0 });
        }
        out
    }

    fn big_t(&self) -> f64 {
        self.spec.effective_horizon()
    }

    /// `s1 · ∂_1(h+m)`, `|∂_t(h+m)|`-style pieces at a point.
    fn hm_parts(&self, t: f64, x: &[f64]) -> (f64, [f64; MAX_DIM], f64) {
        let mut g = [0.0; MAX_DIM];
        let dt = self.spec.hm_partials(t, x, &mut g[..self.d]);
        (self.s1 * g[0], g, dt)
    }

    /// `∇(g - f(T))` and `s1 · ∂_1(g - f(T))`.
    fn terminal_gap_grad(&self, x: &[f64]) -> ([f64; MAX_DIM], f64) {
        let d = self.d;
        let (mut gg, mut gf) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
        self.spec.grad_g(x, &mut gg[..d]);
        self.spec.grad_f(self.big_t(), x, &mut gf[..d]);
        for k in 0..d {
            gg[k] -= gf[k];
        }
        (gg, self.s1 * gg[0])
    }

    fn terminal_level(&self, x: &[f64]) -> f64 {
        let big_t = self.big_t();
        self.spec.h(big_t, x) + self.spec.n(x)
    }
}

fn combine(tag: ConditionTag, region: &Region, settings: &CheckSettings, outcomes: Vec<Outcome>) -> ConditionReport {
    let mut clauses = Vec::new();
    let mut witnesses = Vec::new();
    let mut constants = Vec::new();
    for o in outcomes {
        clauses.push(o.clause);
        witnesses.extend(o.witnesses);
        constants.extend(o.constants);
    }
    let verdict = if clauses.iter().any(|c| c.verdict == Verdict::Violated) {
        Verdict::Violated
    } else if clauses.iter().any(|c| c.verdict == Verdict::HoldsOnSample) {
        Verdict::HoldsOnSample
    } else {
        Verdict::NotCheckable
    };
    if verdict != Verdict::HoldsOnSample {
        constants.clear();
    }
    ConditionReport {
        tag,
        region: region.clone(),
        n_samples: settings.n_samples,
        seed: settings.seed,
        verdict,
        clauses,
        witnesses,
        constants,
        fd_pieces: Vec::new(),
        notes: Vec::new(),
    }
}

/// Merges alternative outcomes ("one of the following holds") into one.
fn either(name: &str, alts: Vec<Outcome>) -> Outcome {
    let notes: Vec<String> = alts
        .iter()
        .map(|o| {
            format!(
                "{}: {:?}{}",
                o.clause.name,
                o.clause.verdict,
                o.clause.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default()
            )
        })
        .collect();
    let note = Some(notes.join("; "));
    if let Some(pos) = alts.iter().position(|o| o.clause.verdict == Verdict::HoldsOnSample) {
        let mut o = alts.into_iter().nth(pos).unwrap_or_else(|| Outcome::new(name, Verdict::HoldsOnSample, None));
        o.clause.name = name.to_string();
        o.clause.note = note;
        o
    } else {
        let mut out = Outcome::new(name, Verdict::Violated, note);
        for a in alts {
            out.witnesses.extend(a.witnesses);
        }
        out
    }
}

fn pieces_for(tag: ConditionTag, finite: bool) -> Vec<Piece> {
    let terminal =
        [Piece::TerminalGradient, Piece::TerminalHessian, Piece::ObstacleTimeDerivative, Piece::ObstacleGradient];
    let mut p = Vec::new();
    match tag {
        ConditionTag::A => p.extend([Piece::TerminalGradient, Piece::ObstacleGradient]),
        ConditionTag::B | ConditionTag::Cor32I => {}
        ConditionTag::C | ConditionTag::D | ConditionTag::E => p.push(Piece::GeneratorPartials),
        ConditionTag::F | ConditionTag::G => {
            p.push(Piece::GeneratorPartials);
            if finite {
                p.extend(terminal);
            }
        }
        ConditionTag::Cor32Ii => p.extend(terminal),
        ConditionTag::AssumptionRegularity => {
            p.extend([Piece::RunningTimeDerivative, Piece::RunningGradient]);
            p.extend(terminal);
        }
        ConditionTag::Thm43 => {
            p.push(Piece::GeneratorPartials);
            p.extend(GENERATOR_PIECES[..3].iter().copied());
        }
    }
    p
}

/// Evaluates condition `tag` on `region`.
pub fn check_condition(
    spec: &ProblemSpec,
    tag: ConditionTag,
    region: &Region,
    settings: &CheckSettings,
) -> Result<ConditionReport> {
    let hyp =
        LipschitzHypotheses { interval: region.t, level: region.x.first().map_or(0.0, |r| r.1), boundary_at_t0: None };
    check_with(spec, tag, region, settings, &hyp)
}

/// One-dimensional Lipschitz hypotheses against a supplied interval and level.
pub fn check_lipschitz_hypotheses(
    spec: &ProblemSpec,
    region: &Region,
    hypotheses: &LipschitzHypotheses,
    settings: &CheckSettings,
) -> Result<ConditionReport> {
    check_with(spec, ConditionTag::Thm43, region, settings, hypotheses)
}

fn check_with(
    spec: &ProblemSpec,
    tag: ConditionTag,
    region: &Region,
    settings: &CheckSettings,
    hyp: &LipschitzHypotheses,
) -> Result<ConditionReport> {
    let d = spec.dim();
    region.validate(d, spec.effective_horizon())?;
    let finite = matches!(spec.horizon(), Horizon::Finite(_));
    let pieces = pieces_for(tag, finite);
    spec.require(&pieces)?;
    let s1 = if spec.orientation() == Orientation::StopBelow { 1.0 } else { -1.0 };
    let ck = Checker { spec, region, settings, d, s1 };
    let big_t = spec.effective_horizon();
    let mut notes = Vec::new();
    let outcomes = match tag {
        ConditionTag::A => {
            if !finite {
                notes.push("vacuous for an infinite horizon".to_string());
                vec![Outcome::new("g >= f(T)", Verdict::HoldsOnSample, Some("infinite horizon".into()))]
            } else {
                vec![
                    ck.sign("g >= f(T)", |_, x| spec.g(x) - spec.f(big_t, x)),
                    ck.sign("d1 g >= d1 f(T)", |_, x| ck.terminal_gap_grad(x).1),
                ]
            }
        }
        ConditionTag::B => vec![check_drift_structure(&ck)],
        ConditionTag::C => vec![
            ck.sign("d1(h+m) >= 0", |t, x| ck.hm_parts(t, x).0),
            Outcome::not_checkable("E int |d1 m|^2 < inf", "moment bound depends on the law of X"),
        ],
        ConditionTag::D => vec![
            ck.upper("dt(h+m) <= c (1 + d1(h+m))", "c", |t, x| {
                let (d1, _, dt) = ck.hm_parts(t, x);
                (dt, 1.0 + d1)
            }),
            Outcome::not_checkable("E int |dt m|^2 < inf", "moment bound depends on the law of X"),
        ],
        ConditionTag::E => {
            let mut o = Outcome::new("m differentiable in t and x", Verdict::HoldsOnSample, None);
            for p in ck.points(region) {
                let mut g = [0.0; MAX_DIM];
                let dt = spec.hm_partials(p.t, &p.x[..d], &mut g[..d]);
                if !(dt.is_finite() && g[..d].iter().all(|v| v.is_finite())) {
                    o.witnesses.push(ck.witness(&o.clause.name, p.t, &p.x, f64::INFINITY));
                }
            }
            if !o.witnesses.is_empty() {
                o.clause.verdict = Verdict::Violated;
            }
            vec![o, Outcome::not_checkable("E int |dk m|^2 + |dt m|^2 < inf", "moment bound depends on the law of X")]
        }
        ConditionTag::F => {
            let mut v = vec![ck.upper("sum|dj(h+m)| + |dt(h+m)| <= c d1(h+m)", "c", |t, x| {
                let (d1, g, dt) = ck.hm_parts(t, x);
                (g[..d].iter().map(|v| v.abs()).sum::<f64>() + dt.abs(), d1)
            })];
            if finite {
                v.push(ck.upper("terminal bound <= c d1(g - f(T))", "c_T", |_, x| {
                    let (gg, d1) = ck.terminal_gap_grad(x);
                    let lhs = ck.terminal_level(x).abs()
                        + 2.0 * spec.dt_f(big_t, x).abs()
                        + gg[..d].iter().map(|v| v.abs()).sum::<f64>();
                    (lhs, d1)
                }));
            }
            v
        }
        ConditionTag::G => {
            let mut v = vec![
                ck.lower("d1(h+m) >= c1", "c1", |t, x| ck.hm_parts(t, x).0),
                ck.upper("sum|dj(h+m)| + |dt(h+m)| <= c2 (1 + d1(h+m))", "c2", |t, x| {
                    let (d1, g, dt) = ck.hm_parts(t, x);
                    (g[..d].iter().map(|v| v.abs()).sum::<f64>() + dt.abs(), 1.0 + d1)
                }),
            ];
            if finite {
                let gap_sum = |x: &[f64]| {
                    let (gg, d1) = ck.terminal_gap_grad(x);
                    (gg[..d].iter().map(|v| v.abs()).sum::<f64>(), d1)
                };
                let a = ck.upper("(a) terminal bound", "c2_a", |_, x| {
                    let (s, d1) = gap_sum(x);
                    (ck.terminal_level(x).abs() + 2.0 * spec.dt_f(big_t, x).abs() + s, 1.0 + d1)
                });
                let b4 = ck.upper("(b) sum|dj(g - f(T))| <= c2 (1 + d1(g - f(T)))", "c2_b", |_, x| {
                    let (s, d1) = gap_sum(x);
                    (s, 1.0 + d1)
                });
                let poly = (1..=4)
                    .map(|p| {
                        let name = format!("(b) polynomial growth p={p}");
                        ck.upper(&name, &format!("c2_poly_p{p}"), |t, x| {
                            let norm = crate::math::sqrt(x.iter().map(|v| v * v).sum::<f64>());
                            (ck.terminal_level(x).abs() + spec.dt_f(t, x).abs(), 1.0 + crate::math::powi(norm, p))
                        })
                    })
                    .collect();
                let poly = either("(b) polynomial growth", poly);
                let b = if b4.clause.verdict == Verdict::HoldsOnSample && poly.clause.verdict == Verdict::HoldsOnSample
                {
                    let mut o = b4;
                    o.clause.name = "(b)".into();
                    o.constants.extend(poly.constants);
                    o
                } else {
                    let mut o = Outcome::new("(b)", Verdict::Violated, poly.clause.note.clone());
                    o.witnesses.extend(b4.witnesses);
                    o.witnesses.extend(poly.witnesses);
                    o
                };
                v.push(either("terminal alternative (a) or (b)", vec![a, b]));
            }
            v
        }
        ConditionTag::Cor32I => {
            if !finite {
                vec![Outcome::not_checkable("g = f(T)", "requires a finite horizon")]
            } else {
                let mut o = Outcome::new("g = f(T)", Verdict::HoldsOnSample, None);
                for p in ck.points(region) {
                    let x = &p.x[..d];
                    let (g, f) = (spec.g(x), spec.f(big_t, x));
                    if !((g - f).abs() <= ck.slack(f)) {
                        o.witnesses.push(ck.witness("g = f(T)", big_t, x, (g - f).abs()));
                    }
                }
                if !o.witnesses.is_empty() {
                    o.clause.verdict = Verdict::Violated;
                }
                vec![o]
            }
        }
        ConditionTag::Cor32Ii => {
            if !finite {
                vec![Outcome::not_checkable("h(T) + n >= -dt f(T) - c", "requires a finite horizon")]
            } else {
                vec![ck.upper("h(T) + n >= -dt f(T) - c", "c", |_, x| {
                    (-(ck.terminal_level(x) + spec.dt_f(big_t, x)), 1.0)
                })]
            }
        }
        ConditionTag::AssumptionRegularity => {
            let mut o = Outcome::new("payoffs and derivatives finite", Verdict::HoldsOnSample, None);
            for p in ck.points(region) {
                let x = &p.x[..d];
                let mut buf = [0.0; 3 * MAX_DIM];
                spec.grad_h(p.t, x, &mut buf[..d]);
                spec.grad_f(p.t, x, &mut buf[d..2 * d]);
                spec.grad_g(x, &mut buf[2 * d..3 * d]);
                let vals = [spec.h(p.t, x), spec.f(p.t, x), spec.g(x), spec.dt_h(p.t, x), spec.dt_f(p.t, x), spec.n(x)];
                if !(vals.iter().chain(&buf[..3 * d]).all(|v| v.is_finite())) {
                    o.witnesses.push(ck.witness(&o.clause.name, p.t, x, f64::INFINITY));
                }
            }
            if !o.witnesses.is_empty() {
                o.clause.verdict = Verdict::Violated;
            }
            notes.push("lower semi-continuity of v is assumed, not checked".to_string());
            vec![
                o,
                Outcome::not_checkable("second moments uniform over compacts", "moment bounds depend on the law of X"),
            ]
        }
        ConditionTag::Thm43 => lipschitz_hypotheses(&ck, hyp)?,
    };
    let mut report = combine(tag, region, settings, outcomes);
    report.fd_pieces = spec.fd_pieces(&pieces).into_iter().map(String::from).collect();
    if tag != ConditionTag::B
        && !spec.fd_pieces(&[Piece::GeneratorPartials]).is_empty()
        && pieces.contains(&Piece::GeneratorPartials)
    {
        notes.push("partials of h+m by finite differences; verdicts inherit their truncation error".to_string());
    }
    report.notes = notes;
    Ok(report)
}

/// Probes whether `μ_k`, `k >= 2`, depends on `x1` at paired points.
fn check_drift_structure(ck: &Checker<'_>) -> Outcome {
    const PAIRS: usize = 10;
    const THRESHOLD: f64 = 1e-10;
    let name = "mu_k independent of x1 for k >= 2";
    let mut o = Outcome::new(name, Verdict::HoldsOnSample, None);
    let d = ck.d;
    if d == 1 {
        o.clause.note = Some("vacuous in one dimension".into());
        return o;
    }
    let (lo, hi) = ck.region.x[0];
    let (mut base, mut other) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
    for p in ck.points(ck.region) {
        ck.spec.drift(&p.x[..d], &mut base[..d]);
        let mut y = p.x;
        for j in 0..PAIRS {
            y[0] = lo + (hi - lo) * (j as f64 + 0.5) / PAIRS as f64;
            ck.spec.drift(&y[..d], &mut other[..d]);
            let gap = (1..d).map(|k| (other[k] - base[k]).abs()).fold(0.0, f64::max);
            if !(gap <= THRESHOLD) {
                o.witnesses.push(ck.witness(name, p.t, &y, gap));
                break;
            }
        }
    }
    if !o.witnesses.is_empty() {
        o.clause.verdict = Verdict::Violated;
    }
    o
}

fn lipschitz_hypotheses(ck: &Checker<'_>, hyp: &LipschitzHypotheses) -> Result<Vec<Outcome>> {
    let spec = ck.spec;
    if ck.d != 1 {
        return Ok(vec![Outcome::not_checkable("one-dimensional hypotheses", "problem is not one-dimensional")]);
    }
    let (t1, t2) = hyp.interval;
    if !(t1 < t2 && t1 >= 0.0 && t2 <= spec.effective_horizon()) {
        return Err(Error::Parameter("candidate interval must satisfy 0 <= t1 < t2 <= T".into()));
    }
    let mut out = Vec::new();
    let sigma_ok = spec.sigma()[0] != 0.0;
    out.push(Outcome::new("sigma > 0", if sigma_ok { Verdict::HoldsOnSample } else { Verdict::Violated }, None));
    if !sigma_ok {
        out.last_mut().unwrap().witnesses.push(ck.witness("sigma > 0", t1, &[0.0], 0.0));
    }
    // μ' bounded below: the required constant is -inf μ'.
    out.push(ck.upper("mu' > -c", "mu_lower", |_, x| {
        let mut j = [0.0];
        spec.drift_jacobian(x, &mut j);
        (-j[0], 1.0)
    }));
    out.push(match hyp.boundary_at_t0 {
        None => Outcome::not_checkable("(i) |b(t0)| < inf", "no boundary value supplied"),
        Some(b) if b.is_finite() => Outcome::new("(i) |b(t0)| < inf", Verdict::HoldsOnSample, None),
        Some(b) => {
            let mut o = Outcome::new("(i) |b(t0)| < inf", Verdict::Violated, None);
            o.witnesses.push(ck.witness("(i) |b(t0)| < inf", t1, &[b], f64::INFINITY));
            o
        }
    });
    // γ̄ over the closed interval, searched on the region's x1 range.
    let bracket = (ck.region.x[0].0, ck.region.x[0].1.max(hyp.level));
    let mut gamma_bar = f64::NEG_INFINITY;
    for i in 0..=8 {
        let t = t1 + (t2 - t1) * i as f64 / 8.0;
        let g = ck.s1 * gamma_curve(spec, t, &[], bracket)?;
        gamma_bar = gamma_bar.max(g);
    }
    let mut o = Outcome::new("(ii) gamma_bar < inf", Verdict::HoldsOnSample, None);
    if gamma_bar.is_finite() {
        o.constants.push(NamedConstant { name: "gamma_bar".into(), value: ck.s1 * gamma_bar });
    } else {
        o.clause.verdict = Verdict::Violated;
        o.witnesses.push(ck.witness("(ii) gamma_bar < inf", t2, &[bracket.1], f64::INFINITY));
    }
    out.push(o);
    // (iii) on the strip below the level, extended downwards by the growth probes.
    let level = ck.s1 * hyp.level;
    if !(level > gamma_bar) {
        let mut o = Outcome::new("(iii) level above gamma_bar", Verdict::Violated, None);
        o.witnesses.push(ck.witness("(iii) level above gamma_bar", t1, &[hyp.level], gamma_bar - level));
        out.push(o);
    } else {
        let lo = ck.region.x[0].0.min(ck.region.x[0].1);
        let width = (hyp.level - lo).abs().max(1.0);
        let strip = Region {
            t: (t1, t2),
            x: vec![if ck.s1 > 0.0 { (hyp.level - width, hyp.level) } else { (hyp.level, hyp.level + width) }],
        };
        // Dilation of a strip anchored at the level: shift the centre so the
        // anchored end stays fixed.
        let sub = Checker { region: &strip, ..*ck };
        let anchored = AnchoredLower { ck: &sub, anchor: hyp.level };
        out.push(anchored.run("(iii) d1(h+m) >= alpha_r below the level", "alpha_r"));
    }
    Ok(out)
}

/// Lower-bound clause on a half-strip `(-∞, level)`: probes extend away from the level.
struct AnchoredLower<'a, 'b> {
    ck: &'a Checker<'b>,
    anchor: f64,
}

impl AnchoredLower<'_, '_> {
    fn run(&self, name: &str, constant: &str) -> Outcome {
        let ck = self.ck;
        let mut o = Outcome::new(name, Verdict::HoldsOnSample, None);
        let eval = |region: &Region| {
            let mut best = (f64::INFINITY, 0.0, 0.0);
            for p in ck.points(region) {
                let v = ck.hm_parts(p.t, &p.x[..1]).0;
                let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
                if v < best.0 {
                    best = (v, p.t, p.x[0]);
                }
            }
            best
        };
        let (a, b) = ck.region.x[0];
        let width = b - a;
        let mut seq = Vec::new();
        let mut c0 = f64::NAN;
        for s in core::iter::once(1.0).chain(ck.settings.growth_factors.iter().copied()) {
            let x = if ck.s1 > 0.0 {
                (self.anchor - s * width, self.anchor)
            } else {
                (self.anchor, self.anchor + s * width)
            };
            let (c, t, x1) = eval(&Region { t: ck.region.t, x: vec![x] });
            if !(c > 0.0) {
                o.clause.verdict = Verdict::Violated;
                o.witnesses.push(ck.witness(name, t, &[x1], -c));
                return o;
            }
            if seq.is_empty() {
                c0 = c;
            }
            seq.push(1.0 / c);
        }
        if ck.growing(&seq) {
            o.clause.verdict = Verdict::Violated;
            o.clause.note = Some("lower bound decays to zero away from the level".into());
            o.witnesses.push(ck.witness(name, ck.region.t.0, &[self.anchor], c0));
        } else {
            o.constants.push(NamedConstant { name: constant.to_string(), value: c0 });
        }
        o
    }
}

/// Which regularity results the checked conditions support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Applicability {
    /// One-dimensional Lipschitz theorem: (A), (C), (D) and, for finite horizon,
    /// Cor 3.2 (i) or (ii).
    pub lipschitz_1d: bool,
    /// Multi-dimensional theorem under (F): (A), (B), (C), (E), (F).
    pub under_f: bool,
    /// Multi-dimensional theorem under (G): (A), (B), (C), (E), (G).
    pub under_g: bool,
    /// None of the general results applies; a problem-specific argument is needed.
    pub custom_path: bool,
    pub notes: Vec<String>,
}

/// Reads off applicability from a set of reports. Missing tags count as not holding.
pub fn applicability(dim: usize, finite_horizon: bool, reports: &[ConditionReport]) -> Applicability {
    let holds = |t: ConditionTag| reports.iter().any(|r| r.tag == t && r.holds());
    let all = |ts: &[ConditionTag]| ts.iter().all(|t| holds(*t));
    use ConditionTag::*;
    let cor = !finite_horizon || holds(Cor32I) || holds(Cor32Ii);
    let lipschitz_1d = dim == 1 && all(&[A, C, D]) && cor;
    let under_f = dim >= 2 && all(&[A, B, C, E, F]);
    let under_g = dim >= 2 && all(&[A, B, C, E, G]);
    let custom_path = !(lipschitz_1d || under_f || under_g);
    let mut notes = Vec::new();
    if dim == 1 && all(&[A, C, D]) && !cor {
        notes.push(
            "neither alternative of Cor 3.2 holds; the time-derivative bound needs a problem-specific argument".into(),
        );
    }
    if custom_path {
        notes.push("general results do not apply on this sample; regularity requires a custom argument".into());
    }
    Applicability { lipschitz_1d, under_f, under_g, custom_path, notes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::Payoff;

    fn zero_spec() -> ProblemSpec {
        ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .generator_partials(|_, _, g| {
                g[0] = 0.0;
                0.0
            })
            .build()
            .unwrap()
    }

    fn unit() -> Region {
        Region { t: (0.0, 1.0), x: vec![(-1.0, 1.0)] }
    }

    #[test]
    fn zero_payoffs_satisfy_terminal_conditions() {
        let s = zero_spec();
        let set = CheckSettings::with_samples(64, 0);
        for tag in [ConditionTag::A, ConditionTag::Cor32I] {
            let r = check_condition(&s, tag, &unit(), &set).unwrap();
            assert_eq!(r.verdict, Verdict::HoldsOnSample, "{tag}");
            assert!(r.witnesses.is_empty());
        }
    }

    #[test]
    fn tags_round_trip_through_strings() {
        for t in ConditionTag::ALL {
            assert_eq!(t.as_str().parse::<ConditionTag>().unwrap(), t);
        }
        assert!("H".parse::<ConditionTag>().is_err());
    }

    #[test]
    fn drift_depending_on_x1_breaks_structure() {
        let s = ProblemSpec::builder(2)
            .finite_horizon(1.0)
            .drift(
                |x, o| {
                    o[0] = 0.0;
                    o[1] = 0.3 * x[0];
                },
                |_, j| {
                    j.fill(0.0);
                    j[2] = 0.3;
                },
            )
            .sigma(vec![1.0, 0.0, 0.0, 1.0])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let r = check_condition(
            &s,
            ConditionTag::B,
            &Region { t: (0.0, 1.0), x: vec![(-1.0, 1.0); 2] },
            &CheckSettings::with_samples(16, 0),
        )
        .unwrap();
        assert_eq!(r.verdict, Verdict::Violated);
        assert!(!r.witnesses.is_empty());
        assert!(r.constants.is_empty());
    }

    #[test]
    fn exponential_requirement_is_unbounded() {
        // h + n = -e^{-x}: the constant of Cor 3.2 (ii) must dominate e^{-x}.
        let s = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .running(
                Payoff::new(|_, x| -libm::exp(-x[0]))
                    .with_gradient(|_, x, g| g[0] = libm::exp(-x[0]))
                    .with_time_derivative(|_, _| 0.0),
            )
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::constant(0.0))
            .build()
            .unwrap();
        let r = check_condition(&s, ConditionTag::Cor32Ii, &unit(), &CheckSettings::with_samples(32, 0)).unwrap();
        assert_eq!(r.verdict, Verdict::Violated);
        assert_eq!(r.witnesses.len(), 1);
    }

    #[test]
    fn enlarging_the_sample_keeps_violations() {
        let s = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .obstacle(Payoff::constant(0.0))
            .terminal(Payoff::linear(vec![1.0], 0.0))
            .build()
            .unwrap();
        let small = check_condition(&s, ConditionTag::A, &unit(), &CheckSettings::with_samples(8, 3)).unwrap();
        let large = check_condition(&s, ConditionTag::A, &unit(), &CheckSettings::with_samples(200, 3)).unwrap();
        assert_eq!(small.verdict, Verdict::Violated);
        assert_eq!(large.verdict, Verdict::Violated);
        assert!(large.witnesses.len() >= small.witnesses.len());
        let again = check_condition(&s, ConditionTag::A, &unit(), &CheckSettings::with_samples(8, 3)).unwrap();
        assert_eq!(small, again);
    }

    #[test]
    fn missing_partials_is_a_configuration_error() {
        let s = ProblemSpec::builder(1)
            .finite_horizon(1.0)
            .constant_drift(vec![0.0])
            .sigma(vec![1.0])
            .obstacle(Payoff::constant(0.0))
            .terminal_equals_obstacle()
            .build()
            .unwrap();
        assert!(matches!(
            check_condition(&s, ConditionTag::C, &unit(), &CheckSettings::default()),
            Err(Error::MissingDerivative(_))
        ));
    }
}

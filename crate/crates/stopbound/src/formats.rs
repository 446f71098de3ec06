//! On-disk formats: value-surface CSV, boundary CSV, path traces and JSON.
//!
//! Numbers are written in Rust's shortest round-trip form (`1e-7`, `0.25`, `inf`),
//! so parsing a written value gives back the same `f64` bit for bit.

use std::fmt::Write as _;

use serde::Serialize;
use stopbound_core::boundary::{BoundarySurface, Provenance};
use stopbound_core::flow::PathBundle;
use stopbound_core::pde::{Region, RegionMask, ValueSurface};

use crate::error::RunError;

/// Shortest decimal representation that parses back to `v` exactly.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("artifact types serialise");
    out.push(b'\n');
    out
}

fn region_str(r: Region) -> &'static str {
    match r {
        Region::Continuation => "continuation",
        Region::Stopping => "stopping",
        Region::Face => "face",
    }
}

/// Indices `0..n` thinned to at most `max` entries, keeping both ends.
pub fn thin(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let stride = (n - 1).div_ceil(max - 1);
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if *idx.last().unwrap() != n - 1 {
        idx.push(n - 1);
    }
    idx
}

/// Writes surface nodes as `t,x1,...,xd,v,w,region`, time-major, then x1, then
/// the second axis. Rows follow `max_nodes = (t, x1, second axis)` thinning.
pub fn surface_csv(
    surface: &ValueSurface,
    mask: &RegionMask,
    max_nodes: (usize, usize, usize),
    header: bool,
) -> String {
    let g = &surface.grid;
    let d = g.dim();
    let (na, nb) = g.shape();
    let mut s = String::new();
    if header {
        s.push('t');
        for k in 1..=d {
            let _ = write!(s, ",x{k}");
        }
        s.push_str(",v,w,region\n");
    }
    let mut x = vec![0.0; d];
    for k in thin(g.n_t + 1, max_nodes.0) {
        let t = num(g.time(k));
        for i in thin(na, max_nodes.1) {
            for j in thin(nb, max_nodes.2) {
                g.point(i, j, &mut x);
                let n = surface.index(k, i, j);
                s.push_str(&t);
                for v in &x {
                    s.push(',');
                    s.push_str(&num(*v));
                }
                let _ = writeln!(s, ",{},{},{}", num(surface.v[n]), num(surface.w[n]), region_str(mask.regions[n]));
            }
        }
    }
    s
}

fn provenance_parts(p: Provenance) -> (&'static str, f64) {
    match p {
        Provenance::PdeExact => ("pde-exact", 0.0),
        Provenance::DeltaLevel { delta } => ("delta-level", delta),
        Provenance::Analytic => ("analytic", 0.0),
    }
}

/// Boundary rows `t,x2,...,xd,b,provenance,delta` for each surface in turn. All
/// surfaces must share the tail dimension; `tail_names` labels the tail columns.
pub fn boundary_csv(surfaces: &[&BoundarySurface], tail_names: &[String]) -> String {
    let mut s = String::from("t");
    for n in tail_names {
        s.push(',');
        s.push_str(n);
    }
    s.push_str(",b,provenance,delta\n");
    for b in surfaces {
        let (prov, delta) = provenance_parts(b.provenance);
        let shape = b.tail_shape();
        let cells = b.cells_per_slice();
        let mut idx = vec![0usize; shape.len()];
        for (ti, t) in b.times.iter().enumerate() {
            for c in 0..cells {
                let mut rem = c;
                for a in (0..shape.len()).rev() {
                    idx[a] = rem % shape[a];
                    rem /= shape[a];
                }
                s.push_str(&num(*t));
                for (a, &i) in idx.iter().enumerate() {
                    s.push(',');
                    s.push_str(&num(b.tail_axes[a][i]));
                }
                let _ = writeln!(s, ",{},{prov},{}", num(b.node(ti, &idx)), num(delta));
            }
        }
    }
    s
}

/// One parsed boundary CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRow {
    pub t: f64,
    pub tail: Vec<f64>,
    pub b: f64,
    pub provenance: String,
    pub delta: f64,
}

pub fn read_boundary_csv(text: &str) -> Result<Vec<BoundaryRow>, RunError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let width = rdr.headers().map_err(|e| RunError::Config(format!("boundary csv: {e}")))?.len();
    if width < 4 {
        return Err(RunError::Config("boundary csv: too few columns".into()));
    }
    let p = |s: &str| s.parse::<f64>().map_err(|e| RunError::Config(format!("boundary csv: `{s}`: {e}")));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RunError::Config(format!("boundary csv: {e}")))?;
        let f: Vec<&str> = rec.iter().collect();
        let n = f.len();
        out.push(BoundaryRow {
            t: p(f[0])?,
            tail: f[1..n - 3].iter().map(|s| p(s)).collect::<Result<_, _>>()?,
            b: p(f[n - 3])?,
            provenance: f[n - 2].to_string(),
            delta: p(f[n - 1])?,
        });
    }
    Ok(out)
}

/// Path trace `path,step,t,x1..xd[,j11..jdd][,log_weight]`, one row per stored
/// node. Flow entries `jAB` are `∂_B X^A`.
pub fn bundle_csv(bundle: &PathBundle) -> String {
    let d = bundle.dim;
    let mut s = String::from("path,step,t");
    for k in 1..=d {
        let _ = write!(s, ",x{k}");
    }
    if bundle.flow.is_some() {
        for a in 1..=d {
            for b in 1..=d {
                let _ = write!(s, ",j{a}{b}");
            }
        }
    }
    if bundle.log_weights.is_some() {
        s.push_str(",log_weight");
    }
    s.push('\n');
    for p in 0..bundle.n_paths {
        for n in 0..bundle.nodes() {
            let _ = write!(s, "{},{n},{}", bundle.path_offset + p as u64, num(bundle.grid.time(n)));
            for v in bundle.state(p, n) {
                s.push(',');
                s.push_str(&num(*v));
            }
            if let Some(j) = bundle.flow_at(p, n) {
                for v in j {
                    s.push(',');
                    s.push_str(&num(*v));
                }
            }
            if let Some(lw) = &bundle.log_weights {
                s.push(',');
                s.push_str(&num(lw[p * bundle.nodes() + n]));
            }
            s.push('\n');
        }
    }
    s
}

/// Magic bytes opening a binary path trace.
pub const TRACE_MAGIC: &[u8; 8] = b"SBTRACE1";

/// Binary path trace: magic, then little-endian `u64` fields `n_paths, nodes, dim,
/// has_flow, has_weights, path_offset`, then `f64` `dt`, then per path and node
/// the state, flow entries and log weight as present.
pub fn bundle_binary(bundle: &PathBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRACE_MAGIC);
    for v in [
        bundle.n_paths as u64,
        bundle.nodes() as u64,
        bundle.dim as u64,
        bundle.flow.is_some() as u64,
        bundle.log_weights.is_some() as u64,
        bundle.path_offset,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&bundle.dt.to_le_bytes());
    for p in 0..bundle.n_paths {
        for n in 0..bundle.nodes() {
            for v in bundle.state(p, n) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(j) = bundle.flow_at(p, n) {
                for v in j {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            if let Some(lw) = &bundle.log_weights {
                out.extend_from_slice(&lw[p * bundle.nodes() + n].to_le_bytes());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use stopbound_core::problem::Orientation;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e17, f64::INFINITY, f64::NEG_INFINITY, 0.0, -0.0] {
            let back: f64 = num(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v}");
        }
    }

    #[test]
    fn thinning_keeps_ends() {
        assert_eq!(thin(5, 10), vec![0, 1, 2, 3, 4]);
        let t = thin(401, 41);
        assert_eq!((t[0], *t.last().unwrap()), (0, 400));
        assert!(t.len() <= 42);
        assert_eq!(thin(10, 2), vec![0, 9]);
    }

    #[test]
    fn boundary_rows_round_trip() {
        let b =
            BoundarySurface::from_fn(vec![0.0, 0.5], vec![vec![-1.0, 1.0 / 3.0]], Orientation::StopBelow, |t, z| {
                if z[0] < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    0.1 + t / 7.0
                }
            })
            .unwrap();
        let text = boundary_csv(&[&b], &["x2".into()]);
        let rows = read_boundary_csv(&text).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].tail, vec![1.0 / 3.0]);
        assert_eq!(rows[3].b, b.node(1, &[1]));
        assert_eq!(rows[2].b, f64::NEG_INFINITY);
        assert_eq!(rows[0].provenance, "analytic");
    }
}

//! Field and log output: legacy VTK structured points, CSV loss histories,
//! JSON verdicts, and simple thresholding of designs.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::Grid;
use crate::material::{build_tensors, DesignField, MaterialParams};
use crate::optimizer::IterationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VtkFormat {
    #[default]
    Ascii,
    /// Big-endian binary, as the legacy format requires.
    Binary,
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

/// Cells where `eps * rho` exceeds `threshold`.
pub fn fluid_mask(theta: &DesignField, threshold: f64) -> Vec<bool> {
    theta
        .rho
        .iter()
        .zip(&theta.eps)
        .map(|(r, e)| r * e > threshold)
        .collect()
}

/// Cells where `rho` exceeds `threshold`: isotropic and anisotropic fluid alike.
pub fn fluidity_mask(theta: &DesignField, threshold: f64) -> Vec<bool> {
    theta.rho.iter().map(|r| *r > threshold).collect()
}

/// Whether some masked cell touching `from` reaches a masked cell touching
/// `to` through face-adjacent masked cells. Node lists are global node ids.
pub fn connects(grid: &Grid, mask: &[bool], from: &[usize], to: &[usize]) -> bool {
    let d = grid.dim();
    let cells = grid.cells_per_axis();
    let touching = |nodes: &[usize]| {
        let mut hit = vec![false; grid.n_cells()];
        for &n in nodes {
            let c = grid.node_coords(n);
            // every cell that has this node as a corner
            for corner in 0..grid.n_corners() {
                let mut cc = [0usize; 3];
                let mut ok = true;
                for a in 0..d {
                    let off = (corner >> a) & 1;
                    if c[a] < off || c[a] - off >= cells[a] {
                        ok = false;
                        break;
                    }
                    cc[a] = c[a] - off;
                }
                if ok {
                    hit[grid.cell_index(&cc)] = true;
                }
            }
        }
        hit
    };
    let start = touching(from);
    let goal = touching(to);
    let mut seen = vec![false; grid.n_cells()];
    let mut queue = VecDeque::new();
    for c in 0..grid.n_cells() {
        if start[c] && mask[c] {
            seen[c] = true;
            queue.push_back(c);
        }
    }
    while let Some(c) = queue.pop_front() {
        if goal[c] {
            return true;
        }
        let cc = grid.cell_coords(c);
        for a in 0..d {
            for up in [false, true] {
                let mut nc = cc;
                if up {
                    if cc[a] + 1 >= cells[a] {
                        continue;
                    }
                    nc[a] += 1;
                } else {
                    if cc[a] == 0 {
                        continue;
                    }
                    nc[a] -= 1;
                }
                let k = grid.cell_index(&nc);
                if mask[k] && !seen[k] {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
    }
    false
}

struct VtkWriter {
    format: VtkFormat,
    buf: Vec<u8>,
}

impl VtkWriter {
    fn line(&mut self, s: &str) {
        self.buf.extend_from_slice(s.as_bytes());
        self.buf.push(b'\n');
    }

    fn values(&mut self, vals: impl Iterator<Item = f64>, per_line: usize) {
        match self.format {
            VtkFormat::Ascii => {
                let mut s = String::new();
                for (i, v) in vals.enumerate() {
                    if i > 0 {
                        s.push(if i % per_line == 0 { '\n' } else { ' ' });
                    }
                    write!(s, "{v:e}").unwrap();
                }
                self.line(&s);
            }
            VtkFormat::Binary => {
                for v in vals {
                    self.buf.extend_from_slice(&v.to_be_bytes());
                }
                self.buf.push(b'\n');
            }
        }
    }

    fn scalars(&mut self, name: &str, vals: &[f64]) {
        self.line(&format!("SCALARS {name} double 1"));
        self.line("LOOKUP_TABLE default");
        self.values(vals.iter().copied(), 1);
    }

    fn vectors(&mut self, name: &str, vals: &[[f64; 3]]) {
        self.line(&format!("VECTORS {name} double"));
        self.values(vals.iter().flatten().copied(), 3);
    }
}

/// Write a legacy VTK structured-points file with nodal velocity (when
/// given) and per-cell design fields, material scalars and normals.
#[allow(clippy::too_many_arguments)]
pub fn write_vtk(
    path: &Path,
    grid: &Grid,
    velocity: Option<&[f64]>,
    theta: &DesignField,
    hyper: &MaterialParams,
    eps0: f64,
    rho0: f64,
    format: VtkFormat,
) -> Result<()> {
    let d = grid.dim();
    if theta.n_cells() != grid.n_cells() {
        return Err(Error::Domain("design size does not match the grid".into()));
    }
    if let Some(v) = velocity {
        if v.len() != grid.n_dofs() {
            return Err(Error::Domain(
                "velocity size does not match the grid".into(),
            ));
        }
    }
    let tensors = build_tensors(theta, hyper, Exec::Sequential)?;
    let nodes = grid.nodes_per_axis();
    let dims: Vec<usize> = (0..3).map(|a| if a < d { nodes[a] } else { 1 }).collect();
    let h = grid.h();

    let mut w = VtkWriter {
        format,
        buf: Vec::new(),
    };
    w.line("# vtk DataFile Version 3.0");
    w.line(&format!("anisoflow {}x{}", grid.n_cells(), d));
    w.line(match format {
        VtkFormat::Ascii => "ASCII",
        VtkFormat::Binary => "BINARY",
    });
    w.line("DATASET STRUCTURED_POINTS");
    w.line(&format!("DIMENSIONS {} {} {}", dims[0], dims[1], dims[2]));
    w.line("ORIGIN 0 0 0");
    w.line(&format!("SPACING {h:e} {h:e} {h:e}"));

    if let Some(v) = velocity {
        w.line(&format!("POINT_DATA {}", grid.n_nodes()));
        let vecs: Vec<[f64; 3]> = (0..grid.n_nodes())
            .map(|n| {
                let mut x = [0.0; 3];
                x[..d].copy_from_slice(&v[n * d..n * d + d]);
                x
            })
            .collect();
        let speed: Vec<f64> = vecs
            .iter()
            .map(|x| x.iter().map(|c| c * c).sum::<f64>().sqrt())
            .collect();
        w.vectors("velocity", &vecs);
        w.scalars("speed", &speed);
    }

    w.line(&format!("CELL_DATA {}", grid.n_cells()));
    w.scalars("rho", &theta.rho);
    w.scalars("eps", &theta.eps);
    let na = theta.n_angles();
    for k in 0..na {
        let a: Vec<f64> = (0..theta.n_cells())
            .map(|c| theta.alpha[c * na + k])
            .collect();
        w.scalars(&format!("alpha{k}"), &a);
    }
    let lambda: Vec<f64> = tensors.cells.iter().map(|c| c.lambda).collect();
    w.scalars("lambda", &lambda);
    let aniso: Vec<f64> = theta
        .rho
        .iter()
        .zip(&theta.eps)
        .map(|(&r, &e)| if e < eps0 && r > rho0 { 1.0 } else { 0.0 })
        .collect();
    w.scalars("anisotropic", &aniso);
    let fluid: Vec<f64> = fluid_mask(theta, 0.5)
        .into_iter()
        .map(|f| f as u8 as f64)
        .collect();
    w.scalars("fluid", &fluid);
    let normals: Vec<[f64; 3]> = tensors.cells.iter().map(|c| c.normal).collect();
    w.vectors("normal", &normals);

    fs::write(path, &w.buf).map_err(|e| io_err(path, e))
}

/// CSV of per-iteration losses with a header row. Floats use the shortest
/// representation that parses back to the same value.
pub fn history_csv(records: &[IterationRecord]) -> String {
    let mut s = IterationRecord::HEADER.join(",");
    s.push('\n');
    for r in records {
        write!(s, "{}", r.iteration).unwrap();
        for v in r.values() {
            write!(s, ",{v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_history(path: &Path, records: &[IterationRecord]) -> Result<()> {
    fs::write(path, history_csv(records)).map_err(|e| io_err(path, e))
}

/// Appends rows as they arrive, so a partial history survives a failure.
pub struct HistoryWriter {
    file: fs::File,
    path: std::path::PathBuf,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
        writeln!(file, "{}", IterationRecord::HEADER.join(",")).map_err(|e| io_err(path, e))?;
        Ok(HistoryWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, r: &IterationRecord) -> Result<()> {
        let row = history_csv(std::slice::from_ref(r));
        let body = row.split_once('\n').map(|x| x.1).unwrap_or("");
        self.file
            .write_all(body.as_bytes())
            .map_err(|e| io_err(&self.path, e))?;
        self.file.flush().map_err(|e| io_err(&self.path, e))
    }
}

pub fn parse_history(text: &str) -> Result<Vec<IterationRecord>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Input("empty history".into()))?;
    if header.split(',').ne(IterationRecord::HEADER) {
        return Err(Error::Input(format!(
            "unexpected history header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::Input(format!("history row {}: {line:?}", i + 1));
        let mut f = line.split(',');
        let iteration = f.next().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
        let v: Vec<f64> = f
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if v.len() != 10 {
            return Err(bad());
        }
        out.push(IterationRecord {
            iteration,
            l_f: v[0],
            l_c: v[1],
            l_d: v[2],
            l_a: v[3],
            total: v[4],
            v_iso: v[5],
            v_all: v[6],
            g_iso: v[7],
            g_all: v[8],
            max_change: v[9],
        });
    }
    Ok(out)
}

pub fn read_history(path: &Path) -> Result<Vec<IterationRecord>> {
    parse_history(&fs::read_to_string(path).map_err(|e| io_err(path, e))?)
}

/// One checked property of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

/// Machine-readable outcome of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub experiment: String,
    pub pass: bool,
    pub checks: Vec<Check>,
    /// Free-form numbers worth keeping (ratios, errors, timings).
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub seconds: f64,
}

impl Verdict {
    pub fn new(experiment: &str) -> Self {
        Verdict {
            experiment: experiment.to_string(),
            pass: true,
            checks: Vec::new(),
            metrics: Default::default(),
            seconds: 0.0,
        }
    }

    pub fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.pass &= pass;
        self.checks.push(Check::new(name, pass, detail));
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(serde_json::Value::Null),
        );
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Input(e.to_string()))?;
        fs::write(path, s + "\n").map_err(|e| io_err(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: usize, x: f64) -> IterationRecord {
        IterationRecord {
            iteration: i,
            l_f: x,
            l_c: x / 3.0,
            l_d: 0.0,
            l_a: 1e-300,
            total: x.sqrt(),
            v_iso: 0.1 + x,
            v_all: -0.0,
            g_iso: -1.0 / 7.0,
            g_all: 123456.789,
            max_change: f64::MIN_POSITIVE,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let recs: Vec<_> = (0..5)
            .map(|i| record(i, std::f64::consts::PI * (i as f64 + 0.1)))
            .collect();
        let back = parse_history(&history_csv(&recs)).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn incremental_writer_matches_batch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let recs: Vec<_> = (0..3).map(|i| record(i, 0.7 * i as f64)).collect();
        let mut w = HistoryWriter::create(&p).unwrap();
        for r in &recs {
            w.append(r).unwrap();
        }
        drop(w);
        assert_eq!(fs::read_to_string(&p).unwrap(), history_csv(&recs));
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(parse_history("a,b\n1,2\n").is_err());
    }

    fn zero_vtk(format: VtkFormat) -> Vec<u8> {
        let g = Grid::new(&[2, 2], 1).unwrap();
        let theta = DesignField::uniform(2, 4, 0.0, 0.0, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.vtk");
        let v = vec![0.0; g.n_dofs()];
        write_vtk(
            &p,
            &g,
            Some(&v),
            &theta,
            &MaterialParams::default(),
            0.5,
            0.5,
            format,
        )
        .unwrap();
        fs::read(&p).unwrap()
    }

    #[test]
    fn ascii_vtk_layout() {
        let text = String::from_utf8(zero_vtk(VtkFormat::Ascii)).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(text.contains("DIMENSIONS 3 3 1\n"));
        assert!(text.contains("POINT_DATA 9\n"));
        assert!(text.contains("CELL_DATA 4\n"));
        // velocity block: nine rows of zeros
        let after = text.split("VECTORS velocity double\n").nth(1).unwrap();
        let rows: Vec<&str> = after.lines().take(9).collect();
        assert!(rows
            .iter()
            .all(|r| r.split(' ').all(|x| x.parse::<f64>().unwrap() == 0.0)));
        let rho = text
            .split("SCALARS rho double 1\nLOOKUP_TABLE default\n")
            .nth(1)
            .unwrap();
        assert!(rho
            .lines()
            .take(4)
            .all(|r| r.parse::<f64>().unwrap() == 0.0));
    }

    #[test]
    fn binary_vtk_is_big_endian() {
        let bytes = zero_vtk(VtkFormat::Binary);
        let marker = b"SCALARS rho double 1\nLOOKUP_TABLE default\n";
        let pos = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .unwrap()
            + marker.len();
        // rho = 0 everywhere; the eps block follows after 4 doubles and a newline
        assert!(bytes[pos..pos + 32].iter().all(|&b| b == 0));
        assert_eq!(bytes[pos + 32], b'\n');
        let marker = b"SCALARS lambda double 1\nLOOKUP_TABLE default\n";
        let pos = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .unwrap()
            + marker.len();
        let lam = f64::from_be_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let hp = MaterialParams::default();
        assert_eq!(lam, hp.lambda_min + hp.lambda_max);
    }

    #[test]
    fn speed_is_velocity_norm() {
        let g = Grid::new(&[2, 1], 1).unwrap();
        let theta = DesignField::uniform(2, 2, 1.0, 1.0, 0.0);
        let v: Vec<f64> = (0..g.n_dofs()).map(|i| i as f64 - 2.5).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.vtk");
        write_vtk(
            &p,
            &g,
            Some(&v),
            &theta,
            &MaterialParams::default(),
            0.5,
            0.5,
            VtkFormat::Ascii,
        )
        .unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let after = text
            .split("SCALARS speed double 1\nLOOKUP_TABLE default\n")
            .nth(1)
            .unwrap();
        for (n, line) in after.lines().take(g.n_nodes()).enumerate() {
            let s: f64 = line.parse().unwrap();
            let want = v[2 * n].hypot(v[2 * n + 1]);
            assert!((s - want).abs() <= 1e-15 * want.max(1.0), "{s} vs {want}");
        }
    }

    #[test]
    fn connectivity_follows_faces() {
        let g = Grid::new(&[3, 3], 1).unwrap();
        let left: Vec<usize> = (0..4).map(|y| g.node_index(&[0, y])).collect();
        let right: Vec<usize> = (0..4).map(|y| g.node_index(&[3, y])).collect();
        // diagonal staircase: cells touch only at corners
        let mut mask = vec![false; 9];
        for i in 0..3 {
            mask[g.cell_index(&[i, i])] = true;
        }
        assert!(!connects(&g, &mask, &left, &right));
        mask[g.cell_index(&[1, 0])] = true;
        mask[g.cell_index(&[2, 1])] = true;
        assert!(connects(&g, &mask, &left, &right));
    }

    #[test]
    fn verdict_json_round_trip() {
        let mut v = Verdict::new("demo");
        v.check("a", true, "fine");
        v.check("b", false, "ratio 0.95");
        v.metric("ratio", 0.95);
        assert!(!v.pass);
        let s = serde_json::to_string(&v).unwrap();
        let back: Verdict = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }
}

//! Task files: grid, boundary patches, material, objective and optimizer
//! settings in one TOML document, and their translation into a [`Problem`].
//!
//! ```toml
//! name = "amplifier"
//!
//! [grid]
//! dim = 2
//! cells = [64, 64]
//! block_size = 8
//!
//! [[patch]]
//! id = "in"
//! face = "x-"
//! role = "inlet"
//! center = [0.5]
//! extent = [0.6]
//! velocity = [1.0, 0.0]
//!
//! [[patch]]
//! id = "out"
//! face = "x+"
//! role = "outlet"
//! extent = [0.36]
//! target = [1.6667, 0.0]
//! ```
//!
//! Face coordinates are normalized to `[0, 1]` along each in-face axis, in
//! increasing axis order (`x- / x+` use `(y, z)`, `y- / y+` use `(x, z)`,
//! `z- / z+` use `(x, y)`). Every boundary node that is not on an inlet or an
//! outlet gets a zero-velocity condition.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::DirichletSet;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::material::MaterialParams;
use crate::objective::ObjectiveWeights;

const GEOM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Face {
    #[serde(rename = "x-")]
    XMinus,
    #[serde(rename = "x+")]
    XPlus,
    #[serde(rename = "y-")]
    YMinus,
    #[serde(rename = "y+")]
    YPlus,
    #[serde(rename = "z-")]
    ZMinus,
    #[serde(rename = "z+")]
    ZPlus,
}

impl Face {
    pub fn axis(self) -> usize {
        match self {
            Face::XMinus | Face::XPlus => 0,
            Face::YMinus | Face::YPlus => 1,
            Face::ZMinus | Face::ZPlus => 2,
        }
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Face::XPlus | Face::YPlus | Face::ZPlus)
    }

    /// Outward unit normal.
    pub fn normal(self) -> [f64; 3] {
        let mut n = [0.0; 3];
        n[self.axis()] = if self.is_upper() { 1.0 } else { -1.0 };
        n
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::XMinus => "x-",
            Face::XPlus => "x+",
            Face::YMinus => "y-",
            Face::YPlus => "y+",
            Face::ZMinus => "z-",
            Face::ZPlus => "z+",
        }
    }

    /// In-face axes in increasing order.
    pub fn tangent_axes(self, dim: usize) -> Vec<usize> {
        (0..dim).filter(|&a| a != self.axis()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Inlet,
    Outlet,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    #[default]
    Rectangle,
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Uniform,
    Parabolic,
}

/// One boundary patch as written in a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub id: String,
    pub face: Face,
    pub role: Role,
    #[serde(default)]
    pub shape: Shape,
    /// Patch centre in normalized face coordinates (default: face centre).
    #[serde(default)]
    pub center: Option<Vec<f64>>,
    /// Rectangle: full widths per in-face axis. Circle: a single diameter,
    /// relative to the shorter in-face side. Default: one third of the face.
    #[serde(default)]
    pub extent: Option<Vec<f64>>,
    /// Inlet velocity; defaults to unit speed along the inward normal.
    #[serde(default)]
    pub velocity: Option<Vec<f64>>,
    /// Outlet target velocity; defaults to unit speed along the outward normal.
    #[serde(default)]
    pub target: Option<Vec<f64>>,
    #[serde(default)]
    pub profile: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub cells: Vec<usize>,
    /// Default 8 in 2D, 4 in 3D.
    #[serde(default)]
    pub block_size: Option<usize>,
    #[serde(default = "yes")]
    pub use_blocks: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub iterations: usize,
    /// Half-width `k` of the uniform noise added to the initial `rho` and `alpha`.
    pub perturb: f64,
    pub seed: u64,
    /// Freeze `eps = 1` and `alpha`, optimizing `rho` only.
    pub isotropic: bool,
    /// MMA move limit as a fraction of each variable's range.
    pub move_limit: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            iterations: 300,
            perturb: 0.0,
            seed: 0,
            isotropic: false,
            move_limit: 0.2,
        }
    }
}

/// Initial design; `rho` defaults to the volume limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSettings {
    pub rho: Option<f64>,
    pub eps: f64,
    pub alpha: f64,
}

impl Default for InitSettings {
    fn default() -> Self {
        InitSettings {
            rho: None,
            eps: 1.0,
            alpha: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default)]
    pub name: String,
    pub grid: GridSection,
    #[serde(default, rename = "patch")]
    pub patches: Vec<PatchSpec>,
    #[serde(default)]
    pub material: MaterialParams,
    #[serde(default)]
    pub objective: ObjectiveWeights,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default)]
    pub init: InitSettings,
}

impl TaskSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: "<string>".into(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("task serializes")
    }

    pub fn block_size(&self) -> usize {
        self.grid
            .block_size
            .unwrap_or(if self.grid.dim == 3 { 4 } else { 8 })
    }

    pub fn build_grid(&self) -> Result<Grid> {
        if self.grid.cells.len() != self.grid.dim {
            return Err(Error::config(format!(
                "grid.cells has {} entries for a {}D grid",
                self.grid.cells.len(),
                self.grid.dim
            )));
        }
        Grid::new(&self.grid.cells, self.block_size())
    }

    /// Same task at a different resolution: cell counts scaled so the longest
    /// axis has `n` cells.
    pub fn at_resolution(&self, n: usize) -> TaskSpec {
        let longest = *self.grid.cells.iter().max().unwrap_or(&1);
        let mut t = self.clone();
        t.grid.cells = self
            .grid
            .cells
            .iter()
            .map(|&c| ((c * n) as f64 / longest as f64).round().max(1.0) as usize)
            .collect();
        t
    }

    /// Check everything, collecting all violations.
    pub fn validate(&self) -> Result<()> {
        self.build_problem().map(|_| ())
    }

    /// Resolve patches to nodes and build the simulation problem.
    pub fn build_problem(&self) -> Result<Problem> {
        let mut errs = Vec::new();
        let grid = match self.build_grid() {
            Ok(g) => Some(g),
            Err(Error::Config(e)) => {
                errs.extend(e);
                None
            }
            Err(e) => {
                errs.push(e.to_string());
                None
            }
        };
        if let Err(Error::Config(e)) = self.material.validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.objective.validate() {
            errs.extend(e);
        }
        if self.optimizer.perturb < 0.0 || !self.optimizer.perturb.is_finite() {
            errs.push(format!(
                "optimizer.perturb must be a nonnegative number, got {}",
                self.optimizer.perturb
            ));
        }
        if !(self.optimizer.move_limit > 0.0 && self.optimizer.move_limit <= 1.0) {
            errs.push(format!(
                "optimizer.move_limit must be in (0, 1], got {}",
                self.optimizer.move_limit
            ));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, p) in self.patches.iter().enumerate() {
            if let Some(first) = seen.insert(p.id.as_str(), i) {
                errs.push(format!(
                    "duplicate patch id \"{}\" (patches #{first} and #{i})",
                    p.id
                ));
            }
        }
        let Some(grid) = grid else {
            return Err(Error::Config(errs));
        };

        let resolved: Vec<Option<ResolvedPatch>> = self
            .patches
            .iter()
            .map(|p| match resolve_patch(&grid, p) {
                Ok(r) => Some(r),
                Err(e) => {
                    errs.extend(e);
                    None
                }
            })
            .collect();

        // overlap checks
        for i in 0..resolved.len() {
            for j in i + 1..resolved.len() {
                let (Some(a), Some(b)) = (&resolved[i], &resolved[j]) else {
                    continue;
                };
                let (pa, pb) = (&self.patches[i], &self.patches[j]);
                let shared = a.nodes.iter().filter(|n| b.weights.contains_key(n)).count();
                if shared == 0 {
                    continue;
                }
                let outlet_vs_fixed = (pa.role == Role::Outlet) != (pb.role == Role::Outlet);
                if pa.face == pb.face {
                    errs.push(format!(
                        "patches \"{}\" and \"{}\" overlap on face {}",
                        pa.id,
                        pb.id,
                        pa.face.name()
                    ));
                } else if outlet_vs_fixed {
                    errs.push(format!(
                        "outlet target on a Dirichlet node: patches \"{}\" and \"{}\" share {shared} node(s)",
                        pa.id, pb.id
                    ));
                } else if pa.role == Role::Outlet {
                    errs.push(format!(
                        "outlets \"{}\" and \"{}\" share {shared} node(s)",
                        pa.id, pb.id
                    ));
                }
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }

        let dim = grid.dim();
        // node -> prescribed velocity; inlets take precedence over walls on shared edges
        let mut fixed: BTreeMap<usize, [f64; 3]> = BTreeMap::new();
        let mut outlet_nodes: BTreeMap<usize, [f64; 3]> = BTreeMap::new();
        let mut inlets = Vec::new();
        let mut outlets = Vec::new();
        for (p, r) in self.patches.iter().zip(resolved.iter().flatten()) {
            let measure = PatchMeasure {
                id: p.id.clone(),
                face: p.face,
                nodes: r.nodes.clone(),
                weights: r.nodes.iter().map(|n| r.weights[n]).collect(),
            };
            match p.role {
                Role::Inlet => {
                    for (&n, s) in r.nodes.iter().zip(&r.profile) {
                        fixed.insert(n, scaled(&r.velocity, *s));
                    }
                    inlets.push(measure);
                }
                Role::Outlet => {
                    for (&n, s) in r.nodes.iter().zip(&r.profile) {
                        outlet_nodes.insert(n, scaled(&r.velocity, *s));
                    }
                    outlets.push(measure);
                }
                Role::Wall => {
                    for &n in &r.nodes {
                        fixed.entry(n).or_insert([0.0; 3]);
                    }
                }
            }
        }
        for n in 0..grid.n_nodes() {
            if is_boundary_node(&grid, n) && !outlet_nodes.contains_key(&n) {
                fixed.entry(n).or_insert([0.0; 3]);
            }
        }
        let mut dirichlet = DirichletSet::new();
        for (&n, v) in &fixed {
            dirichlet.insert_node(&grid, n, &v[..dim])?;
        }
        let mut targets = DirichletSet::new();
        for (&n, v) in &outlet_nodes {
            targets.insert_node(&grid, n, &v[..dim])?;
        }
        if dirichlet.len() == grid.n_dofs() {
            return Err(Error::config(
                "every velocity DOF is prescribed; the task has no free unknowns",
            ));
        }
        Ok(Problem {
            grid,
            hyper: self.material,
            dirichlet,
            targets,
            use_blocks: self.grid.use_blocks,
            inlets,
            outlets,
        })
    }
}

fn scaled(v: &[f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Read and validate a task file.
pub fn load_task(path: impl AsRef<Path>) -> Result<TaskSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let task: TaskSpec = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    task.validate()?;
    Ok(task)
}

pub fn is_boundary_node(grid: &Grid, node: usize) -> bool {
    let c = grid.node_coords(node);
    let np = grid.nodes_per_axis();
    (0..grid.dim()).any(|a| c[a] == 0 || c[a] == np[a] - 1)
}

struct ResolvedPatch {
    nodes: Vec<usize>,
    /// Trapezoid face weight of each node (includes faces outside the patch).
    weights: HashMap<usize, f64>,
    profile: Vec<f64>,
    velocity: [f64; 3],
}

fn resolve_patch(grid: &Grid, p: &PatchSpec) -> std::result::Result<ResolvedPatch, Vec<String>> {
    let dim = grid.dim();
    let mut errs = Vec::new();
    let axis = p.face.axis();
    if axis >= dim {
        return Err(vec![format!(
            "patch \"{}\": face {} does not exist in {dim}D",
            p.id,
            p.face.name()
        )]);
    }
    let tang = p.face.tangent_axes(dim);
    let nt = tang.len();
    let center = p.center.clone().unwrap_or_else(|| vec![0.5; nt]);
    if center.len() != nt {
        errs.push(format!(
            "patch \"{}\": center needs {nt} coordinate(s), got {}",
            p.id,
            center.len()
        ));
    }
    let extent = match (&p.extent, p.shape) {
        (Some(e), _) => e.clone(),
        (None, Shape::Rectangle) => vec![1.0 / 3.0; nt],
        (None, Shape::Circle) => vec![1.0 / 3.0],
    };
    let expect_ext = if p.shape == Shape::Circle { 1 } else { nt };
    if extent.len() != expect_ext {
        errs.push(format!(
            "patch \"{}\": extent needs {expect_ext} value(s), got {}",
            p.id,
            extent.len()
        ));
    }
    if p.shape == Shape::Circle && dim == 2 {
        errs.push(format!(
            "patch \"{}\": circular patches need a 2D face (3D grids only)",
            p.id
        ));
    }
    let vec_field = match p.role {
        Role::Inlet => &p.velocity,
        Role::Outlet => &p.target,
        Role::Wall => &None,
    };
    if p.role == Role::Wall && (p.velocity.is_some() || p.target.is_some()) {
        errs.push(format!(
            "patch \"{}\": walls carry zero velocity; remove velocity/target",
            p.id
        ));
    }
    if p.role == Role::Inlet && p.target.is_some() {
        errs.push(format!(
            "patch \"{}\": inlets take `velocity`, not `target`",
            p.id
        ));
    }
    if p.role == Role::Outlet && p.velocity.is_some() {
        errs.push(format!(
            "patch \"{}\": outlets take `target`, not `velocity`",
            p.id
        ));
    }
    let mut velocity = [0.0; 3];
    match vec_field {
        Some(v) if v.len() != dim => errs.push(format!(
            "patch \"{}\": velocity needs {dim} components, got {}",
            p.id,
            v.len()
        )),
        Some(v) if v.iter().any(|x| !x.is_finite()) => {
            errs.push(format!("patch \"{}\": non-finite velocity", p.id))
        }
        Some(v) => velocity[..dim].copy_from_slice(v),
        None if p.role != Role::Wall => {
            let n = p.face.normal();
            let sign = if p.role == Role::Inlet { -1.0 } else { 1.0 };
            velocity[axis] = sign * n[axis];
        }
        None => {}
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    let ext = grid.extent();
    let inside = |u: f64| (-GEOM_TOL..=1.0 + GEOM_TOL).contains(&u);
    match p.shape {
        Shape::Rectangle => {
            for k in 0..nt {
                let (lo, hi) = (center[k] - 0.5 * extent[k], center[k] + 0.5 * extent[k]);
                if extent[k].is_nan() || extent[k] <= 0.0 || !inside(lo) || !inside(hi) {
                    errs.push(format!(
                        "patch \"{}\": span [{lo}, {hi}] along axis {} lies outside face {}",
                        p.id,
                        tang[k],
                        p.face.name()
                    ));
                }
            }
        }
        Shape::Circle => {
            let short = tang.iter().map(|&a| ext[a]).fold(f64::INFINITY, f64::min);
            let r = 0.5 * extent[0] * short;
            for k in 0..nt {
                let c = center[k] * ext[tang[k]];
                if extent[0].is_nan()
                    || extent[0] <= 0.0
                    || c - r < -GEOM_TOL
                    || c + r > ext[tang[k]] + GEOM_TOL
                {
                    errs.push(format!(
                        "patch \"{}\": circle leaves face {}",
                        p.id,
                        p.face.name()
                    ));
                    break;
                }
            }
        }
    }
    if !errs.is_empty() {
        return Err(errs);
    }

    let np = grid.nodes_per_axis().to_vec();
    let h = grid.h();
    let fixed_coord = if p.face.is_upper() { np[axis] - 1 } else { 0 };
    let mut nodes = Vec::new();
    let mut profile = Vec::new();
    let mut weights = HashMap::new();
    let total: usize = tang.iter().map(|&a| np[a]).product();
    for t in 0..total {
        let mut c = [0usize; 3];
        c[axis] = fixed_coord;
        let mut rem = t;
        for &a in &tang {
            c[a] = rem % np[a];
            rem /= np[a];
        }
        let pos: Vec<f64> = tang.iter().map(|&a| c[a] as f64 * h).collect();
        let (member, s) = match p.shape {
            Shape::Rectangle => {
                let mut ok = true;
                let mut s = 1.0;
                for k in 0..nt {
                    let half = 0.5 * extent[k] * ext[tang[k]];
                    let d = pos[k] - center[k] * ext[tang[k]];
                    ok &= d.abs() <= half + GEOM_TOL * h;
                    s *= 1.0 - (d / half).powi(2);
                }
                (ok, s)
            }
            Shape::Circle => {
                let short = tang.iter().map(|&a| ext[a]).fold(f64::INFINITY, f64::min);
                let r = 0.5 * extent[0] * short;
                let d2: f64 = (0..nt)
                    .map(|k| (pos[k] - center[k] * ext[tang[k]]).powi(2))
                    .sum();
                (d2.sqrt() <= r + GEOM_TOL * h, 1.0 - d2 / (r * r))
            }
        };
        if !member {
            continue;
        }
        let node = grid.node_index(&c);
        // trapezoid weight: (h/2)^(d-1) per adjacent boundary face cell
        let mut w = 1.0;
        for &a in &tang {
            let edge = c[a] == 0 || c[a] == np[a] - 1;
            w *= if edge { 0.5 * h } else { h };
        }
        weights.insert(node, w);
        nodes.push(node);
        profile.push(match p.profile {
            Profile::Uniform => 1.0,
            Profile::Parabolic => s.max(0.0),
        });
    }
    if nodes.is_empty() {
        return Err(vec![format!(
            "patch \"{}\" contains no grid nodes at this resolution",
            p.id
        )]);
    }
    Ok(ResolvedPatch {
        nodes,
        weights,
        profile,
        velocity,
    })
}

/// Nodes of one inlet or outlet with quadrature weights for the face flux.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMeasure {
    pub id: String,
    pub face: Face,
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PatchMeasure {
    /// Outward flux `sum_i w_i v_i . n` through the patch.
    pub fn outward_flux(&self, grid: &Grid, v: &[f64]) -> f64 {
        let d = grid.dim();
        let a = self.face.axis();
        let s = if self.face.is_upper() { 1.0 } else { -1.0 };
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&n, w)| w * s * v[n * d + a])
            .sum()
    }
}

/// Everything the simulator needs: grid, material constants, the Dirichlet
/// set `D`, the outlet targets `D_O`, and the patches used for flux reports.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Grid,
    pub hyper: MaterialParams,
    pub dirichlet: DirichletSet,
    pub targets: DirichletSet,
    pub use_blocks: bool,
    pub inlets: Vec<PatchMeasure>,
    pub outlets: Vec<PatchMeasure>,
}

impl Problem {
    /// Total inflow through the inlet patches (positive when entering).
    pub fn influx(&self, v: &[f64]) -> f64 {
        -self
            .inlets
            .iter()
            .map(|p| p.outward_flux(&self.grid, v))
            .sum::<f64>()
    }

    /// Total outflow through the outlet patches.
    pub fn outflux(&self, v: &[f64]) -> f64 {
        self.outlets
            .iter()
            .map(|p| p.outward_flux(&self.grid, v))
            .sum()
    }

    /// `D ∪ D_O`
    pub fn augmented_dirichlet(&self) -> Result<DirichletSet> {
        self.dirichlet.union(&self.targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        name = "amplifier"
        [grid]
        dim = 2
        cells = [12, 12]
        [[patch]]
        id = "in"
        face = "x-"
        role = "inlet"
        [[patch]]
        id = "out"
        face = "x+"
        role = "outlet"
        target = [1.5, 0.0]
    "#;

    #[test]
    fn minimal_task_fills_defaults() {
        let t = TaskSpec::from_toml_str(MINIMAL).unwrap();
        assert_eq!(t.block_size(), 8);
        assert_eq!(t.optimizer.iterations, 300);
        let p = t.build_problem().unwrap();
        assert_eq!(p.inlets.len(), 1);
        assert_eq!(p.outlets.len(), 1);
        // 1/3 of 12 cells centred: nodes 4..=8 on the face
        assert_eq!(p.inlets[0].nodes.len(), 5);
        assert_eq!(p.targets.len(), 10);
        // walls: every other boundary node is fixed
        let boundary = (0..p.grid.n_nodes())
            .filter(|&n| is_boundary_node(&p.grid, n))
            .count();
        assert_eq!(p.dirichlet.len() / 2, boundary - 5);
        let inlet_node = p.inlets[0].nodes[0];
        assert_eq!(p.dirichlet.get(inlet_node * 2), Some(1.0));
    }

    #[test]
    fn patch_outside_face_is_rejected() {
        let text = MINIMAL.replace(
            "role = \"inlet\"",
            "role = \"inlet\"\ncenter = [0.9]\nextent = [0.4]",
        );
        let err = TaskSpec::from_toml_str(&text)
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("outside face"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_listed() {
        let text = MINIMAL.replace("id = \"out\"", "id = \"in\"");
        let err = TaskSpec::from_toml_str(&text)
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(
            err.to_string()
                .contains("duplicate patch id \"in\" (patches #0 and #1)"),
            "{err}"
        );
    }

    #[test]
    fn all_errors_are_collected() {
        let text = format!(
            "{MINIMAL}\n[[patch]]\nid = \"in\"\nface = \"x-\"\nrole = \"wall\"\n[[patch]]\nid = \"bad\"\nface = \"y+\"\nrole = \"inlet\"\nextent=[2.0]\n"
        );
        let err = TaskSpec::from_toml_str(&text)
            .unwrap()
            .validate()
            .unwrap_err();
        let Error::Config(list) = err else { panic!() };
        assert!(list.len() >= 3, "{list:?}");
    }

    #[test]
    fn outlet_over_inlet_is_rejected() {
        let text = MINIMAL.replace("face = \"x+\"", "face = \"x-\"");
        assert!(TaskSpec::from_toml_str(&text).unwrap().validate().is_err());
        let text = format!("{MINIMAL}\n[[patch]]\nid = \"side\"\nface = \"y-\"\nrole = \"inlet\"\ncenter=[0.95]\nextent=[0.1]\n");
        let text = text.replace("[[patch]]\n        id = \"out\"\n        face = \"x+\"\n        role = \"outlet\"", "[[patch]]\nid = \"out\"\nface = \"x+\"\nrole = \"outlet\"\ncenter=[0.05]\nextent=[0.1]");
        let err = TaskSpec::from_toml_str(&text)
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(
            err.to_string()
                .contains("outlet target on a Dirichlet node"),
            "{err}"
        );
    }

    #[test]
    fn toml_roundtrip() {
        let t = TaskSpec::from_toml_str(MINIMAL).unwrap();
        let back = TaskSpec::from_toml_str(&t.to_toml_string()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn face_weights_integrate_exactly() {
        let text = MINIMAL.replace("role = \"inlet\"", "role = \"inlet\"\nextent = [1.0]");
        let p = TaskSpec::from_toml_str(&text)
            .unwrap()
            .build_problem()
            .unwrap();
        let total: f64 = p.inlets[0].weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn resolution_override_scales_cells() {
        let mut t = TaskSpec::from_toml_str(MINIMAL).unwrap();
        t.grid.cells = vec![30, 15];
        assert_eq!(t.at_resolution(60).grid.cells, vec![60, 30]);
    }
}

//! Element matrices for the three energy terms, global assembly of
//! `E = v^T K v - b^T v + e0` over the free velocity DOFs, and the
//! block-divergence constraint rows.
//!
//! Local DOF order inside a cell is corner-major, component-minor:
//! `r = corner * d + component`, with corners in x-fastest order.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::warn;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::{shape_values_and_gradients, Grid, QuadratureRule};
use crate::linalg::Mat3;
use crate::material::{build_tensors, CellMaterial, DesignField, MaterialParams, MaterialTensors};

const NONE: u32 = u32::MAX;

/// Reference integrals shared by every cell of a grid (all cells are congruent).
#[derive(Debug, Clone)]
pub struct ElementOperators {
    pub dim: usize,
    pub n_corners: usize,
    pub n_local: usize,
    pub volume: f64,
    /// `stiffness[j][k][a * nc + b] = sum_q w_q W dN_a/dx_j dN_b/dx_k`
    stiffness: [[Vec<f64>; 3]; 3],
    /// `int_C div v` as a functional of the local DOFs.
    flux: Vec<f64>,
}

impl ElementOperators {
    pub fn new(grid: &Grid) -> Self {
        let dim = grid.dim();
        let nc = grid.n_corners();
        let h = grid.h();
        let volume = grid.cell_volume();
        let rule = QuadratureRule::gauss2(dim);
        let mut stiffness: [[Vec<f64>; 3]; 3] = Default::default();
        for row in stiffness.iter_mut() {
            for m in row.iter_mut() {
                *m = vec![0.0; nc * nc];
            }
        }
        for (pt, w) in rule.points.iter().zip(&rule.weights) {
            let (_, grads) = shape_values_and_gradients(dim, pt, h);
            for j in 0..dim {
                for k in 0..dim {
                    let m = &mut stiffness[j][k];
                    for a in 0..nc {
                        for b in 0..nc {
                            m[a * nc + b] += w * volume * grads[a][j] * grads[b][k];
                        }
                    }
                }
            }
        }
        ElementOperators {
            dim,
            n_corners: nc,
            n_local: nc * dim,
            volume,
            stiffness,
            flux: cell_flux_coefficients(grid),
        }
    }

    pub fn flux(&self) -> &[f64] {
        &self.flux
    }

    pub(crate) fn stiffness(&self, j: usize, k: usize) -> &[f64] {
        &self.stiffness[j][k]
    }

    /// Scalar corner-corner matrix `mu sum_jk Km_jk S^{jk}`.
    fn laplace_scalar(&self, km: &Mat3, mu: f64, out: &mut [f64]) {
        let nc = self.n_corners;
        out[..nc * nc].iter_mut().for_each(|x| *x = 0.0);
        for j in 0..self.dim {
            for k in 0..self.dim {
                let c = mu * km[j][k];
                if c == 0.0 {
                    continue;
                }
                for (o, s) in out.iter_mut().zip(&self.stiffness[j][k]) {
                    *o += c * s;
                }
            }
        }
    }

    /// Writes `L + M_div + M_fric` for one cell into `out` (row-major, `n_local^2`).
    pub fn element_matrix(&self, mat: &CellMaterial, mu: f64, out: &mut [f64]) {
        let n = self.n_local;
        let d = self.dim;
        let nc = self.n_corners;
        let mut scalar = [0.0; 64];
        self.laplace_scalar(&mat.km, mu, &mut scalar);
        let lw = mat.lambda / self.volume;
        let fw = self.volume / nc as f64;
        for r in 0..n {
            let (a, i) = (r / d, r % d);
            for s in 0..n {
                let (b, k) = (s / d, s % d);
                let mut v = lw * self.flux[r] * self.flux[s];
                if i == k {
                    v += scalar[a * nc + b];
                }
                if a == b {
                    v += fw * mat.kf[i][k];
                }
                out[r * n + s] = v;
            }
        }
    }
}

/// `mu`-weighted anisotropic Laplace term, exact for the bilinear/trilinear
/// field under the 2^d-point Gauss rule.
pub fn element_viscosity(ops: &ElementOperators, km: &Mat3, mu: f64) -> Vec<f64> {
    let n = ops.n_local;
    let d = ops.dim;
    let nc = ops.n_corners;
    let mut scalar = vec![0.0; nc * nc];
    ops.laplace_scalar(km, mu, &mut scalar);
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for s in 0..n {
            if r % d == s % d {
                out[r * n + s] = scalar[(r / d) * nc + s / d];
            }
        }
    }
    out
}

/// Net outward flux `int_C div v` as coefficients over the cell's local DOFs.
/// Face averages of the normal component times the face measure, i.e.
/// `+-(h/2)^(d-1)` per corner.
pub fn cell_flux_coefficients(grid: &Grid) -> Vec<f64> {
    let d = grid.dim();
    let nc = grid.n_corners();
    let w = (0.5 * grid.h()).powi(d as i32 - 1);
    let mut f = vec![0.0; nc * d];
    for a in 0..nc {
        for i in 0..d {
            f[a * d + i] = if (a >> i) & 1 == 1 { w } else { -w };
        }
    }
    f
}

/// Rank-one divergence penalty `(lambda / W) f f^T`.
pub fn element_divergence(ops: &ElementOperators, lambda: f64) -> Vec<f64> {
    let n = ops.n_local;
    let c = lambda / ops.volume;
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for s in 0..n {
            out[r * n + s] = c * ops.flux[r] * ops.flux[s];
        }
    }
    out
}

/// Vertex-quadrature friction `(W / 2^d) diag(Kf, ..., Kf)`.
pub fn element_friction(ops: &ElementOperators, kf: &Mat3) -> Vec<f64> {
    let n = ops.n_local;
    let d = ops.dim;
    let w = ops.volume / ops.n_corners as f64;
    let mut out = vec![0.0; n * n];
    for a in 0..ops.n_corners {
        for i in 0..d {
            for k in 0..d {
                out[(a * d + i) * n + a * d + k] = w * kf[i][k];
            }
        }
    }
    out
}

/// Prescribed nodal velocity components, keyed by global DOF.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DirichletSet {
    values: BTreeMap<usize, f64>,
}

impl DirichletSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dof: usize, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Input(format!(
                "non-finite Dirichlet value on dof {dof}"
            )));
        }
        if self.values.insert(dof, value).is_some() {
            return Err(Error::config(format!("dof {dof} assigned twice")));
        }
        Ok(())
    }

    /// Fix every component of a node.
    pub fn insert_node(&mut self, grid: &Grid, node: usize, velocity: &[f64]) -> Result<()> {
        for i in 0..grid.dim() {
            self.insert(node * grid.dim() + i, velocity[i])?;
        }
        Ok(())
    }

    pub fn get(&self, dof: usize) -> Option<f64> {
        self.values.get(&dof).copied()
    }

    pub fn contains(&self, dof: usize) -> bool {
        self.values.contains_key(&dof)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    /// `self ∪ other`; a DOF present in both is an error.
    pub fn union(&self, other: &DirichletSet) -> Result<DirichletSet> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            out.insert(k, v)?;
        }
        Ok(out)
    }
}

/// Bijection between free DOFs and global nodal DOFs.
#[derive(Debug, Clone)]
pub struct DofMap {
    free_index: Vec<u32>,
    free_dofs: Vec<usize>,
    /// Full-length vector carrying the Dirichlet values (zero on free DOFs).
    fixed_values: Vec<f64>,
}

impl DofMap {
    pub fn new(n_dofs: usize, dirichlet: &DirichletSet) -> Result<Self> {
        let mut free_index = vec![NONE; n_dofs];
        let mut fixed_values = vec![0.0; n_dofs];
        for (dof, v) in dirichlet.iter() {
            if dof >= n_dofs {
                return Err(Error::config(format!(
                    "Dirichlet dof {dof} out of range ({n_dofs} dofs)"
                )));
            }
            fixed_values[dof] = v;
        }
        let mut free_dofs = Vec::with_capacity(n_dofs - dirichlet.len());
        for dof in 0..n_dofs {
            if !dirichlet.contains(dof) {
                free_index[dof] = free_dofs.len() as u32;
                free_dofs.push(dof);
            }
        }
        Ok(DofMap {
            free_index,
            free_dofs,
            fixed_values,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.free_index.len()
    }
    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }
    pub fn free_index(&self, dof: usize) -> Option<usize> {
        match self.free_index[dof] {
            NONE => None,
            i => Some(i as usize),
        }
    }
    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }
    pub fn is_fixed(&self, dof: usize) -> bool {
        self.free_index[dof] == NONE
    }
    pub fn fixed_value(&self, dof: usize) -> f64 {
        self.fixed_values[dof]
    }

    /// Full nodal field from free values plus Dirichlet values.
    pub fn expand(&self, free: &[f64]) -> Vec<f64> {
        let mut v = self.fixed_values.clone();
        for (i, &dof) in self.free_dofs.iter().enumerate() {
            v[dof] = free[i];
        }
        v
    }

    /// Full-length vector with zeros on Dirichlet DOFs.
    pub fn expand_homogeneous(&self, free: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_dofs()];
        for (i, &dof) in self.free_dofs.iter().enumerate() {
            v[dof] = free[i];
        }
        v
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free_dofs.iter().map(|&d| full[d]).collect()
    }
}

/// Sparse rows over the free DOFs: `C v_free + c0 = 0` means zero net flux per block.
#[derive(Debug, Clone, Default)]
pub struct ConstraintMatrix {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    /// Flux contribution of the Dirichlet values, per row.
    pub c0: Vec<f64>,
    /// Block index of each retained row.
    pub blocks: Vec<usize>,
}

impl ConstraintMatrix {
    pub fn n_rows(&self) -> usize {
        self.c0.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    /// `C x` (without the offset).
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `y += C^T q`
    pub fn apply_transpose_add(&self, q: &[f64], y: &mut [f64]) {
        for (i, &qi) in q.iter().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                y[j] += a * qi;
            }
        }
    }
}

/// Block flux rows over all global DOFs, with the Dirichlet part folded into `c0`.
pub fn assemble_block_constraints(grid: &Grid, dofs: &DofMap) -> ConstraintMatrix {
    let d = grid.dim();
    let flux = cell_flux_coefficients(grid);
    let tiny = 1e-13 * (0.5 * grid.h()).powi(d as i32 - 1);
    let mut acc = vec![0.0; grid.n_dofs()];
    let mut touched: Vec<usize> = Vec::new();
    let mut local = vec![0usize; grid.n_local_dofs()];
    let bs = grid.block_size();
    let cells = grid.cells_per_axis().to_vec();

    let mut out = ConstraintMatrix {
        row_ptr: vec![0],
        ..Default::default()
    };
    for block in 0..grid.n_blocks() {
        let bc = grid.block_coords(block);
        let range = |a: usize| {
            if a < d {
                bc[a] * bs..((bc[a] + 1) * bs).min(cells[a])
            } else {
                0..1
            }
        };
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let cell = grid.cell_index(&[x, y, z]);
                    grid.cell_dofs_into(cell, &mut local);
                    for (r, &dof) in local.iter().enumerate() {
                        if acc[dof] == 0.0 {
                            touched.push(dof);
                        }
                        acc[dof] += flux[r];
                        // keep the entry tracked even if it cancels to exactly zero
                        if acc[dof] == 0.0 {
                            acc[dof] = f64::MIN_POSITIVE;
                        }
                    }
                }
            }
        }
        touched.sort_unstable();
        touched.dedup();
        let mut c0 = 0.0;
        let mut row: Vec<(usize, f64)> = Vec::new();
        for &dof in &touched {
            let coef = acc[dof];
            acc[dof] = 0.0;
            if coef.abs() <= tiny {
                continue;
            }
            match dofs.free_index(dof) {
                Some(i) => row.push((i, coef)),
                None => c0 += coef * dofs.fixed_value(dof),
            }
        }
        touched.clear();
        if row.is_empty() {
            if c0.abs() > tiny {
                warn!("block {block} is fully prescribed but carries net flux {c0:e}; constraint dropped");
            }
            continue;
        }
        row.sort_unstable_by_key(|e| e.0);
        for (i, v) in row {
            out.cols.push(i);
            out.vals.push(v);
        }
        out.row_ptr.push(out.cols.len());
        out.c0.push(c0);
        out.blocks.push(block);
    }
    drop_redundant_row(&mut out, dofs.n_free(), tiny);
    out
}

/// The rows sum to the net flux through the domain boundary. When no free
/// DOF carries boundary flux that sum vanishes and one row is redundant.
fn drop_redundant_row(c: &mut ConstraintMatrix, n_free: usize, tiny: f64) {
    if c.blocks.len() < 2 {
        return;
    }
    let mut sum = vec![0.0; n_free];
    for r in 0..c.blocks.len() {
        for k in c.row_ptr[r]..c.row_ptr[r + 1] {
            sum[c.cols[k]] += c.vals[k];
        }
    }
    if sum.iter().any(|s| s.abs() > tiny) {
        return;
    }
    let net: f64 = c.c0.iter().sum();
    if net.abs() > tiny.max(1e-10) {
        warn!("prescribed boundary flux does not balance (net {net:e}); the block constraints are inconsistent");
    }
    let last = c.blocks.len() - 1;
    c.cols.truncate(c.row_ptr[last]);
    c.vals.truncate(c.row_ptr[last]);
    c.row_ptr.pop();
    c.c0.pop();
    c.blocks.pop();
}

/// Everything about a system that does not depend on the design: DOF
/// numbering, the upper-triangular CSC pattern of `K`, the per-cell scatter
/// map and the constraint rows.
#[derive(Debug)]
pub struct SystemPattern {
    pub grid: Grid,
    pub ops: ElementOperators,
    pub dofs: DofMap,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    scatter: Vec<u32>,
    pub constraints: ConstraintMatrix,
}

impl SystemPattern {
    pub fn new(grid: &Grid, dirichlet: &DirichletSet, use_blocks: bool) -> Result<Arc<Self>> {
        let dofs = DofMap::new(grid.n_dofs(), dirichlet)?;
        let ops = ElementOperators::new(grid);
        let nl = grid.n_local_dofs();
        let n_free = dofs.n_free();

        let mut cols: Vec<Vec<u32>> = vec![Vec::new(); n_free];
        let mut local = vec![0usize; nl];
        for cell in 0..grid.n_cells() {
            grid.cell_dofs_into(cell, &mut local);
            for &r in &local {
                let Some(fr) = dofs.free_index(r) else {
                    continue;
                };
                for &s in &local {
                    if let Some(fs) = dofs.free_index(s) {
                        if fr <= fs {
                            cols[fs].push(fr as u32);
                        }
                    }
                }
            }
        }
        let mut col_ptr = Vec::with_capacity(n_free + 1);
        let mut row_idx = Vec::new();
        col_ptr.push(0);
        for c in cols.iter_mut() {
            c.sort_unstable();
            c.dedup();
            row_idx.extend(c.iter().map(|&r| r as usize));
            col_ptr.push(row_idx.len());
        }
        drop(cols);

        let mut scatter = vec![NONE; grid.n_cells() * nl * nl];
        for cell in 0..grid.n_cells() {
            grid.cell_dofs_into(cell, &mut local);
            let base = cell * nl * nl;
            for (lr, &r) in local.iter().enumerate() {
                let Some(fr) = dofs.free_index(r) else {
                    continue;
                };
                for (ls, &s) in local.iter().enumerate() {
                    let Some(fs) = dofs.free_index(s) else {
                        continue;
                    };
                    if fr > fs {
                        continue;
                    }
                    let rows = &row_idx[col_ptr[fs]..col_ptr[fs + 1]];
                    let pos = rows.binary_search(&fr).expect("pattern entry");
                    scatter[base + lr * nl + ls] = (col_ptr[fs] + pos) as u32;
                }
            }
        }

        let constraints = if use_blocks {
            assemble_block_constraints(grid, &dofs)
        } else {
            ConstraintMatrix {
                row_ptr: vec![0],
                ..Default::default()
            }
        };

        Ok(Arc::new(SystemPattern {
            grid: grid.clone(),
            ops,
            dofs,
            col_ptr,
            row_idx,
            scatter,
            constraints,
        }))
    }

    pub fn n_free(&self) -> usize {
        self.dofs.n_free()
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }
}

/// Condensed quadratic form over the free DOFs plus the block constraints.
#[derive(Debug, Clone)]
pub struct StokesSystem {
    pub pattern: Arc<SystemPattern>,
    /// Values of the upper triangle of `K` in `pattern` order.
    pub k: Vec<f64>,
    pub b: Vec<f64>,
    pub e0: f64,
}

impl StokesSystem {
    pub fn n_free(&self) -> usize {
        self.pattern.n_free()
    }

    pub fn constraints(&self) -> &ConstraintMatrix {
        &self.pattern.constraints
    }

    pub fn dofs(&self) -> &DofMap {
        &self.pattern.dofs
    }

    /// `y = K x` from the upper-triangular storage.
    pub fn k_mul(&self, x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        let mut y = vec![0.0; x.len()];
        for j in 0..p.n_free() {
            for idx in p.col_ptr[j]..p.col_ptr[j + 1] {
                let i = p.row_idx[idx];
                let a = self.k[idx];
                y[i] += a * x[j];
                if i != j {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// Condensed energy `v^T K v - b^T v` of a free-DOF vector (without `e0`).
    pub fn energy(&self, v_free: &[f64]) -> f64 {
        let kv = self.k_mul(v_free);
        v_free.iter().zip(&kv).map(|(a, b)| a * b).sum::<f64>()
            - self.b.iter().zip(v_free).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Dense copy of `K` (tests and small diagnostics only).
    pub fn k_dense(&self) -> Vec<Vec<f64>> {
        let p = &self.pattern;
        let n = p.n_free();
        let mut m = vec![vec![0.0; n]; n];
        for j in 0..n {
            for idx in p.col_ptr[j]..p.col_ptr[j + 1] {
                let i = p.row_idx[idx];
                m[i][j] = self.k[idx];
                m[j][i] = self.k[idx];
            }
        }
        m
    }
}

/// Full-field energy `v^T K_full v` as a sum of element energies.
pub fn full_energy(pattern: &SystemPattern, tensors: &MaterialTensors, mu: f64, v: &[f64]) -> f64 {
    let grid = &pattern.grid;
    let nl = grid.n_local_dofs();
    let mut ke = vec![0.0; nl * nl];
    let mut local = vec![0usize; nl];
    let mut e = 0.0;
    for cell in 0..grid.n_cells() {
        pattern
            .ops
            .element_matrix(&tensors.cells[cell], mu, &mut ke);
        grid.cell_dofs_into(cell, &mut local);
        for r in 0..nl {
            let vr = v[local[r]];
            if vr == 0.0 {
                continue;
            }
            for s in 0..nl {
                e += vr * ke[r * nl + s] * v[local[s]];
            }
        }
    }
    e
}

/// Assemble `K`, `b` and `e0` for a fixed pattern.
pub fn assemble_values(
    pattern: &Arc<SystemPattern>,
    tensors: &MaterialTensors,
    mu: f64,
    exec: Exec,
) -> Result<StokesSystem> {
    let grid = &pattern.grid;
    if tensors.cells.len() != grid.n_cells() || tensors.dim != grid.dim() {
        return Err(Error::Domain(format!(
            "material has {} cells in {}D, grid has {} cells in {}D",
            tensors.cells.len(),
            tensors.dim,
            grid.n_cells(),
            grid.dim()
        )));
    }
    let nl = grid.n_local_dofs();
    let nl2 = nl * nl;
    let mut element = vec![0.0; grid.n_cells() * nl2];
    exec.for_each_chunk(&mut element, nl2, |cell, out| {
        pattern.ops.element_matrix(&tensors.cells[cell], mu, out);
    });
    if element.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite element matrix entry".into()));
    }

    let dofs = &pattern.dofs;
    let mut k = vec![0.0; pattern.nnz()];
    let mut b = vec![0.0; dofs.n_free()];
    let mut e0 = 0.0;
    let mut local = vec![0usize; nl];
    for cell in 0..grid.n_cells() {
        grid.cell_dofs_into(cell, &mut local);
        let ke = &element[cell * nl2..(cell + 1) * nl2];
        let sc = &pattern.scatter[cell * nl2..(cell + 1) * nl2];
        for r in 0..nl {
            let fr = dofs.free_index(local[r]);
            for s in 0..nl {
                let v = ke[r * nl + s];
                match (fr, dofs.free_index(local[s])) {
                    (Some(_), Some(_)) => {
                        let pos = sc[r * nl + s];
                        if pos != NONE {
                            k[pos as usize] += v;
                        }
                    }
                    (Some(i), None) => b[i] -= 2.0 * v * dofs.fixed_value(local[s]),
                    (None, None) => {
                        e0 += v * dofs.fixed_value(local[r]) * dofs.fixed_value(local[s])
                    }
                    (None, Some(_)) => {}
                }
            }
        }
    }
    Ok(StokesSystem {
        pattern: Arc::clone(pattern),
        k,
        b,
        e0,
    })
}

/// One-shot assembly with block constraints at the grid's block size.
pub fn assemble(
    theta: &DesignField,
    hyper: &MaterialParams,
    grid: &Grid,
    dirichlet: &DirichletSet,
) -> Result<StokesSystem> {
    if theta.dim != grid.dim() {
        return Err(Error::Domain(format!(
            "{}D design on a {}D grid",
            theta.dim,
            grid.dim()
        )));
    }
    theta.validate(grid.n_cells())?;
    let tensors = build_tensors(theta, hyper, Exec::default())?;
    let pattern = SystemPattern::new(grid, dirichlet, true)?;
    assemble_values(&pattern, &tensors, hyper.mu, Exec::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{identity, scale, ZERO3};

    fn quad(m: &[f64], x: &[f64]) -> f64 {
        let n = x.len();
        let mut s = 0.0;
        for r in 0..n {
            for c in 0..n {
                s += x[r] * m[r * n + c] * x[c];
            }
        }
        s
    }

    /// Local DOF vector of a linear field `v(x) = A x` on a cell at the origin.
    fn linear_field(grid: &Grid, a: [[f64; 3]; 3]) -> Vec<f64> {
        let d = grid.dim();
        let h = grid.h();
        let mut out = vec![0.0; grid.n_local_dofs()];
        for c in 0..grid.n_corners() {
            let x: Vec<f64> = (0..d).map(|ax| ((c >> ax) & 1) as f64 * h).collect();
            for i in 0..d {
                out[c * d + i] = (0..d).map(|j| a[i][j] * x[j]).sum();
            }
        }
        out
    }

    #[test]
    fn viscosity_examples() {
        let g = Grid::new(&[1, 1], 1).unwrap();
        let ops = ElementOperators::new(&g);
        assert!(element_viscosity(&ops, &ZERO3, 1.0)
            .iter()
            .all(|&x| x == 0.0));
        let l = element_viscosity(&ops, &identity(2), 1.0);
        let constant = vec![0.3, -1.2, 0.3, -1.2, 0.3, -1.2, 0.3, -1.2];
        assert!(quad(&l, &constant).abs() < 1e-14);
        let vx = linear_field(&g, [[1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]]);
        assert!((quad(&l, &vx) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn flux_examples() {
        let g = Grid::new(&[1, 1], 1).unwrap();
        let f = cell_flux_coefficients(&g);
        let dotf = |v: &[f64]| f.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        assert_eq!(dotf(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]), 0.0);
        assert_eq!(
            dotf(&linear_field(&g, [[1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]])),
            1.0
        );
        assert_eq!(
            dotf(&linear_field(&g, [[0.0, 1.0, 0.0], [0.0; 3], [0.0; 3]])),
            0.0
        );
    }

    #[test]
    fn divergence_examples() {
        let g = Grid::new(&[1, 1], 1).unwrap();
        let ops = ElementOperators::new(&g);
        assert!(element_divergence(&ops, 0.0).iter().all(|&x| x == 0.0));
        let m = element_divergence(&ops, 2.0);
        let rot = linear_field(&g, [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0; 3]]);
        assert!(quad(&m, &rot).abs() < 1e-15);
        let vx = linear_field(&g, [[1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]]);
        assert!((quad(&m, &vx) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn friction_examples() {
        let g = Grid::new(&[1, 1], 1).unwrap();
        let ops = ElementOperators::new(&g);
        assert!(element_friction(&ops, &ZERO3).iter().all(|&x| x == 0.0));
        let m = element_friction(&ops, &identity(2));
        let ux = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!((quad(&m, &ux) - 1.0).abs() < 1e-15);
        let n = [0.6, 0.8, 0.0];
        let nn = scale(1e5, &crate::linalg::outer(&n, &n));
        let m = element_friction(&ops, &nn);
        let t = vec![0.8, -0.6, 1.6, -1.2, -0.8, 0.6, 0.4, -0.3];
        assert!(quad(&m, &t).abs() < 1e-9);
    }

    #[test]
    fn element_matrix_is_sum_of_terms() {
        let g = Grid::new(&[3, 3, 3], 2).unwrap();
        let ops = ElementOperators::new(&g);
        let h = MaterialParams::default();
        let mat = crate::material::cell_material(3, 0.7, 0.2, &[0.4, 1.3], &h);
        let mut total = vec![0.0; ops.n_local * ops.n_local];
        ops.element_matrix(&mat, 1.5, &mut total);
        let v = element_viscosity(&ops, &mat.km, 1.5);
        let dv = element_divergence(&ops, mat.lambda);
        let f = element_friction(&ops, &mat.kf);
        for i in 0..total.len() {
            let s = v[i] + dv[i] + f[i];
            assert!((total[i] - s).abs() <= 1e-12 * s.abs().max(1.0));
        }
    }

    #[test]
    fn fully_prescribed_system_keeps_energy_in_e0() {
        let g = Grid::new(&[1, 1], 1).unwrap();
        let mut dir = DirichletSet::new();
        let vals = [0.3, -0.1, 0.5, 0.2, -0.4, 0.0, 0.9, 0.1];
        for (dof, v) in vals.iter().enumerate() {
            dir.insert(dof, *v).unwrap();
        }
        let theta = DesignField::uniform(2, 1, 0.8, 0.6, 0.3);
        let hyper = MaterialParams::default();
        let t = build_tensors(&theta, &hyper, Exec::Sequential).unwrap();
        let sys = assemble(&theta, &hyper, &g, &dir).unwrap();
        assert_eq!(sys.n_free(), 0);
        let ops = ElementOperators::new(&g);
        let mut ke = vec![0.0; 64];
        ops.element_matrix(&t.cells[0], 1.0, &mut ke);
        assert!((sys.e0 - quad(&ke, &vals)).abs() < 1e-10 * sys.e0.abs());
    }

    #[test]
    fn uniform_fluid_without_dirichlet_has_no_load() {
        let g = Grid::new(&[3, 2], 2).unwrap();
        let theta = DesignField::uniform(2, 6, 1.0, 1.0, 0.0);
        let sys = assemble(&theta, &MaterialParams::default(), &g, &DirichletSet::new()).unwrap();
        assert!(sys.b.iter().all(|&x| x == 0.0));
        assert_eq!(sys.e0, 0.0);
    }

    #[test]
    fn single_fixed_node_condensation() {
        let g = Grid::new(&[1, 1], 1).unwrap();
        let mut dir = DirichletSet::new();
        dir.insert_node(&g, 0, &[0.7, -0.2]).unwrap();
        let theta = DesignField::uniform(2, 1, 0.5, 0.5, 0.25);
        let t = build_tensors(&theta, &MaterialParams::default(), Exec::Sequential).unwrap();
        let sys = assemble(&theta, &MaterialParams::default(), &g, &dir).unwrap();
        let ops = ElementOperators::new(&g);
        let mut ke = vec![0.0; 64];
        ops.element_matrix(&t.cells[0], 1.0, &mut ke);
        // free local dofs 2..8, fixed 0..2
        for (i, r) in (2..8).enumerate() {
            let expect = -2.0 * (ke[r * 8] * 0.7 + ke[r * 8 + 1] * (-0.2));
            assert!((sys.b[i] - expect).abs() < 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn duplicate_dirichlet_is_rejected() {
        let mut d = DirichletSet::new();
        d.insert(3, 1.0).unwrap();
        assert!(d.insert(3, 2.0).is_err());
        assert!(d.insert(4, f64::NAN).is_err());
    }

    fn block_row_dot(dofs: &DofMap, c: &ConstraintMatrix, row: usize, v: &[f64]) -> f64 {
        let free = dofs.restrict(v);
        c.apply(&free)[row] + c.c0[row]
    }

    #[test]
    fn block_examples() {
        // 2x1 cells in one block, v = (x, 0): net flux = 2 h^2 with h = 1/2 -> 0.5.
        let g = Grid::new(&[2, 1], 4).unwrap();
        let dofs = DofMap::new(g.n_dofs(), &DirichletSet::new()).unwrap();
        let c = assemble_block_constraints(&g, &dofs);
        assert_eq!(c.n_rows(), 1);
        let mut v = vec![0.0; g.n_dofs()];
        for n in 0..g.n_nodes() {
            v[n * 2] = g.node_position(n)[0];
        }
        let h = g.h();
        assert!((block_row_dot(&dofs, &c, 0, &v) - 2.0 * h * h).abs() < 1e-15);

        let g = Grid::new(&[2, 2], 2).unwrap();
        let dofs = DofMap::new(g.n_dofs(), &DirichletSet::new()).unwrap();
        let c = assemble_block_constraints(&g, &dofs);
        let v: Vec<f64> = (0..g.n_dofs())
            .map(|i| if i % 2 == 0 { 0.4 } else { -1.1 })
            .collect();
        assert!(block_row_dot(&dofs, &c, 0, &v).abs() < 1e-15);
    }

    #[test]
    fn interior_coefficients_cancel() {
        let g = Grid::new(&[12, 12], 4).unwrap();
        let dofs = DofMap::new(g.n_dofs(), &DirichletSet::new()).unwrap();
        let c = assemble_block_constraints(&g, &dofs);
        assert_eq!(c.n_rows(), 9);
        for row in 0..c.n_rows() {
            let bc = g.block_coords(c.blocks[row]);
            let (cols, _) = c.row(row);
            for &dof in cols {
                let nc = g.node_coords(dof / 2);
                let on_surface = (0..2).any(|a| nc[a] == bc[a] * 4 || nc[a] == bc[a] * 4 + 4);
                assert!(on_surface, "interior node {nc:?} in block {bc:?}");
            }
        }
    }

    #[test]
    fn fully_prescribed_blocks_are_dropped() {
        let g = Grid::new(&[2, 2], 1).unwrap();
        let mut dir = DirichletSet::new();
        for n in 0..g.n_nodes() {
            let c = g.node_coords(n);
            if c[0] == 0 || c[1] == 0 || c[0] == 2 || c[1] == 2 {
                dir.insert_node(&g, n, &[0.0, 0.0]).unwrap();
            }
        }
        let dofs = DofMap::new(g.n_dofs(), &dir).unwrap();
        let c = assemble_block_constraints(&g, &dofs);
        // every 1x1 block touches the centre node; with the whole boundary
        // prescribed the rows sum to zero and one of them is dropped
        assert_eq!(c.n_rows(), 3);
        let mut dir2 = DirichletSet::new();
        for n in 0..g.n_nodes() {
            dir2.insert_node(&g, n, &[0.0, 0.0]).unwrap();
        }
        let dofs = DofMap::new(g.n_dofs(), &dir2).unwrap();
        assert_eq!(assemble_block_constraints(&g, &dofs).n_rows(), 0);
    }

    #[test]
    fn closed_boundary_drops_one_redundant_row() {
        let g = Grid::new(&[8, 8], 4).unwrap();
        let mut closed = DirichletSet::new();
        let mut open = DirichletSet::new();
        for n in 0..g.n_nodes() {
            let c = g.node_coords(n);
            if c[0] == 0 || c[1] == 0 || c[0] == 8 || c[1] == 8 {
                closed.insert_node(&g, n, &[0.0, 0.0]).unwrap();
                if c[0] != 8 {
                    open.insert_node(&g, n, &[0.0, 0.0]).unwrap();
                }
            }
        }
        let rows = |d: &DirichletSet| {
            let dofs = DofMap::new(g.n_dofs(), d).unwrap();
            assemble_block_constraints(&g, &dofs).n_rows()
        };
        assert_eq!(rows(&open), 4);
        assert_eq!(rows(&closed), 3);
    }
}

//! Regular-grid topology: cell/node/block indexing, multilinear shape
//! functions and the tensor-product Gauss rule.
//!
//! All linear indices are x-fastest lexicographic. The local corner order
//! of a cell follows the same rule: corner `c` has offset bit `a` equal to
//! `(c >> a) & 1` along axis `a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub cells: Vec<usize>,
    pub block_size: usize,
}

/// Validated grid with cached strides. `h = 1 / max(cells)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    cells: [usize; 3],
    nodes: [usize; 3],
    block_size: usize,
    blocks: [usize; 3],
    h: f64,
}

impl Grid {
    pub fn new(cells: &[usize], block_size: usize) -> Result<Self> {
        let dim = cells.len();
        if !(2..=3).contains(&dim) {
            return Err(Error::Domain(format!(
                "grid dimension must be 2 or 3, got {dim}"
            )));
        }
        if cells.contains(&0) {
            return Err(Error::Domain(format!(
                "cell counts must be positive: {cells:?}"
            )));
        }
        if block_size == 0 {
            return Err(Error::Domain("block size must be positive".into()));
        }
        let mut c = [1; 3];
        let mut nodes = [1; 3];
        let mut blocks = [1; 3];
        for a in 0..dim {
            c[a] = cells[a];
            nodes[a] = cells[a] + 1;
            blocks[a] = cells[a].div_ceil(block_size);
        }
        let h = 1.0 / *cells.iter().max().unwrap() as f64;
        Ok(Grid {
            dim,
            cells: c,
            nodes,
            block_size,
            blocks,
            h,
        })
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self> {
        if spec.cells.len() != spec.dim {
            return Err(Error::Domain(format!(
                "grid dim {} does not match {} cell counts",
                spec.dim,
                spec.cells.len()
            )));
        }
        Grid::new(&spec.cells, spec.block_size)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dim: self.dim,
            cells: self.cells[..self.dim].to_vec(),
            block_size: self.block_size,
        }
    }

    /// Same extents with a different block size.
    pub fn with_block_size(&self, block_size: usize) -> Result<Self> {
        Grid::new(&self.cells[..self.dim], block_size)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn block_size(&self) -> usize {
        self.block_size
    }
    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells[..self.dim]
    }
    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes[..self.dim]
    }
    pub fn blocks_per_axis(&self) -> &[usize] {
        &self.blocks[..self.dim]
    }
    pub fn n_cells(&self) -> usize {
        self.cells.iter().product()
    }
    pub fn n_nodes(&self) -> usize {
        self.nodes.iter().product()
    }
    pub fn n_blocks(&self) -> usize {
        self.blocks.iter().product()
    }
    pub fn n_dofs(&self) -> usize {
        self.n_nodes() * self.dim
    }
    /// Corners per cell, `2^d`.
    pub fn n_corners(&self) -> usize {
        1 << self.dim
    }
    /// Velocity unknowns per cell, `2^d * d`.
    pub fn n_local_dofs(&self) -> usize {
        self.n_corners() * self.dim
    }
    /// Cell measure `W_C = h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }
    /// Number of orientation angles per cell, `d - 1`.
    pub fn n_angles(&self) -> usize {
        self.dim - 1
    }

    pub fn cell_coords(&self, cell: usize) -> [usize; 3] {
        delinearize(cell, &self.cells)
    }
    pub fn cell_index(&self, coords: &[usize]) -> usize {
        linearize(coords, &self.cells)
    }
    pub fn node_coords(&self, node: usize) -> [usize; 3] {
        delinearize(node, &self.nodes)
    }
    pub fn node_index(&self, coords: &[usize]) -> usize {
        linearize(coords, &self.nodes)
    }

    pub fn check_cell(&self, cell: usize) -> Result<()> {
        if cell >= self.n_cells() {
            return Err(Error::Domain(format!(
                "cell index {cell} out of range (grid has {} cells)",
                self.n_cells()
            )));
        }
        Ok(())
    }

    /// Node indices of a cell's corners in local corner order.
    pub fn cell_nodes(&self, cell: usize) -> Result<Vec<usize>> {
        self.check_cell(cell)?;
        let mut out = vec![0; self.n_corners()];
        self.cell_nodes_into(cell, &mut out);
        Ok(out)
    }

    /// Unchecked variant writing into `out` (length `2^d`).
    pub fn cell_nodes_into(&self, cell: usize, out: &mut [usize]) {
        let c = self.cell_coords(cell);
        for (corner, slot) in out.iter_mut().enumerate() {
            let mut n = [0; 3];
            for a in 0..3 {
                n[a] = c[a] + ((corner >> a) & 1);
            }
            *slot = self.node_index(&n);
        }
        debug_assert!(self.dim == 3 || c[2] == 0);
    }

    /// Global velocity DOFs of a cell: corner-major, component-minor.
    pub fn cell_dofs_into(&self, cell: usize, out: &mut [usize]) {
        let d = self.dim;
        let mut nodes = [0usize; 8];
        self.cell_nodes_into(cell, &mut nodes[..self.n_corners()]);
        for (k, &n) in nodes[..self.n_corners()].iter().enumerate() {
            for i in 0..d {
                out[k * d + i] = n * d + i;
            }
        }
    }

    pub fn block_coords_of(&self, cell: usize) -> [usize; 3] {
        let c = self.cell_coords(cell);
        let mut b = [0; 3];
        for a in 0..self.dim {
            b[a] = c[a] / self.block_size;
        }
        b
    }

    /// Linear block index of a cell.
    pub fn block_of(&self, cell: usize) -> usize {
        linearize(&self.block_coords_of(cell), &self.blocks)
    }

    pub fn block_coords(&self, block: usize) -> [usize; 3] {
        delinearize(block, &self.blocks)
    }

    /// Physical position of a node.
    pub fn node_position(&self, node: usize) -> [f64; 3] {
        let c = self.node_coords(node);
        [
            c[0] as f64 * self.h,
            c[1] as f64 * self.h,
            c[2] as f64 * self.h,
        ]
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 3] {
        let c = self.cell_coords(cell);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = (c[a] as f64 + 0.5) * self.h;
        }
        x
    }

    /// Physical extent of the domain along each axis.
    pub fn extent(&self) -> [f64; 3] {
        let mut e = [0.0; 3];
        for a in 0..self.dim {
            e[a] = self.cells[a] as f64 * self.h;
        }
        e
    }

    /// Cells in the `3^d` box around `cell` (including itself), clipped at the border.
    pub fn neighborhood(&self, cell: usize, out: &mut Vec<usize>) {
        out.clear();
        let c = self.cell_coords(cell);
        let lo = |a: usize| c[a].saturating_sub(1);
        let hi = |a: usize| {
            if a < self.dim {
                (c[a] + 1).min(self.cells[a] - 1)
            } else {
                0
            }
        };
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    out.push(self.cell_index(&[x, y, z]));
                }
            }
        }
    }
}

fn linearize(coords: &[usize], extent: &[usize; 3]) -> usize {
    let z = coords.get(2).copied().unwrap_or(0);
    coords[0] + extent[0] * (coords[1] + extent[1] * z)
}

fn delinearize(idx: usize, extent: &[usize; 3]) -> [usize; 3] {
    let x = idx % extent[0];
    let r = idx / extent[0];
    [x, r % extent[1], r / extent[1]]
}

/// Tensor-product Gauss-Legendre rule on the reference cell `[0,1]^d`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// Two points per axis at `(1 +- 1/sqrt 3) / 2`, equal weights summing to one.
    pub fn gauss2(dim: usize) -> Self {
        let g = 0.5 / 3f64.sqrt();
        let abscissae = [0.5 - g, 0.5 + g];
        let n = 1 << dim;
        let mut points = Vec::with_capacity(n);
        for k in 0..n {
            let mut p = [0.0; 3];
            for (a, slot) in p.iter_mut().enumerate().take(dim) {
                *slot = abscissae[(k >> a) & 1];
            }
            points.push(p);
        }
        QuadratureRule {
            points,
            weights: vec![1.0 / n as f64; n],
        }
    }
}

/// Multilinear basis values at a reference point and their physical
/// gradients (reference derivatives scaled by `1/h`).
pub fn shape_values_and_gradients(dim: usize, point: &[f64], h: f64) -> (Vec<f64>, Vec<[f64; 3]>) {
    let n = 1 << dim;
    let mut values = vec![0.0; n];
    let mut grads = vec![[0.0; 3]; n];
    for corner in 0..n {
        let mut factors = [1.0; 3];
        let mut dfactors = [0.0; 3];
        for a in 0..dim {
            if (corner >> a) & 1 == 1 {
                factors[a] = point[a];
                dfactors[a] = 1.0;
            } else {
                factors[a] = 1.0 - point[a];
                dfactors[a] = -1.0;
            }
        }
        values[corner] = factors[..dim].iter().product();
        for a in 0..dim {
            let mut g = dfactors[a] / h;
            for b in 0..dim {
                if b != a {
                    g *= factors[b];
                }
            }
            grads[corner][a] = g;
        }
    }
    (values, grads)
}

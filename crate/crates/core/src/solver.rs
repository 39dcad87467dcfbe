//! Saddle-point solve of `min v^T K v - b^T v  s.t.  C v + c0 = 0`.
//!
//! The KKT matrix `[[2K, C^T], [C, 0]]` is factored once per design with a
//! sparse `LDL^T`. A tiny negative shift on the constraint diagonal makes the
//! matrix quasi-definite so the factorization exists without pivoting; the
//! shift is removed again by iterative refinement against the exact matrix.

use std::sync::Arc;

use log::debug;

use crate::assembly::{
    assemble_values, cell_flux_coefficients, ConstraintMatrix, DirichletSet, StokesSystem,
    SystemPattern,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::Grid;
use crate::material::{build_tensors, DesignField};
use crate::sparse::{amd_order, permute_upper, CscUpper, LdlFactor, LdlSymbolic, PermutedPattern};
use crate::task::Problem;

/// Primal stationarity tolerance, relative to `1 + |b|_inf`.
pub const PRIMAL_TOL: f64 = 1e-8;
/// Absolute tolerance on `C v + c0`.
pub const CONSTRAINT_TOL: f64 = 1e-10;

const MAX_REFINE: usize = 20;
const SHIFT: f64 = 1e-9;

/// Symbolic and numeric factorization of one KKT structure.
#[derive(Debug, Clone)]
pub struct KktSolver {
    n_k: usize,
    n_c: usize,
    k_col_ptr: Vec<usize>,
    k_row_idx: Vec<usize>,
    c_row_ptr: Vec<usize>,
    c_cols: Vec<usize>,
    perm: Vec<usize>,
    permuted: PermutedPattern,
    symbolic: LdlSymbolic,
    factor: Option<LdlFactor>,
    /// `K` values the current factor was built from.
    k_vals: Vec<f64>,
    /// Constraint values after row scaling.
    c_vals: Vec<f64>,
    row_scale: Vec<f64>,
}

impl KktSolver {
    /// Symbolic analysis of `K` (upper CSC pattern over `n_k` unknowns) and
    /// the constraint pattern.
    pub fn analyze(
        n_k: usize,
        k_col_ptr: &[usize],
        k_row_idx: &[usize],
        c_row_ptr: &[usize],
        c_cols: &[usize],
    ) -> Result<Self> {
        let n_c = c_row_ptr.len() - 1;
        let n = n_k + n_c;
        // original upper pattern: K columns, then one column per constraint
        // holding its coefficients followed by the diagonal
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::with_capacity(k_row_idx.len() + c_cols.len() + n_c);
        col_ptr.extend_from_slice(k_col_ptr);
        row_idx.extend_from_slice(k_row_idx);
        for r in 0..n_c {
            for &j in &c_cols[c_row_ptr[r]..c_row_ptr[r + 1]] {
                if j >= n_k {
                    return Err(Error::Domain(format!("constraint column {j} out of range")));
                }
                row_idx.push(j);
            }
            row_idx.push(n_k + r);
            col_ptr.push(row_idx.len());
        }

        let amd_perm = amd_order(n, &col_ptr, &row_idx)?;
        let perm = constraints_after_neighbors(&amd_perm, n_k, c_row_ptr, c_cols);
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        let permuted = permute_upper(n, &col_ptr, &row_idx, &pinv);
        let symbolic = LdlSymbolic::analyze(&permuted.col_ptr, &permuted.row_idx)?;
        debug!(
            "KKT analysis: {n_k} velocity unknowns, {n_c} constraints, nnz(A) = {}, nnz(L) = {}",
            row_idx.len(),
            symbolic.l_nnz()
        );
        Ok(KktSolver {
            n_k,
            n_c,
            k_col_ptr: k_col_ptr.to_vec(),
            k_row_idx: k_row_idx.to_vec(),
            c_row_ptr: c_row_ptr.to_vec(),
            c_cols: c_cols.to_vec(),
            perm,
            permuted,
            symbolic,
            factor: None,
            k_vals: Vec::new(),
            c_vals: Vec::new(),
            row_scale: Vec::new(),
        })
    }

    pub fn n_velocity(&self) -> usize {
        self.n_k
    }

    pub fn n_constraints(&self) -> usize {
        self.n_c
    }

    /// Numeric factorization for new values on the analysed pattern.
    pub fn factor(&mut self, k_vals: &[f64], c_vals: &[f64]) -> Result<()> {
        if k_vals.len() != self.k_row_idx.len() || c_vals.len() != self.c_cols.len() {
            return Err(Error::Domain(
                "value arrays do not match the analysed pattern".into(),
            ));
        }
        if k_vals.iter().chain(c_vals).any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite entry in KKT matrix".into()));
        }
        self.factor = None;
        let n_c = self.n_c;
        let mut row_scale = vec![1.0; n_c];
        let mut scaled = c_vals.to_vec();
        for r in 0..n_c {
            let span = self.c_row_ptr[r]..self.c_row_ptr[r + 1];
            let m = c_vals[span.clone()]
                .iter()
                .fold(0.0f64, |a, &x| a.max(x.abs()));
            if m == 0.0 {
                return Err(Error::Solver(format!(
                    "constraint row {r} is identically zero"
                )));
            }
            row_scale[r] = 1.0 / m;
            for x in &mut scaled[span] {
                *x /= m;
            }
        }
        let mut max_diag = 0.0f64;
        for j in 0..self.n_k {
            let last = self.k_col_ptr[j + 1];
            if last > self.k_col_ptr[j] && self.k_row_idx[last - 1] == j {
                max_diag = max_diag.max(2.0 * k_vals[last - 1]);
            }
        }
        let shift = SHIFT / max_diag.max(1.0);

        let nnz = self.permuted.row_idx.len();
        let mut values = vec![0.0; nnz];
        let nk = k_vals.len();
        for (p, &v) in k_vals.iter().enumerate() {
            values[self.permuted.map[p]] = 2.0 * v;
        }
        let mut orig = nk;
        for r in 0..n_c {
            for t in self.c_row_ptr[r]..self.c_row_ptr[r + 1] {
                values[self.permuted.map[orig]] = scaled[t];
                orig += 1;
            }
            values[self.permuted.map[orig]] = -shift;
            orig += 1;
        }
        let a = CscUpper {
            n: self.n_k + n_c,
            col_ptr: self.permuted.col_ptr.clone(),
            row_idx: self.permuted.row_idx.clone(),
            values,
        };
        let f = LdlFactor::factor(&self.symbolic, &a)?;
        let (pos, neg) = f.inertia();
        if pos != self.n_k || neg != n_c {
            return Err(Error::Solver(format!(
                "KKT matrix has inertia ({pos}, {neg}), expected ({}, {n_c}); \
                 the velocity block is singular or the constraints are rank deficient",
                self.n_k
            )));
        }
        // a constraint pivot no larger than the shift means its Schur complement vanished
        for (new, &old) in self.perm.iter().enumerate() {
            let d = f.diag()[new];
            if old >= self.n_k && d.abs() < 1e3 * shift {
                return Err(Error::Solver(format!(
                    "block constraint {} is linearly dependent on the others",
                    old - self.n_k
                )));
            }
            if old < self.n_k && d < 1e-14 * max_diag {
                return Err(Error::Solver(format!(
                    "velocity block is singular near unknown {old}"
                )));
            }
        }
        self.factor = Some(f);
        self.k_vals = k_vals.to_vec();
        self.c_vals = scaled;
        self.row_scale = row_scale;
        Ok(())
    }

    pub fn is_factored(&self) -> bool {
        self.factor.is_some()
    }

    /// True when the current factor was built from exactly these `K` values.
    pub fn matches(&self, k_vals: &[f64]) -> bool {
        self.factor.is_some() && self.k_vals == k_vals
    }

    fn apply_exact(&self, x: &[f64], q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut y = vec![0.0; self.n_k];
        for j in 0..self.n_k {
            for p in self.k_col_ptr[j]..self.k_col_ptr[j + 1] {
                let i = self.k_row_idx[p];
                let a = 2.0 * self.k_vals[p];
                y[i] += a * x[j];
                if i != j {
                    y[j] += a * x[i];
                }
            }
        }
        let mut z = vec![0.0; self.n_c];
        for r in 0..self.n_c {
            for t in self.c_row_ptr[r]..self.c_row_ptr[r + 1] {
                let j = self.c_cols[t];
                let c = self.c_vals[t];
                y[j] += c * q[r];
                z[r] += c * x[j];
            }
        }
        (y, z)
    }

    fn raw_solve(&self, f: &LdlFactor, top: &[f64], bottom: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_k + self.n_c;
        let mut y = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            y[new] = if old < self.n_k {
                top[old]
            } else {
                bottom[old - self.n_k]
            };
        }
        f.solve_in_place(&mut y);
        let mut x = vec![0.0; self.n_k];
        let mut q = vec![0.0; self.n_c];
        for (new, &old) in self.perm.iter().enumerate() {
            if old < self.n_k {
                x[old] = y[new];
            } else {
                q[old - self.n_k] = y[new];
            }
        }
        (x, q)
    }

    /// Solve `[[2K, C^T], [C, 0]] [x; q] = [f; g]` with `g` in unscaled
    /// constraint units; returns unscaled multipliers.
    pub fn solve(&self, f_rhs: &[f64], g_rhs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let fac = self
            .factor
            .as_ref()
            .ok_or_else(|| Error::Solver("KKT system has not been factored".into()))?;
        if f_rhs.len() != self.n_k || g_rhs.len() != self.n_c {
            return Err(Error::Domain("right-hand side length mismatch".into()));
        }
        let g: Vec<f64> = g_rhs
            .iter()
            .zip(&self.row_scale)
            .map(|(a, s)| a * s)
            .collect();
        let f_norm = inf_norm(f_rhs);
        let g_norm = inf_norm(&g);
        let (mut x, mut q) = self.raw_solve(fac, f_rhs, &g);
        let mut converged = false;
        for it in 0..MAX_REFINE {
            let (ax, aq) = self.apply_exact(&x, &q);
            let rf: Vec<f64> = f_rhs.iter().zip(&ax).map(|(a, b)| a - b).collect();
            let rg: Vec<f64> = g.iter().zip(&aq).map(|(a, b)| a - b).collect();
            let (ef, eg) = (inf_norm(&rf), inf_norm(&rg));
            if ef <= 1e-13 * (1.0 + f_norm) && eg <= 1e-14 * (1.0 + g_norm) {
                converged = true;
                debug!("KKT refinement converged after {it} steps");
                break;
            }
            let (dx, dq) = self.raw_solve(fac, &rf, &rg);
            x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            q.iter_mut().zip(&dq).for_each(|(a, b)| *a += b);
        }
        if !converged {
            let (ax, aq) = self.apply_exact(&x, &q);
            let ef = f_rhs
                .iter()
                .zip(&ax)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let eg = g
                .iter()
                .zip(&aq)
                .zip(&self.row_scale)
                .fold(0.0f64, |m, ((a, b), s)| m.max(((a - b) / s).abs()));
            if !(ef <= PRIMAL_TOL * (1.0 + f_norm) && eg <= CONSTRAINT_TOL) {
                return Err(Error::Solver(format!(
                    "iterative refinement stalled (primal residual {ef:e}, constraint residual {eg:e})"
                )));
            }
        }
        for (qr, s) in q.iter_mut().zip(&self.row_scale) {
            *qr *= s;
        }
        Ok((x, q))
    }
}

/// Keep the fill-reducing order but delay each constraint until all velocity
/// unknowns it couples to have been eliminated, so its pivot is a Schur
/// complement rather than the tiny diagonal shift.
fn constraints_after_neighbors(
    perm: &[usize],
    n_k: usize,
    c_row_ptr: &[usize],
    c_cols: &[usize],
) -> Vec<usize> {
    let n = perm.len();
    let mut pos = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        pos[old] = new;
    }
    let mut keys: Vec<(usize, usize, usize)> = Vec::with_capacity(n);
    for (new, &old) in perm.iter().enumerate() {
        if old < n_k {
            keys.push((new, 0, old));
        } else {
            let r = old - n_k;
            let last = c_cols[c_row_ptr[r]..c_row_ptr[r + 1]]
                .iter()
                .map(|&j| pos[j])
                .max()
                .unwrap_or(0);
            keys.push((last.max(new), 1, old));
        }
    }
    keys.sort_unstable();
    keys.into_iter().map(|k| k.2).collect()
}

fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Residual norms of a computed saddle point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Residuals {
    /// `|2K v + C^T q - b|_inf`
    pub primal: f64,
    /// `|C v + c0|_inf`
    pub constraint: f64,
    pub primal_tol: f64,
    pub constraint_tol: f64,
}

impl Residuals {
    pub fn ok(&self) -> bool {
        self.primal <= self.primal_tol && self.constraint <= self.constraint_tol
    }
}

/// Solved velocity field.
#[derive(Debug, Clone)]
pub struct FlowState {
    /// Full nodal field, Dirichlet values included.
    pub v: Vec<f64>,
    /// Free-DOF part of `v`.
    pub v_free: Vec<f64>,
    /// One multiplier per retained block row.
    pub multipliers: Vec<f64>,
    pub residuals: Residuals,
}

/// Owns one factorization for a fixed system pattern. Forward and adjoint
/// solves against the same design go through the same context.
#[derive(Debug)]
pub struct SolverContext {
    pattern: Arc<SystemPattern>,
    kkt: KktSolver,
}

impl SolverContext {
    pub fn new(pattern: Arc<SystemPattern>) -> Result<Self> {
        let c = &pattern.constraints;
        let kkt = KktSolver::analyze(
            pattern.n_free(),
            &pattern.col_ptr,
            &pattern.row_idx,
            &c.row_ptr,
            &c.cols,
        )?;
        Ok(SolverContext { pattern, kkt })
    }

    pub fn pattern(&self) -> &Arc<SystemPattern> {
        &self.pattern
    }

    fn check_system(&self, system: &StokesSystem) -> Result<()> {
        if !Arc::ptr_eq(&self.pattern, &system.pattern) {
            return Err(Error::Domain(
                "system was assembled on a different pattern".into(),
            ));
        }
        Ok(())
    }

    /// Numeric factorization plus forward solve.
    pub fn solve(&mut self, system: &StokesSystem) -> Result<FlowState> {
        self.check_system(system)?;
        let c = system.constraints();
        if system.n_free() == 0 {
            let v = system.dofs().expand(&[]);
            return Ok(FlowState {
                v,
                v_free: Vec::new(),
                multipliers: Vec::new(),
                residuals: check_residuals_raw(system, &[], &[]),
            });
        }
        if system.b.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite right-hand side".into()));
        }
        self.kkt.factor(&system.k, &c.vals)?;
        let g: Vec<f64> = c.c0.iter().map(|x| -x).collect();
        let (v_free, multipliers) = self.kkt.solve(&system.b, &g)?;
        let residuals = check_residuals_raw(system, &v_free, &multipliers);
        if !residuals.ok() {
            return Err(Error::Solver(format!(
                "KKT residuals above tolerance: primal {:e} (tol {:e}), constraint {:e} (tol {:e})",
                residuals.primal,
                residuals.primal_tol,
                residuals.constraint,
                residuals.constraint_tol
            )));
        }
        Ok(FlowState {
            v: system.dofs().expand(&v_free),
            v_free,
            multipliers,
            residuals,
        })
    }

    /// Solve `[[2K, C^T], [C, 0]] [w; r] = [rhs; 0]` with the factorization of
    /// the most recent forward solve of `system`.
    pub fn adjoint(&self, system: &StokesSystem, rhs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_system(system)?;
        if system.n_free() == 0 {
            return Ok((Vec::new(), Vec::new()));
        }
        if !self.kkt.matches(&system.k) {
            return Err(Error::Domain(
                "adjoint requested for a system that is not the factored one".into(),
            ));
        }
        self.kkt.solve(rhs, &vec![0.0; self.kkt.n_constraints()])
    }
}

/// One-shot forward solve.
pub fn solve_kkt(system: &StokesSystem) -> Result<FlowState> {
    SolverContext::new(Arc::clone(&system.pattern))?.solve(system)
}

fn check_residuals_raw(system: &StokesSystem, v_free: &[f64], q: &[f64]) -> Residuals {
    let c = system.constraints();
    let mut r = system.k_mul(v_free);
    r.iter_mut().for_each(|x| *x *= 2.0);
    c.apply_transpose_add(q, &mut r);
    let primal = r
        .iter()
        .zip(&system.b)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let constraint = c
        .apply(v_free)
        .iter()
        .zip(&c.c0)
        .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    Residuals {
        primal,
        constraint,
        primal_tol: PRIMAL_TOL * (1.0 + inf_norm(&system.b)),
        constraint_tol: CONSTRAINT_TOL,
    }
}

/// Recompute both KKT residual rows for `state`.
pub fn check_residuals(state: &FlowState, system: &StokesSystem) -> Residuals {
    check_residuals_raw(system, &state.v_free, &state.multipliers)
}

/// `v = F(theta)` for a problem, optionally with extra Dirichlet conditions
/// (the outlet targets for the compliance solve).
pub fn simulate(
    theta: &DesignField,
    problem: &Problem,
    extra_dirichlet: Option<&DirichletSet>,
) -> Result<FlowState> {
    let grid = &problem.grid;
    if theta.dim != grid.dim() {
        return Err(Error::Domain(format!(
            "{}D design on a {}D grid",
            theta.dim,
            grid.dim()
        )));
    }
    theta.validate(grid.n_cells())?;
    let dirichlet = match extra_dirichlet {
        Some(extra) => problem.dirichlet.union(extra)?,
        None => problem.dirichlet.clone(),
    };
    let tensors = build_tensors(theta, &problem.hyper, Exec::default())?;
    let pattern = SystemPattern::new(grid, &dirichlet, problem.use_blocks)?;
    let system = assemble_values(&pattern, &tensors, problem.hyper.mu, Exec::default())?;
    SolverContext::new(pattern)?.solve(&system)
}

/// Net outward flux of the full field `v` through every block, in block order.
pub fn block_net_flux(grid: &Grid, v: &[f64]) -> Vec<f64> {
    let f = cell_flux_coefficients(grid);
    let mut local = vec![0usize; grid.n_local_dofs()];
    let mut out = vec![0.0; grid.n_blocks()];
    for cell in 0..grid.n_cells() {
        grid.cell_dofs_into(cell, &mut local);
        let flux: f64 = local.iter().zip(&f).map(|(&d, c)| c * v[d]).sum();
        out[grid.block_of(cell)] += flux;
    }
    out
}

/// `C` restricted to the retained rows, evaluated on a full field.
pub fn constraint_values(c: &ConstraintMatrix, v_free: &[f64]) -> Vec<f64> {
    c.apply(v_free)
        .iter()
        .zip(&c.c0)
        .map(|(a, b)| a + b)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_solver(n: usize, c_rows: &[&[(usize, f64)]]) -> (KktSolver, Vec<f64>) {
        let col_ptr: Vec<usize> = (0..=n).collect();
        let row_idx: Vec<usize> = (0..n).collect();
        let mut rp = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for row in c_rows {
            for &(j, v) in row.iter() {
                cols.push(j);
                vals.push(v);
            }
            rp.push(cols.len());
        }
        let mut s = KktSolver::analyze(n, &col_ptr, &row_idx, &rp, &cols).unwrap();
        s.factor(&vec![1.0; n], &vals).unwrap();
        (s, vals)
    }

    #[test]
    fn unconstrained_identity() {
        let (s, _) = identity_solver(2, &[]);
        let (v, q) = s.solve(&[2.0, 4.0], &[]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 2.0).abs() < 1e-14);
        assert!(q.is_empty());
    }

    #[test]
    fn constrained_identity() {
        let (s, _) = identity_solver(2, &[&[(0, 1.0), (1, 1.0)]]);
        let (v, q) = s.solve(&[2.0, 4.0], &[0.0]).unwrap();
        assert!((v[0] + 0.5).abs() < 1e-13, "{v:?}");
        assert!((v[1] - 0.5).abs() < 1e-13);
        assert!((q[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_examples() {
        let (s, _) = identity_solver(2, &[]);
        assert_eq!(s.solve(&[0.0, 0.0], &[]).unwrap().0, vec![0.0, 0.0]);
        let (w, _) = s.solve(&[2.0, 0.0], &[]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-14 && w[1].abs() < 1e-14);
        let (s, _) = identity_solver(2, &[&[(0, 1.0), (1, 1.0)]]);
        let (w, _) = s.solve(&[2.0, 0.0], &[0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-13 && (w[1] + 0.5).abs() < 1e-13);
    }

    #[test]
    fn zero_load_gives_zero_field() {
        let (s, _) = identity_solver(3, &[&[(0, 1.0), (2, -2.0)]]);
        let (v, q) = s.solve(&[0.0; 3], &[0.0]).unwrap();
        assert!(v.iter().chain(&q).all(|&x| x == 0.0));
    }

    #[test]
    fn dependent_constraints_are_rejected() {
        let col_ptr: Vec<usize> = (0..=2).collect();
        let row_idx: Vec<usize> = (0..2).collect();
        let mut s = KktSolver::analyze(2, &col_ptr, &row_idx, &[0, 2, 4], &[0, 1, 0, 1]).unwrap();
        assert!(matches!(
            s.factor(&[1.0, 1.0], &[1.0, 1.0, 1.0, 1.0]),
            Err(Error::Solver(_))
        ));
    }

    #[test]
    fn unfactored_solve_fails() {
        let s = KktSolver::analyze(1, &[0, 1], &[0], &[0], &[]).unwrap();
        assert!(s.solve(&[1.0], &[]).is_err());
    }
}

//! Per-cell design variables and the anisotropic material they induce.
//!
//! With `s = (1 - eps) * rho`:
//!
//! ```text
//! Km     = I - s n n^T
//! Kf     = kf(rho) I + (kf(eps rho) - kf(rho)) n n^T
//! lambda = lambda_min + (1 - s)^p lambda_max
//! kf(r)  = kf_max + (kf_min - kf_max) r (1 + q) / (r + q)
//! ```
//!
//! Fluid (`eps = rho = 1`) gives `Km = I, Kf ~ 0`; solid (`rho = 0`) gives
//! `Kf = kf_max I`; a free-slip wall (`eps = 0, rho = 1`) gives
//! `Km = I - n n^T, Kf ~ kf_max n n^T, lambda = lambda_min`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{self, Mat3, Vec3, ZERO3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    pub kf_min: f64,
    pub kf_max: f64,
    /// Sharpness of the `kf` interpolation.
    pub q: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Power index of the `lambda` interpolation.
    pub p: f64,
    /// Dynamic viscosity.
    pub mu: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        MaterialParams {
            kf_min: 2.5e-4,
            kf_max: 1e5,
            q: 0.1,
            lambda_min: 0.1,
            lambda_max: 1e3,
            p: 12.0,
            mu: 1.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let all = [
            self.kf_min,
            self.kf_max,
            self.q,
            self.lambda_min,
            self.lambda_max,
            self.p,
            self.mu,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            errs.push("material parameters must be finite".to_string());
        }
        if self.kf_min < 0.0 || self.kf_min >= self.kf_max {
            errs.push(format!(
                "need 0 <= kf_min < kf_max, got {} / {}",
                self.kf_min, self.kf_max
            ));
        }
        for (name, v) in [
            ("q", self.q),
            ("lambda_min", self.lambda_min),
            ("lambda_max", self.lambda_max),
            ("p", self.p),
            ("mu", self.mu),
        ] {
            if v <= 0.0 {
                errs.push(format!("{name} must be positive, got {v}"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Impedance interpolation and its derivative in `rho`.
    pub fn kf_interp(&self, rho: f64) -> (f64, f64) {
        let span = self.kf_min - self.kf_max;
        let denom = rho + self.q;
        // kf_max (1 - t) + kf_min t with 1 - t = q (1 - rho) / (rho + q), free of cancellation at rho = 1
        let value =
            (self.kf_max * self.q * (1.0 - rho) + self.kf_min * rho * (1.0 + self.q)) / denom;
        let deriv = span * (1.0 + self.q) * self.q / (denom * denom);
        (value, deriv)
    }
}

/// Decision variables `theta = (rho, eps, alpha)`, one entry per cell
/// (`d - 1` angles per cell, stored cell-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignField {
    pub dim: usize,
    pub rho: Vec<f64>,
    pub eps: Vec<f64>,
    pub alpha: Vec<f64>,
    pub eps_upper: Vec<f64>,
}

impl DesignField {
    pub fn uniform(dim: usize, n_cells: usize, rho: f64, eps: f64, alpha: f64) -> Self {
        DesignField {
            dim,
            rho: vec![rho; n_cells],
            eps: vec![eps; n_cells],
            alpha: vec![alpha; n_cells * (dim - 1)],
            eps_upper: vec![1.0; n_cells],
        }
    }

    pub fn n_cells(&self) -> usize {
        self.rho.len()
    }

    pub fn n_angles(&self) -> usize {
        self.dim - 1
    }

    pub fn angles(&self, cell: usize) -> &[f64] {
        let k = self.n_angles();
        &self.alpha[cell * k..(cell + 1) * k]
    }

    /// Checks sizes, bounds and finiteness; reports every violation.
    pub fn validate(&self, n_cells: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(2..=3).contains(&self.dim) {
            errs.push(format!("design dimension must be 2 or 3, got {}", self.dim));
            return Err(Error::Domain(errs.join("; ")));
        }
        let k = self.n_angles();
        if self.rho.len() != n_cells || self.eps.len() != n_cells || self.eps_upper.len() != n_cells
        {
            errs.push(format!("design arrays must have {n_cells} entries"));
        }
        if self.alpha.len() != n_cells * k {
            errs.push(format!("alpha must have {} entries", n_cells * k));
        }
        if !errs.is_empty() {
            return Err(Error::Domain(errs.join("; ")));
        }
        let mut bad = 0;
        let mut first = None;
        for c in 0..n_cells {
            let (r, e, u) = (self.rho[c], self.eps[c], self.eps_upper[c]);
            let ok = r.is_finite()
                && e.is_finite()
                && (0.0..=1.0).contains(&r)
                && (0.0..=1.0).contains(&u)
                && e >= 0.0
                && e <= u
                && self.angles(c).iter().all(|a| a.is_finite());
            if !ok {
                bad += 1;
                first.get_or_insert(c);
            }
        }
        if bad > 0 {
            let c = first.unwrap();
            return Err(Error::Domain(format!(
                "{bad} cells violate 0 <= rho <= 1, 0 <= eps <= eps_upper <= 1 (first: cell {c}, rho={}, eps={}, eps_upper={})",
                self.rho[c], self.eps[c], self.eps_upper[c]
            )));
        }
        Ok(())
    }
}

/// Unit normal from orientation angles: `(cos a, sin a)` in 2D,
/// `(sin phi cos psi, sin phi sin psi, cos phi)` in 3D. The second value
/// holds `dn/dangle` for each angle.
pub fn normal_from_alpha(alpha: &[f64], dim: usize) -> (Vec3, [Vec3; 2]) {
    match dim {
        2 => {
            let (s, c) = alpha[0].sin_cos();
            ([c, s, 0.0], [[-s, c, 0.0], [0.0; 3]])
        }
        3 => {
            let (sp, cp) = alpha[0].sin_cos();
            let (ss, cs) = alpha[1].sin_cos();
            (
                [sp * cs, sp * ss, cp],
                [[cp * cs, cp * ss, -sp], [-sp * ss, sp * cs, 0.0]],
            )
        }
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Material of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMaterial {
    pub km: Mat3,
    pub kf: Mat3,
    pub lambda: f64,
    pub normal: Vec3,
}

impl CellMaterial {
    /// Isotropic fluid with the given incompressibility and friction floor.
    pub fn isotropic(dim: usize, kf: f64, lambda: f64) -> Self {
        CellMaterial {
            km: linalg::identity(dim),
            kf: linalg::scale(kf, &linalg::identity(dim)),
            lambda,
            normal: [1.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialTensors {
    pub dim: usize,
    pub cells: Vec<CellMaterial>,
}

/// Partial derivatives of one cell's material with respect to its design
/// variables, ordered `rho, eps, alpha_0 [, alpha_1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPartials {
    pub n_vars: usize,
    pub dkm: [Mat3; 4],
    pub dkf: [Mat3; 4],
    pub dlambda: [f64; 4],
}

pub const RHO: usize = 0;
pub const EPS: usize = 1;
pub const ALPHA: usize = 2;

pub fn cell_material(
    dim: usize,
    rho: f64,
    eps: f64,
    alpha: &[f64],
    hyper: &MaterialParams,
) -> CellMaterial {
    let (n, _) = normal_from_alpha(alpha, dim);
    let nn = linalg::outer(&n, &n);
    let s = (1.0 - eps) * rho;
    let id = linalg::identity(dim);
    let km = linalg::lincomb(1.0, &id, -s, &nn);
    let (kf_rho, _) = hyper.kf_interp(rho);
    let (kf_er, _) = hyper.kf_interp(eps * rho);
    let kf = linalg::lincomb(kf_rho, &id, kf_er - kf_rho, &nn);
    let lambda = hyper.lambda_min + (1.0 - s).powf(hyper.p) * hyper.lambda_max;
    CellMaterial {
        km,
        kf,
        lambda,
        normal: n,
    }
}

pub fn cell_partials(
    dim: usize,
    rho: f64,
    eps: f64,
    alpha: &[f64],
    hyper: &MaterialParams,
) -> CellPartials {
    let (n, dn) = normal_from_alpha(alpha, dim);
    let nn = linalg::outer(&n, &n);
    let id = linalg::identity(dim);
    let s = (1.0 - eps) * rho;
    let (kf_rho, dkf_rho) = hyper.kf_interp(rho);
    let (kf_er, dkf_er) = hyper.kf_interp(eps * rho);

    let mut out = CellPartials {
        n_vars: dim + 1,
        dkm: [ZERO3; 4],
        dkf: [ZERO3; 4],
        dlambda: [0.0; 4],
    };
    out.dkm[RHO] = linalg::scale(-(1.0 - eps), &nn);
    out.dkm[EPS] = linalg::scale(rho, &nn);
    out.dkf[RHO] = linalg::lincomb(dkf_rho, &id, eps * dkf_er - dkf_rho, &nn);
    out.dkf[EPS] = linalg::scale(rho * dkf_er, &nn);

    let g = 1.0 - s;
    let dl_ds = if hyper.p == 1.0 {
        -hyper.lambda_max
    } else {
        -hyper.p * g.powf(hyper.p - 1.0) * hyper.lambda_max
    };
    out.dlambda[RHO] = dl_ds * (1.0 - eps);
    out.dlambda[EPS] = dl_ds * (-rho);

    for k in 0..dim - 1 {
        let dnn = linalg::sym_outer(&dn[k], &n);
        out.dkm[ALPHA + k] = linalg::scale(-s, &dnn);
        out.dkf[ALPHA + k] = linalg::scale(kf_er - kf_rho, &dnn);
    }
    out
}

/// Evaluate every cell's material tensors.
pub fn build_tensors(
    theta: &DesignField,
    hyper: &MaterialParams,
    exec: Exec,
) -> Result<MaterialTensors> {
    theta.validate(theta.n_cells())?;
    Ok(build_tensors_unchecked(theta, hyper, exec))
}

pub(crate) fn build_tensors_unchecked(
    theta: &DesignField,
    hyper: &MaterialParams,
    exec: Exec,
) -> MaterialTensors {
    let dim = theta.dim;
    let cells = exec.map(theta.n_cells(), |c| {
        cell_material(dim, theta.rho[c], theta.eps[c], theta.angles(c), hyper)
    });
    MaterialTensors { dim, cells }
}

/// Analytic partials of one cell, `tensor_partials(theta, hyper, cell)`.
pub fn tensor_partials(
    theta: &DesignField,
    hyper: &MaterialParams,
    cell: usize,
) -> Result<CellPartials> {
    if cell >= theta.n_cells() {
        return Err(Error::Domain(format!("cell {cell} out of range")));
    }
    Ok(cell_partials(
        theta.dim,
        theta.rho[cell],
        theta.eps[cell],
        theta.angles(cell),
        hyper,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigenvalues;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normal_axis_cases() {
        let (n, _) = normal_from_alpha(&[0.0], 2);
        assert_eq!(n, [1.0, 0.0, 0.0]);
        let (n, _) = normal_from_alpha(&[PI / 2.0], 2);
        assert!(close(n[0], 0.0, 1e-16) && close(n[1], 1.0, 1e-16));
        let (n, _) = normal_from_alpha(&[PI / 2.0, 0.0], 3);
        assert!(close(n[0], 1.0, 1e-16) && close(n[1], 0.0, 1e-16) && close(n[2], 0.0, 1e-16));
    }

    #[test]
    fn kf_endpoints_and_midpoint() {
        let h = MaterialParams::default();
        assert_eq!(h.kf_interp(0.0).0, 1e5);
        assert!(close(h.kf_interp(1.0).0, h.kf_min, 1e-9));
        let h0 = MaterialParams { kf_min: 0.0, ..h };
        // 1e5 * (1 - 0.1 * 1.1 / 0.2)
        assert!(close(h0.kf_interp(0.1).0, 4.5e4, 1e-8));
    }

    #[test]
    fn kf_is_monotone_decreasing() {
        let h = MaterialParams::default();
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let (v, d) = h.kf_interp(i as f64 / 100.0);
            assert!(v < prev);
            assert!(d < 0.0);
            prev = v;
        }
    }

    #[test]
    fn fluid_cell() {
        let h = MaterialParams::default();
        let m = cell_material(2, 1.0, 1.0, &[0.7], &h);
        assert_eq!(m.km, linalg::identity(2));
        assert!(close(m.kf[0][0], h.kf_min, 1e-12) && close(m.kf[1][1], h.kf_min, 1e-12));
        assert!(close(m.kf[0][1], 0.0, 1e-12));
        assert_eq!(m.lambda, h.lambda_min + h.lambda_max);
    }

    #[test]
    fn free_slip_cell() {
        let h = MaterialParams::default();
        let m = cell_material(2, 1.0, 0.0, &[0.0], &h);
        assert_eq!(&m.km[0][..2], &[0.0, 0.0]);
        assert_eq!(&m.km[1][..2], &[0.0, 1.0]);
        assert!(close(m.kf[0][0], h.kf_max, 1e-9));
        assert!(close(m.kf[1][1], h.kf_min, 1e-12));
        assert_eq!(m.lambda, h.lambda_min);
    }

    #[test]
    fn solid_cell() {
        let h = MaterialParams::default();
        let m = cell_material(3, 0.0, 1.0, &[0.3, 1.1], &h);
        assert_eq!(m.km, linalg::identity(3));
        for i in 0..3 {
            assert!(close(m.kf[i][i], h.kf_max, 1e-3 * h.kf_max));
        }
        assert_eq!(m.lambda, h.lambda_min + h.lambda_max);
    }

    #[test]
    fn lambda_half_isotropy() {
        let h = MaterialParams::default();
        let m = cell_material(2, 1.0, 0.5, &[0.0], &h);
        // 0.1 + 1000 * 0.5^12
        assert!(close(m.lambda, 0.344140625, 1e-12));
    }

    #[test]
    fn vanishing_partials() {
        let h = MaterialParams::default();
        let p = cell_partials(2, 0.6, 1.0, &[0.4], &h);
        assert_eq!(p.dlambda[RHO], 0.0);
        let p = cell_partials(2, 0.0, 0.3, &[0.4], &h);
        assert_eq!(p.dkm[EPS], ZERO3);
        let p = cell_partials(2, 1.0, 1.0, &[0.4], &h);
        assert!(p.dkf[ALPHA].iter().flatten().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn rejects_out_of_bounds_design() {
        let mut t = DesignField::uniform(2, 4, 0.5, 1.0, 0.0);
        t.rho[2] = 1.5;
        assert!(matches!(
            build_tensors(&t, &MaterialParams::default(), Exec::Sequential),
            Err(Error::Domain(_))
        ));
        let mut t = DesignField::uniform(2, 4, 0.5, 1.0, 0.0);
        t.eps_upper[1] = 0.5;
        assert!(build_tensors(&t, &MaterialParams::default(), Exec::Sequential).is_err());
    }

    fn fd_partials(
        dim: usize,
        rho: f64,
        eps: f64,
        alpha: &[f64],
        h: &MaterialParams,
    ) -> Vec<(Mat3, Mat3, f64)> {
        let step = 1e-6;
        let mut out = Vec::new();
        for k in 0..dim + 1 {
            let eval = |sgn: f64| {
                let (mut r, mut e, mut a) = (rho, eps, alpha.to_vec());
                match k {
                    RHO => r += sgn * step,
                    EPS => e += sgn * step,
                    _ => a[k - ALPHA] += sgn * step,
                }
                cell_material(dim, r, e, &a, h)
            };
            let (p, m) = (eval(1.0), eval(-1.0));
            out.push((
                linalg::lincomb(0.5 / step, &p.km, -0.5 / step, &m.km),
                linalg::lincomb(0.5 / step, &p.kf, -0.5 / step, &m.kf),
                (p.lambda - m.lambda) * 0.5 / step,
            ));
        }
        out
    }

    fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
        (a - b).abs() / scale.max(1e-300)
    }

    proptest! {
        #[test]
        fn tensors_are_symmetric_and_bounded(
            dim in 2usize..=3,
            rho in 0.0f64..=1.0,
            eps in 0.0f64..=1.0,
            a0 in -PI..PI,
            a1 in -PI..PI,
        ) {
            let h = MaterialParams::default();
            let m = cell_material(dim, rho, eps, &[a0, a1], &h);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(m.km[i][j], m.km[j][i]);
                    prop_assert_eq!(m.kf[i][j], m.kf[j][i]);
                }
            }
            let tol = 1e-9;
            for ev in sym_eigenvalues(&m.km, dim) {
                prop_assert!(ev >= -tol && ev <= 1.0 + tol);
            }
            for ev in sym_eigenvalues(&m.kf, dim) {
                prop_assert!(ev >= h.kf_min * (1.0 - 1e-6) - 1e-9 * h.kf_max && ev <= h.kf_max * (1.0 + 1e-12));
            }
            prop_assert!((linalg::norm(&m.normal) - 1.0).abs() < 1e-14);
        }

        #[test]
        fn partials_match_central_differences(
            dim in 2usize..=3,
            rho in 0.05f64..0.95,
            eps in 0.05f64..0.95,
            a0 in -3.0f64..3.0,
            a1 in -3.0f64..3.0,
        ) {
            let h = MaterialParams::default();
            let alpha = [a0, a1];
            let p = cell_partials(dim, rho, eps, &alpha, &h);
            let fd = fd_partials(dim, rho, eps, &alpha, &h);
            for (k, (dkm, dkf, dl)) in fd.iter().enumerate() {
                let km_scale = 1.0f64.max(dkm.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())));
                let kf_scale = h.kf_max.max(dkf.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())));
                for i in 0..dim {
                    for j in 0..dim {
                        prop_assert!(rel_err(p.dkm[k][i][j], dkm[i][j], km_scale) < 1e-6, "dKm[{}]", k);
                        prop_assert!(rel_err(p.dkf[k][i][j], dkf[i][j], kf_scale) < 1e-6, "dKf[{}]", k);
                    }
                }
                let l_scale = h.lambda_max.max(dl.abs());
                prop_assert!(rel_err(p.dlambda[k], *dl, l_scale) < 1e-6, "dlambda[{}]", k);
            }
        }
    }
}

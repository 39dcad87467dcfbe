//! Loss terms, regularizers and volume constraints.
//!
//! The directional and anisotropy regularizers depend on neighbourhood
//! statistics (membership of the anisotropic set, the local average
//! direction, the local fluidity spread). Those are captured once per
//! optimizer iteration in [`FrozenStats`] and treated as constants by every
//! loss and gradient evaluation that uses them.

use serde::{Deserialize, Serialize};

use crate::assembly::DirichletSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::grid::Grid;
use crate::linalg::{dot, norm, Vec3};
use crate::material::{normal_from_alpha, DesignField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub w_c: f64,
    pub w_d: f64,
    pub w_a: f64,
    /// A cell is anisotropic when `eps < eps0` and `rho > rho0`.
    pub eps0: f64,
    pub rho0: f64,
    /// Fluid volume limit as a fraction of the cell count.
    pub v_max: f64,
    /// Extra allowance for anisotropic (boundary) cells.
    pub v_b: f64,
    /// Rescale `w_c, w_d, w_a` by `L_f / L_x` at the initial design.
    pub normalize: bool,
    /// Weight outlet residuals by their face measure instead of a plain nodal sum.
    pub face_weighted: bool,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            w_c: 1e-2,
            w_d: 1e-2,
            w_a: 1e-2,
            eps0: 0.5,
            rho0: 0.5,
            v_max: 0.5,
            v_b: 0.1,
            normalize: true,
            face_weighted: false,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("w_c", self.w_c),
            ("w_d", self.w_d),
            ("w_a", self.w_a),
            ("v_b", self.v_b),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!(
                    "objective.{name} must be a nonnegative number, got {v}"
                ));
            }
        }
        for (name, v) in [("eps0", self.eps0), ("rho0", self.rho0)] {
            if !(v > 0.0 && v < 1.0) {
                errs.push(format!("objective.{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.v_max > 0.0 && self.v_max <= 1.0) {
            errs.push(format!(
                "objective.v_max must lie in (0, 1], got {}",
                self.v_max
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Sum of squared outlet deviations and its gradient over all nodal DOFs.
/// `weights`, when given, multiplies each DOF's squared residual.
pub fn functional_loss(
    v: &[f64],
    targets: &DirichletSet,
    dirichlet: &DirichletSet,
    weights: Option<&dyn Fn(usize) -> f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; v.len()];
    let mut loss = 0.0;
    for (dof, t) in targets.iter() {
        if dirichlet.contains(dof) {
            return Err(Error::config(format!(
                "outlet target on Dirichlet dof {dof}"
            )));
        }
        let w = weights.map_or(1.0, |f| f(dof));
        let r = v[dof] - t;
        loss += w * r * r;
        grad[dof] = 2.0 * w * r;
    }
    Ok((loss, grad))
}

/// Per-iteration snapshot of neighbourhood quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStats {
    /// Membership of the anisotropic set `A`.
    pub aniso: Vec<bool>,
    /// Normalized, sign-aligned mean normal over the members of `A` in each
    /// member's neighbourhood. `None` outside `A` or when the mean vanishes.
    pub direction: Vec<Option<Vec3>>,
    /// `max rho - min rho` over each cell's neighbourhood.
    pub spread: Vec<f64>,
}

impl FrozenStats {
    pub fn compute(theta: &DesignField, grid: &Grid, eps0: f64, rho0: f64, exec: Exec) -> Self {
        let n = theta.n_cells();
        let dim = theta.dim;
        let aniso: Vec<bool> = (0..n)
            .map(|c| theta.eps[c] < eps0 && theta.rho[c] > rho0)
            .collect();
        let normals: Vec<Vec3> = (0..n)
            .map(|c| normal_from_alpha(theta.angles(c), dim).0)
            .collect();
        let per_cell = exec.map(n, |c| {
            let mut nb = Vec::with_capacity(27);
            grid.neighborhood(c, &mut nb);
            let (lo, hi) = nb
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &j| {
                    (lo.min(theta.rho[j]), hi.max(theta.rho[j]))
                });
            let dir = if aniso[c] {
                let nc = normals[c];
                let mut m = [0.0; 3];
                for &j in nb.iter().filter(|&&j| aniso[j]) {
                    let s = if dot(&normals[j], &nc) < 0.0 {
                        -1.0
                    } else {
                        1.0
                    };
                    for k in 0..3 {
                        m[k] += s * normals[j][k];
                    }
                }
                let len = norm(&m);
                if len > 1e-12 {
                    Some([m[0] / len, m[1] / len, m[2] / len])
                } else {
                    log::debug!("cell {c}: neighbourhood directions cancel; excluded from L_d");
                    None
                }
            } else {
                None
            };
            (hi - lo, dir)
        });
        let (spread, direction) = per_cell.into_iter().unzip();
        FrozenStats {
            aniso,
            direction,
            spread,
        }
    }
}

/// `L_d = sum_{c in A} 1 - |n_c . m_c|` with the frozen mean direction `m_c`,
/// returning the gradient with respect to the angles.
pub fn directional_reg(theta: &DesignField, frozen: &FrozenStats) -> (f64, Vec<f64>) {
    let na = theta.n_angles();
    let mut grad = vec![0.0; theta.alpha.len()];
    let mut loss = 0.0;
    for c in 0..theta.n_cells() {
        let Some(m) = frozen.direction[c] else {
            continue;
        };
        let (n, dn) = normal_from_alpha(theta.angles(c), theta.dim);
        let cosv = dot(&n, &m);
        let s = if cosv < 0.0 { -1.0 } else { 1.0 };
        loss += 1.0 - s * cosv;
        for k in 0..na {
            grad[c * na + k] = -s * dot(&dn[k], &m);
        }
    }
    (loss, grad)
}

/// `L_a = sum_c eps_c rho_c spread_c`; returns `(L_a, dL/deps, dL/drho)`.
pub fn anisotropic_reg(theta: &DesignField, frozen: &FrozenStats) -> (f64, Vec<f64>, Vec<f64>) {
    let n = theta.n_cells();
    let mut loss = 0.0;
    let mut d_eps = vec![0.0; n];
    let mut d_rho = vec![0.0; n];
    for c in 0..n {
        let s = frozen.spread[c];
        loss += theta.eps[c] * theta.rho[c] * s;
        d_eps[c] = theta.rho[c] * s;
        d_rho[c] = theta.eps[c] * s;
    }
    (loss, d_eps, d_rho)
}

/// Both volume constraints in the form `g <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeReport {
    pub v_iso: f64,
    pub v_all: f64,
    /// `V_iso - V_max n`
    pub g_iso: f64,
    /// `V_all - (V_b + V_max) n`
    pub g_all: f64,
    pub dg_iso_drho: Vec<f64>,
    pub dg_iso_deps: Vec<f64>,
    pub dg_all_drho: Vec<f64>,
}

pub fn volume_constraints(theta: &DesignField, weights: &ObjectiveWeights) -> VolumeReport {
    let n = theta.n_cells() as f64;
    let v_iso: f64 = theta.eps.iter().zip(&theta.rho).map(|(e, r)| e * r).sum();
    let v_all: f64 = theta.rho.iter().sum();
    VolumeReport {
        v_iso,
        v_all,
        g_iso: v_iso - weights.v_max * n,
        g_all: v_all - (weights.v_b + weights.v_max) * n,
        dg_iso_drho: theta.eps.clone(),
        dg_iso_deps: theta.rho.clone(),
        dg_all_drho: vec![1.0; theta.n_cells()],
    }
}

/// Upper bound on `eps` from the local fluidity spread: `1 - spread`.
pub fn dynamic_eps_bound(frozen: &FrozenStats) -> Vec<f64> {
    frozen
        .spread
        .iter()
        .map(|s| (1.0 - s).clamp(0.0, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn functional_loss_examples() {
        let mut t = DirichletSet::new();
        t.insert(0, 0.0).unwrap();
        t.insert(1, 0.0).unwrap();
        let none = DirichletSet::new();
        assert_eq!(
            functional_loss(&[0.0, 0.0], &t, &none, None).unwrap().0,
            0.0
        );
        assert_eq!(
            functional_loss(&[1.0, 0.0], &t, &none, None).unwrap().0,
            1.0
        );
        let mut t2 = DirichletSet::new();
        for d in 0..4 {
            t2.insert(d, 0.0).unwrap();
        }
        let (l, g) = functional_loss(&[0.5, 0.0, 0.5, 0.0], &t2, &none, None).unwrap();
        assert_eq!(l, 0.5);
        assert_eq!(g, vec![1.0, 0.0, 1.0, 0.0]);
        let mut dir = DirichletSet::new();
        dir.insert(1, 0.0).unwrap();
        assert!(functional_loss(&[0.0, 0.0], &t, &dir, None).is_err());
    }

    fn field(grid: &Grid, rho: Vec<f64>, eps: Vec<f64>, alpha: Vec<f64>) -> DesignField {
        let n = grid.n_cells();
        DesignField {
            dim: grid.dim(),
            rho,
            eps,
            alpha,
            eps_upper: vec![1.0; n],
        }
    }

    #[test]
    fn directional_examples() {
        let g = Grid::new(&[4, 4], 4).unwrap();
        let th = field(&g, vec![0.9; 16], vec![0.1; 16], vec![0.3; 16]);
        let f = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
        assert!(directional_reg(&th, &f).0.abs() < 1e-14);
        let iso = field(&g, vec![0.9; 16], vec![1.0; 16], vec![0.3; 16]);
        let f = FrozenStats::compute(&iso, &g, 0.5, 0.5, Exec::Sequential);
        assert_eq!(directional_reg(&iso, &f).0, 0.0);

        let g1 = Grid::new(&[1, 1], 1).unwrap();
        let th = field(&g1, vec![0.9], vec![0.1], vec![0.0]);
        let frozen = FrozenStats {
            aniso: vec![true],
            direction: vec![Some([0.0, 1.0, 0.0])],
            spread: vec![0.0],
        };
        assert!((directional_reg(&th, &frozen).0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anisotropic_examples() {
        let g = Grid::new(&[3, 3], 4).unwrap();
        let th = field(&g, vec![0.4; 9], vec![0.7; 9], vec![0.0; 9]);
        let f = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
        assert_eq!(anisotropic_reg(&th, &f).0, 0.0);
        let mut rho = vec![0.0; 9];
        rho[4] = 0.5;
        rho[0] = 1.0;
        let th = field(&g, rho.clone(), vec![0.0; 9], vec![0.0; 9]);
        let f = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
        assert_eq!(anisotropic_reg(&th, &f).0, 0.0);
        let mut eps = vec![0.0; 9];
        eps[4] = 1.0;
        let th = field(&g, rho, eps, vec![0.0; 9]);
        let f = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
        assert!((anisotropic_reg(&th, &f).0 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn volume_examples() {
        let g = Grid::new(&[4, 4], 4).unwrap();
        let w = ObjectiveWeights {
            v_max: 0.4,
            ..Default::default()
        };
        let th = field(&g, vec![0.5; 16], vec![0.5; 16], vec![0.0; 16]);
        assert_eq!(volume_constraints(&th, &w).v_iso, 4.0);
        let th = field(&g, vec![0.4; 16], vec![1.0; 16], vec![0.0; 16]);
        assert!(volume_constraints(&th, &w).g_iso.abs() < 1e-12);
        let th = field(&g, vec![0.0; 16], vec![1.0; 16], vec![0.0; 16]);
        let r = volume_constraints(&th, &w);
        assert!(r.g_iso < 0.0 && r.g_all < 0.0);
    }

    #[test]
    fn eps_bound_examples() {
        let g = Grid::new(&[3, 3], 4).unwrap();
        let th = field(&g, vec![0.3; 9], vec![1.0; 9], vec![0.0; 9]);
        let f = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
        assert!(dynamic_eps_bound(&f).iter().all(|&b| b == 1.0));
        let mut rho = vec![0.5; 9];
        rho[0] = 0.0;
        rho[8] = 1.0;
        let th = field(&g, rho, vec![1.0; 9], vec![0.0; 9]);
        let f = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
        assert_eq!(dynamic_eps_bound(&f)[4], 0.0);
        let mut rho = vec![0.5; 9];
        rho[1] = 0.8;
        let th = field(&g, rho, vec![1.0; 9], vec![0.0; 9]);
        let f = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
        assert!((dynamic_eps_bound(&f)[4] - 0.7).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn regularizers_ignore_normal_sign(
            seed in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, -3.0f64..3.0, any::<bool>()), 25)
        ) {
            let g = Grid::new(&[5, 5], 4).unwrap();
            let rho: Vec<f64> = seed.iter().map(|s| s.0).collect();
            let eps: Vec<f64> = seed.iter().map(|s| s.1).collect();
            let alpha: Vec<f64> = seed.iter().map(|s| s.2).collect();
            let flipped: Vec<f64> = seed.iter().map(|s| if s.3 { s.2 + std::f64::consts::PI } else { s.2 }).collect();
            let a = field(&g, rho.clone(), eps.clone(), alpha);
            let b = field(&g, rho, eps, flipped);
            let fa = FrozenStats::compute(&a, &g, 0.5, 0.5, Exec::Sequential);
            let fb = FrozenStats::compute(&b, &g, 0.5, 0.5, Exec::Sequential);
            prop_assert!((directional_reg(&a, &fa).0 - directional_reg(&b, &fb).0).abs() < 1e-12);
            prop_assert!((anisotropic_reg(&a, &fa).0 - anisotropic_reg(&b, &fb).0).abs() < 1e-12);
        }

        #[test]
        fn regularizer_gradients_match_differences(
            seed in prop::collection::vec((0.05f64..0.95, 0.05f64..0.45, -3.0f64..3.0), 16)
        ) {
            let g = Grid::new(&[4, 4], 4).unwrap();
            let mk = |s: &[(f64, f64, f64)]| field(
                &g,
                s.iter().map(|x| 0.5 + 0.5 * x.0).collect(),
                s.iter().map(|x| x.1).collect(),
                s.iter().map(|x| x.2).collect(),
            );
            let th = mk(&seed);
            let frozen = FrozenStats::compute(&th, &g, 0.5, 0.5, Exec::Sequential);
            let (_, ga) = directional_reg(&th, &frozen);
            let (_, ge, gr) = anisotropic_reg(&th, &frozen);
            let h = 1e-6;
            for c in 0..16 {
                let mut p = th.clone();
                let mut m = th.clone();
                p.alpha[c] += h;
                m.alpha[c] -= h;
                let fd = (directional_reg(&p, &frozen).0 - directional_reg(&m, &frozen).0) / (2.0 * h);
                prop_assert!((fd - ga[c]).abs() < 1e-6 * ga[c].abs().max(1.0));
                let mut p = th.clone();
                let mut m = th.clone();
                p.eps[c] += h;
                m.eps[c] -= h;
                let fd = (anisotropic_reg(&p, &frozen).0 - anisotropic_reg(&m, &frozen).0) / (2.0 * h);
                prop_assert!((fd - ge[c]).abs() < 1e-6 * ge[c].abs().max(1.0));
                let mut p = th.clone();
                let mut m = th.clone();
                p.rho[c] += h;
                m.rho[c] -= h;
                let fd = (anisotropic_reg(&p, &frozen).0 - anisotropic_reg(&m, &frozen).0) / (2.0 * h);
                prop_assert!((fd - gr[c]).abs() < 1e-6 * gr[c].abs().max(1.0));
            }
        }
    }
}

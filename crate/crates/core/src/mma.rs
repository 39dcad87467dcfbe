//! Method of moving asymptotes for `min f0(x)  s.t.  g_i(x) <= 0,  xmin <= x <= xmax`.
//!
//! Each step builds Svanberg's separable convex approximation around the
//! current point and solves it through its dual, which has one variable per
//! constraint. Elastic variables `y_i` (cost `c y + d y^2 / 2`) keep every
//! subproblem feasible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmaSettings {
    pub asyinit: f64,
    pub asydecr: f64,
    pub asyincr: f64,
    /// Smallest asymptote distance as a fraction of the range.
    pub asymin: f64,
    /// Move limit as a fraction of each variable's full range.
    pub move_limit: f64,
    pub albefa: f64,
    pub raa0: f64,
    /// Linear cost of the elastic variables.
    pub c: f64,
    /// Quadratic cost of the elastic variables.
    pub d: f64,
    /// Stationarity tolerance of the dual subproblem.
    pub dual_tol: f64,
}

impl Default for MmaSettings {
    fn default() -> Self {
        MmaSettings {
            asyinit: 0.5,
            asydecr: 0.7,
            asyincr: 1.2,
            asymin: 1e-3,
            move_limit: 0.2,
            albefa: 0.1,
            raa0: 1e-5,
            c: 1000.0,
            d: 1.0,
            dual_tol: 1e-9,
        }
    }
}

/// Asymptotes and iterate history carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaState {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub x_prev2: Vec<f64>,
    pub iteration: usize,
}

impl MmaState {
    pub fn new(n: usize) -> Self {
        MmaState {
            lower: vec![0.0; n],
            upper: vec![0.0; n],
            x_prev: Vec::new(),
            x_prev2: Vec::new(),
            iteration: 0,
        }
    }
}

/// Outcome of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MmaStep {
    pub x: Vec<f64>,
    /// Dual multipliers of the constraints.
    pub lambda: Vec<f64>,
    /// Elastic slack used by the subproblem; nonzero means the linearized
    /// constraints could not be met inside the move limits.
    pub slack: Vec<f64>,
    /// Projected dual gradient norm at termination.
    pub dual_residual: f64,
    pub max_change: f64,
}

/// Problem data of one MMA step.
pub struct MmaInput<'a> {
    pub x: &'a [f64],
    pub df0: &'a [f64],
    /// Constraint values `g_i(x)`.
    pub g: &'a [f64],
    /// Constraint gradients, one row per constraint.
    pub dg: &'a [Vec<f64>],
    /// Current (possibly tightened) box.
    pub xmin: &'a [f64],
    pub xmax: &'a [f64],
    /// Full variable range used to size asymptotes and move limits.
    pub range: &'a [f64],
}

struct Subproblem {
    low: Vec<f64>,
    upp: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    p0: Vec<f64>,
    q0: Vec<f64>,
    p: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: f64,
    d: f64,
}

impl Subproblem {
    fn n(&self) -> usize {
        self.low.len()
    }

    fn x_of(&self, lam: &[f64], j: usize) -> f64 {
        if self.beta[j] - self.alpha[j] < 1e-12 {
            return self.alpha[j];
        }
        let mut pj = self.p0[j];
        let mut qj = self.q0[j];
        for (i, l) in lam.iter().enumerate() {
            pj += l * self.p[i][j];
            qj += l * self.q[i][j];
        }
        let (sp, sq) = (pj.sqrt(), qj.sqrt());
        let x = (sp * self.low[j] + sq * self.upp[j]) / (sp + sq);
        x.clamp(self.alpha[j], self.beta[j])
    }

    /// Dual value, gradient and Hessian at `lam`.
    fn dual(&self, lam: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let m = lam.len();
        let mut w = 0.0;
        let mut grad = vec![0.0; m];
        let mut hess = vec![vec![0.0; m]; m];
        let mut xs = vec![0.0; self.n()];
        for j in 0..self.n() {
            let x = self.x_of(lam, j);
            xs[j] = x;
            let ux = self.upp[j] - x;
            let xl = x - self.low[j];
            let mut pj = self.p0[j];
            let mut qj = self.q0[j];
            for i in 0..m {
                pj += lam[i] * self.p[i][j];
                qj += lam[i] * self.q[i][j];
            }
            w += pj / ux + qj / xl;
            let mut dgx = [0.0; 8];
            for i in 0..m {
                grad[i] += self.p[i][j] / ux + self.q[i][j] / xl;
                dgx[i] = self.p[i][j] / (ux * ux) - self.q[i][j] / (xl * xl);
            }
            let free = x > self.alpha[j] && x < self.beta[j];
            if free {
                let curv = 2.0 * pj / (ux * ux * ux) + 2.0 * qj / (xl * xl * xl);
                for i in 0..m {
                    for k in 0..m {
                        hess[i][k] -= dgx[i] * dgx[k] / curv;
                    }
                }
            }
        }
        for i in 0..m {
            let y = ((lam[i] - self.c) / self.d).max(0.0);
            w += self.c * y + 0.5 * self.d * y * y - lam[i] * y - lam[i] * self.b[i];
            grad[i] -= y + self.b[i];
            if lam[i] > self.c {
                hess[i][i] -= 1.0 / self.d;
            }
        }
        (w, grad, hess, xs)
    }
}

fn projected_norm(lam: &[f64], grad: &[f64]) -> f64 {
    lam.iter()
        .zip(grad)
        .map(|(&l, &g)| if l <= 0.0 && g < 0.0 { 0.0 } else { g.abs() })
        .fold(0.0, f64::max)
}

/// Solve a small dense system by Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[piv][k].abs() < 1e-300 {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
            b[i] -= f * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Some(x)
}

/// One MMA iteration; updates `state` and returns the next iterate.
pub fn mma_step(input: &MmaInput, settings: &MmaSettings, state: &mut MmaState) -> Result<MmaStep> {
    let n = input.x.len();
    let m = input.g.len();
    if m > 8 {
        return Err(Error::Domain("at most 8 constraints are supported".into()));
    }
    for v in [input.df0, input.xmin, input.xmax, input.range] {
        if v.len() != n {
            return Err(Error::Domain("MMA vector lengths disagree".into()));
        }
    }
    if input.dg.len() != m || input.dg.iter().any(|r| r.len() != n) {
        return Err(Error::Domain("constraint gradient shape mismatch".into()));
    }
    if input
        .df0
        .iter()
        .chain(input.g)
        .chain(input.dg.iter().flatten())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Input(
            "non-finite objective or constraint data".into(),
        ));
    }
    let x = input.x;
    let s = settings;
    if state.lower.len() != n {
        *state = MmaState::new(n);
    }

    let mut low = vec![0.0; n];
    let mut upp = vec![0.0; n];
    for j in 0..n {
        let r = input.range[j].max(1e-12);
        if state.iteration < 2 {
            low[j] = x[j] - s.asyinit * r;
            upp[j] = x[j] + s.asyinit * r;
        } else {
            let zzz = (x[j] - state.x_prev[j]) * (state.x_prev[j] - state.x_prev2[j]);
            let factor = if zzz > 0.0 {
                s.asyincr
            } else if zzz < 0.0 {
                s.asydecr
            } else {
                1.0
            };
            low[j] = x[j] - factor * (state.x_prev[j] - state.lower[j]);
            upp[j] = x[j] + factor * (state.upper[j] - state.x_prev[j]);
            low[j] = low[j].clamp(x[j] - 10.0 * r, x[j] - s.asymin * r);
            upp[j] = upp[j].clamp(x[j] + s.asymin * r, x[j] + 10.0 * r);
        }
    }

    let mut sub = Subproblem {
        alpha: vec![0.0; n],
        beta: vec![0.0; n],
        p0: vec![0.0; n],
        q0: vec![0.0; n],
        p: vec![vec![0.0; n]; m],
        q: vec![vec![0.0; n]; m],
        b: vec![0.0; m],
        c: s.c,
        d: s.d,
        low,
        upp,
    };
    for j in 0..n {
        let r = input.range[j].max(1e-12);
        let (lo, up) = (sub.low[j], sub.upp[j]);
        sub.alpha[j] = (lo + s.albefa * (x[j] - lo))
            .max(x[j] - s.move_limit * r)
            .max(input.xmin[j]);
        sub.beta[j] = (up - s.albefa * (up - x[j]))
            .min(x[j] + s.move_limit * r)
            .min(input.xmax[j]);
        if sub.beta[j] < sub.alpha[j] {
            // the box moved away from x (tightened bounds); stay on the nearest face
            let v = x[j].clamp(input.xmin[j], input.xmax[j]);
            sub.alpha[j] = v;
            sub.beta[j] = v;
        }
        let ux = up - x[j];
        let xl = x[j] - lo;
        let xmami = r.max(1e-5);
        let reg = s.raa0 / xmami;
        let (pp, qq) = (input.df0[j].max(0.0), (-input.df0[j]).max(0.0));
        let pq = 0.001 * (pp + qq) + reg;
        sub.p0[j] = (pp + pq) * ux * ux;
        sub.q0[j] = (qq + pq) * xl * xl;
        for i in 0..m {
            let dg = input.dg[i][j];
            let (pp, qq) = (dg.max(0.0), (-dg).max(0.0));
            let pq = 0.001 * (pp + qq) + reg;
            sub.p[i][j] = (pp + pq) * ux * ux;
            sub.q[i][j] = (qq + pq) * xl * xl;
        }
    }
    for i in 0..m {
        let mut bi = -input.g[i];
        for j in 0..n {
            bi += sub.p[i][j] / (sub.upp[j] - x[j]) + sub.q[i][j] / (x[j] - sub.low[j]);
        }
        sub.b[i] = bi;
    }

    // projected Newton ascent on the concave dual
    let mut lam = vec![0.0; m];
    let (mut w, mut grad, mut hess, mut xs) = sub.dual(&lam);
    let mut res = projected_norm(&lam, &grad);
    let mut iters = 0;
    while res > s.dual_tol && iters < 200 {
        iters += 1;
        let free: Vec<usize> = (0..m).filter(|&i| lam[i] > 0.0 || grad[i] > 0.0).collect();
        let mut dir = vec![0.0; m];
        let hf: Vec<Vec<f64>> = free
            .iter()
            .map(|&i| free.iter().map(|&k| -hess[i][k]).collect())
            .collect();
        let gf: Vec<f64> = free.iter().map(|&i| grad[i]).collect();
        let newton = solve_dense(hf, gf.clone())
            .filter(|d| d.iter().zip(&gf).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        match newton {
            Some(d) => free.iter().zip(&d).for_each(|(&i, &v)| dir[i] = v),
            None => free.iter().for_each(|&i| dir[i] = grad[i]),
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = lam
                .iter()
                .zip(&dir)
                .map(|(l, d)| (l + t * d).max(0.0))
                .collect();
            let (wt, gt, ht, xt) = sub.dual(&trial);
            let gain: f64 = grad
                .iter()
                .zip(trial.iter().zip(&lam))
                .map(|(g, (a, b))| g * (a - b))
                .sum();
            if wt >= w + 1e-4 * gain {
                lam = trial;
                w = wt;
                grad = gt;
                hess = ht;
                xs = xt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        res = projected_norm(&lam, &grad);
        if !accepted {
            break;
        }
    }
    if res > s.dual_tol {
        log::debug!("MMA dual stopped at projected gradient {res:e} after {iters} iterations");
    }
    let slack: Vec<f64> = lam.iter().map(|&l| ((l - s.c) / s.d).max(0.0)).collect();
    if slack.iter().any(|&y| y > 1e-9) {
        log::debug!("MMA subproblem needed elastic slack {slack:?}");
    }
    let max_change = xs
        .iter()
        .zip(x)
        .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));

    state.x_prev2 = std::mem::take(&mut state.x_prev);
    state.x_prev = x.to_vec();
    state.lower = sub.low;
    state.upper = sub.upp;
    state.iteration += 1;
    Ok(MmaStep {
        x: xs,
        lambda: lam,
        slack,
        dual_residual: res,
        max_change,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x0: f64, iters: usize, f: impl Fn(f64) -> f64, g: Option<(f64, f64)>) -> (f64, usize) {
        let mut x = vec![x0];
        let mut st = MmaState::new(1);
        let set = MmaSettings::default();
        for k in 0..iters {
            let df = [f(x[0])];
            let (gv, dg) = match g {
                Some((a, c)) => (vec![a * x[0] - c], vec![vec![a]]),
                None => (vec![], vec![]),
            };
            let step = mma_step(
                &MmaInput {
                    x: &x,
                    df0: &df,
                    g: &gv,
                    dg: &dg,
                    xmin: &[0.0],
                    xmax: &[1.0],
                    range: &[1.0],
                },
                &set,
                &mut st,
            )
            .unwrap();
            x = step.x;
            if step.max_change < 1e-6 {
                return (x[0], k + 1);
            }
        }
        (x[0], iters)
    }

    #[test]
    fn quadratic_bowl() {
        let (x, it) = run(0.05, 30, |x| 2.0 * (x - 0.5), None);
        assert!((x - 0.5).abs() < 1e-3, "{x} after {it}");
    }

    #[test]
    fn linear_with_constraint() {
        let (x, it) = run(0.9, 30, |_| -1.0, Some((1.0, 0.3)));
        assert!((x - 0.3).abs() < 1e-3, "{x} after {it}");
    }

    #[test]
    fn stationary_point_does_not_move() {
        let mut st = MmaState::new(2);
        let step = mma_step(
            &MmaInput {
                x: &[0.3, 0.6],
                df0: &[0.0, 0.0],
                g: &[-1.0],
                dg: &[vec![1.0, 1.0]],
                xmin: &[0.0, 0.0],
                xmax: &[1.0, 1.0],
                range: &[1.0, 1.0],
            },
            &MmaSettings::default(),
            &mut st,
        )
        .unwrap();
        assert!(
            (step.x[0] - 0.3).abs() < 1e-12 && (step.x[1] - 0.6).abs() < 1e-12,
            "{:?}",
            step.x
        );
    }

    #[test]
    fn fixed_variables_stay_put() {
        let mut st = MmaState::new(2);
        let step = mma_step(
            &MmaInput {
                x: &[0.4, 0.4],
                df0: &[1.0, 1.0],
                g: &[],
                dg: &[],
                xmin: &[0.0, 0.4],
                xmax: &[1.0, 0.4],
                range: &[1.0, 1.0],
            },
            &MmaSettings::default(),
            &mut st,
        )
        .unwrap();
        assert!(step.x[0] < 0.4);
        assert_eq!(step.x[1], 0.4);
    }
}

//! Fixed-size helpers for the d x d tensors (d <= 3). Unused trailing
//! rows/columns are kept at zero.

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const ZERO3: Mat3 = [[0.0; 3]; 3];

pub fn identity(dim: usize) -> Mat3 {
    let mut m = ZERO3;
    for (i, row) in m.iter_mut().enumerate().take(dim) {
        row[i] = 1.0;
    }
    m
}

pub fn outer(a: &Vec3, b: &Vec3) -> Mat3 {
    let mut m = ZERO3;
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i] * b[j];
        }
    }
    m
}

/// `a b^T + b a^T`
pub fn sym_outer(a: &Vec3, b: &Vec3) -> Mat3 {
    let mut m = ZERO3;
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = a[i] * b[j] + b[i] * a[j];
        }
    }
    m
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// `alpha * a + beta * b`
pub fn lincomb(alpha: f64, a: &Mat3, beta: f64, b: &Mat3) -> Mat3 {
    let mut m = ZERO3;
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = alpha * a[i][j] + beta * b[i][j];
        }
    }
    m
}

pub fn scale(alpha: f64, a: &Mat3) -> Mat3 {
    lincomb(alpha, a, 0.0, &ZERO3)
}

/// Frobenius inner product `sum_ij a_ij b_ij`.
pub fn contract(a: &Mat3, b: &Mat3) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += a[i][j] * b[i][j];
        }
    }
    s
}

pub fn mat_vec(a: &Mat3, x: &Vec3) -> Vec3 {
    [
        a[0][0] * x[0] + a[0][1] * x[1] + a[0][2] * x[2],
        a[1][0] * x[0] + a[1][1] * x[1] + a[1][2] * x[2],
        a[2][0] * x[0] + a[2][1] * x[1] + a[2][2] * x[2],
    ]
}

/// Eigenvalues of the leading `dim x dim` block of a symmetric matrix,
/// by cyclic Jacobi rotations. Only used in checks, not on hot paths.
pub fn sym_eigenvalues(a: &Mat3, dim: usize) -> Vec<f64> {
    let mut m = *a;
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..dim {
            for q in p + 1..dim {
                off += m[p][q] * m[p][q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..dim {
            for q in p + 1..dim {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..dim {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..dim {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..dim).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

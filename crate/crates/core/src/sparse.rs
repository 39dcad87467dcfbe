//! Simplicial sparse `LDL^T` for symmetric quasi-definite matrices.
//!
//! Matrices are given as the upper triangle (diagonal included) in
//! compressed-sparse-column form with sorted row indices. The factorization is
//! split into a symbolic phase (elimination tree, column counts) that depends
//! only on the pattern and a numeric phase that can be repeated for new values.
//! No pivoting is performed; callers choose an ordering for which every leading
//! principal minor is nonsingular.

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Upper-triangular CSC matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CscUpper {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscUpper {
    /// Build from `(row, col, value)` triplets with `row <= col`; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut t = triplets.to_vec();
        for &(i, j, _) in &t {
            if i > j || j >= n {
                return Err(Error::Domain(format!(
                    "entry ({i},{j}) is not in the upper triangle of a {n}x{n} matrix"
                )));
            }
        }
        t.sort_by_key(|a| (a.1, a.0));
        let mut col_ptr = vec![0; n + 1];
        let mut row_idx = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = (NONE, NONE);
        for (i, j, v) in t {
            if (i, j) == last {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = (i, j);
            row_idx.push(i);
            values.push(v);
            col_ptr[j + 1] += 1;
        }
        for j in 0..n {
            col_ptr[j + 1] += col_ptr[j];
        }
        Ok(CscUpper {
            n,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// `y = A x` using symmetry.
    pub fn sym_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[p];
                let a = self.values[p];
                y[i] += a * x[j];
                if i != j {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }
}

/// Pattern-only analysis: elimination tree and the column layout of `L`.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    etree: Vec<usize>,
    l_ptr: Vec<usize>,
}

impl LdlSymbolic {
    pub fn analyze(col_ptr: &[usize], row_idx: &[usize]) -> Result<Self> {
        let n = col_ptr.len() - 1;
        let mut work = vec![NONE; n];
        let mut l_nz = vec![0usize; n];
        let mut etree = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for &row in &row_idx[col_ptr[j]..col_ptr[j + 1]] {
                let mut i = row;
                if i > j {
                    return Err(Error::Domain(
                        "matrix pattern is not upper triangular".into(),
                    ));
                }
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    l_nz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut l_ptr = vec![0usize; n + 1];
        for i in 0..n {
            l_ptr[i + 1] = l_ptr[i] + l_nz[i];
        }
        Ok(LdlSymbolic { n, etree, l_ptr })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of strictly-lower nonzeros in `L`.
    pub fn l_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }
}

/// Numeric factors `L` (unit lower, stored by column without the diagonal) and `D`.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    d: Vec<f64>,
    d_inv: Vec<f64>,
}

impl LdlFactor {
    /// Up-looking factorization of `A` whose pattern was analysed by `sym`.
    pub fn factor(sym: &LdlSymbolic, a: &CscUpper) -> Result<Self> {
        let n = sym.n;
        if a.n != n {
            return Err(Error::Domain(format!(
                "matrix order {} does not match analysis order {n}",
                a.n
            )));
        }
        let nnz_l = sym.l_nnz();
        let mut l_idx = vec![0usize; nnz_l];
        let mut l_val = vec![0.0; nnz_l];
        let mut d = vec![0.0; n];
        let mut d_inv = vec![0.0; n];
        let mut y_vals = vec![0.0; n];
        let mut marked = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut next = sym.l_ptr[..n].to_vec();

        for k in 0..n {
            let mut n_y = 0;
            for p in a.col_ptr[k]..a.col_ptr[k + 1] {
                let b = a.row_idx[p];
                if b == k {
                    d[k] = a.values[p];
                    continue;
                }
                y_vals[b] = a.values[p];
                if marked[b] {
                    continue;
                }
                // walk up the elimination tree to collect the reach of b
                marked[b] = true;
                stack[0] = b;
                let mut top = 1;
                let mut i = sym.etree[b];
                while i != NONE && i < k && !marked[i] {
                    marked[i] = true;
                    stack[top] = i;
                    top += 1;
                    i = sym.etree[i];
                }
                while top > 0 {
                    top -= 1;
                    y_idx[n_y] = stack[top];
                    n_y += 1;
                }
            }
            for t in (0..n_y).rev() {
                let c = y_idx[t];
                let end = next[c];
                let yc = y_vals[c];
                for p in sym.l_ptr[c]..end {
                    y_vals[l_idx[p]] -= l_val[p] * yc;
                }
                let lkc = yc * d_inv[c];
                l_idx[end] = k;
                l_val[end] = lkc;
                d[k] -= yc * lkc;
                next[c] += 1;
                y_vals[c] = 0.0;
                marked[c] = false;
            }
            if d[k] == 0.0 || !d[k].is_finite() {
                return Err(Error::Solver(format!(
                    "zero or non-finite pivot at position {k}"
                )));
            }
            d_inv[k] = 1.0 / d[k];
        }
        Ok(LdlFactor {
            l_ptr: sym.l_ptr.clone(),
            l_idx,
            l_val,
            d,
            d_inv,
        })
    }

    pub fn diag(&self) -> &[f64] {
        &self.d
    }

    /// Number of (positive, negative) pivots.
    pub fn inertia(&self) -> (usize, usize) {
        let pos = self.d.iter().filter(|&&x| x > 0.0).count();
        (pos, self.d.len() - pos)
    }

    /// Overwrite `x` with `A^{-1} x`.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for p in self.l_ptr[i]..self.l_ptr[i + 1] {
                    x[self.l_idx[p]] -= self.l_val[p] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.d_inv[i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in self.l_ptr[i]..self.l_ptr[i + 1] {
                s -= self.l_val[p] * x[self.l_idx[p]];
            }
            x[i] = s;
        }
    }
}

/// Fill-reducing ordering of a symmetric pattern given by its upper triangle.
/// Returns `perm` with `perm[new] = old`.
pub fn amd_order(n: usize, col_ptr: &[usize], row_idx: &[usize]) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    // AMD wants a square pattern; hand it the full symmetric structure
    let mut counts = vec![0usize; n + 1];
    for j in 0..n {
        for &i in &row_idx[col_ptr[j]..col_ptr[j + 1]] {
            counts[j + 1] += 1;
            if i != j {
                counts[i + 1] += 1;
            }
        }
    }
    for j in 0..n {
        counts[j + 1] += counts[j];
    }
    let mut fill = counts.clone();
    let mut ai = vec![0i64; counts[n]];
    for j in 0..n {
        for &i in &row_idx[col_ptr[j]..col_ptr[j + 1]] {
            ai[fill[j]] = i as i64;
            fill[j] += 1;
            if i != j {
                ai[fill[i]] = j as i64;
                fill[i] += 1;
            }
        }
    }
    for j in 0..n {
        ai[counts[j]..counts[j + 1]].sort_unstable();
    }
    let ap: Vec<i64> = counts.iter().map(|&c| c as i64).collect();
    let (p, _, _) = amd::order(n as i64, &ap, &ai, &amd::Control::default())
        .map_err(|s| Error::Solver(format!("AMD ordering failed: {s:?}")))?;
    Ok(p.into_iter().map(|x| x as usize).collect())
}

/// Pattern of `P A P^T` (upper triangle) together with the position each
/// original entry lands in, so numeric values can be scattered without search.
#[derive(Debug, Clone)]
pub struct PermutedPattern {
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    /// `map[k]` = position in the permuted arrays of original entry `k`.
    pub map: Vec<usize>,
}

pub fn permute_upper(
    n: usize,
    col_ptr: &[usize],
    row_idx: &[usize],
    pinv: &[usize],
) -> PermutedPattern {
    let nnz = row_idx.len();
    let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(nnz);
    for j in 0..n {
        for p in col_ptr[j]..col_ptr[j + 1] {
            let (a, b) = (pinv[row_idx[p]], pinv[j]);
            entries.push((a.max(b), a.min(b), p));
        }
    }
    entries.sort_unstable();
    let mut new_ptr = vec![0usize; n + 1];
    let mut new_idx = Vec::with_capacity(nnz);
    let mut map = vec![0usize; nnz];
    for (pos, &(c, r, k)) in entries.iter().enumerate() {
        new_ptr[c + 1] += 1;
        new_idx.push(r);
        map[k] = pos;
    }
    for j in 0..n {
        new_ptr[j + 1] += new_ptr[j];
    }
    PermutedPattern {
        col_ptr: new_ptr,
        row_idx: new_idx,
        map,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    fn to_upper(a: &[Vec<f64>]) -> CscUpper {
        let n = a.len();
        let mut t = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if a[i][j] != 0.0 || i == j {
                    t.push((i, j, a[i][j]));
                }
            }
        }
        CscUpper::from_triplets(n, &t).unwrap()
    }

    #[test]
    fn solves_small_quasi_definite_system() {
        // [[2, 0, 1], [0, 2, 1], [1, 1, 0]] with a tiny negative regularization
        let a = vec![
            vec![2.0, 0.0, 1.0],
            vec![0.0, 2.0, 1.0],
            vec![1.0, 1.0, -1e-14],
        ];
        let m = to_upper(&a);
        let sym = LdlSymbolic::analyze(&m.col_ptr, &m.row_idx).unwrap();
        let f = LdlFactor::factor(&sym, &m).unwrap();
        assert_eq!(f.inertia(), (2, 1));
        let mut x = vec![2.0, 4.0, 0.0];
        f.solve_in_place(&mut x);
        assert!((x[0] + 0.5).abs() < 1e-12);
        assert!((x[1] - 0.5).abs() < 1e-12);
        assert!((x[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_spd_roundtrip_with_amd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 10.0 + rng.random::<f64>();
            for _ in 0..3 {
                let j = rng.random_range(0..n);
                if j != i {
                    let v = rng.random::<f64>() - 0.5;
                    a[i][j] = v;
                    a[j][i] = v;
                }
            }
        }
        let m = to_upper(&a);
        let perm = amd_order(n, &m.col_ptr, &m.row_idx).unwrap();
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }
        let pp = permute_upper(n, &m.col_ptr, &m.row_idx, &pinv);
        let mut vals = vec![0.0; m.nnz()];
        for (k, &pos) in pp.map.iter().enumerate() {
            vals[pos] = m.values[k];
        }
        let pm = CscUpper {
            n,
            col_ptr: pp.col_ptr.clone(),
            row_idx: pp.row_idx.clone(),
            values: vals,
        };
        let sym = LdlSymbolic::analyze(&pm.col_ptr, &pm.row_idx).unwrap();
        let f = LdlFactor::factor(&sym, &pm).unwrap();
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = dense_mul(&a, &x_true);
        let mut y: Vec<f64> = perm.iter().map(|&o| b[o]).collect();
        f.solve_in_place(&mut y);
        for (new, &old) in perm.iter().enumerate() {
            assert!((y[new] - x_true[old]).abs() < 1e-12);
        }
        assert_eq!(pm.sym_mul(&vec![0.0; n]), vec![0.0; n]);
    }

    #[test]
    fn singular_pivot_is_reported() {
        let a = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let m = to_upper(&a);
        let sym = LdlSymbolic::analyze(&m.col_ptr, &m.row_idx).unwrap();
        assert!(matches!(LdlFactor::factor(&sym, &m), Err(Error::Solver(_))));
    }

    #[test]
    fn rejects_lower_entries() {
        assert!(CscUpper::from_triplets(2, &[(1, 0, 1.0)]).is_err());
    }
}

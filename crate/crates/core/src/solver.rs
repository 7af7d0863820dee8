//! Compressed sparse row storage and restarted GMRES.
//!
//! All reductions run in a fixed order so that repeated solves of the same
//! system return bit-identical iterates.

use crate::error::{invalid, Error, Result};

/// Row-compressed sparse matrix with sorted, unique column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed
    /// in input order.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut counts = vec![0usize; nrows + 1];
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(invalid(format!(
                    "triplet ({r}, {c}) outside {nrows}x{ncols} matrix"
                )));
            }
            counts[r + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut cols = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[r];
            cols[slot] = c;
            vals[slot] = v;
            next[r] += 1;
        }

        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            scratch.clear();
            scratch.extend((counts[r]..counts[r + 1]).map(|k| (cols[k], vals[k])));
            // stable sort keeps summation order deterministic
            scratch.sort_by_key(|&(c, _)| c);
            let mut iter = scratch.iter().peekable();
            while let Some(&(c, v)) = iter.next() {
                let mut acc = v;
                while let Some(&&(c2, v2)) = iter.peek() {
                    if c2 != c {
                        break;
                    }
                    acc += v2;
                    iter.next();
                }
                col_idx.push(c);
                values.push(acc);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored entries of row `r` as `(col, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols))
            .map(|i| self.get(i, i))
            .collect()
    }

    /// All stored entries as triplets, row-major.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.nrows {
            out.extend(self.row(r).map(|(c, v)| (r, c, v)));
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.ncols, self.nrows, &t).expect("transpose indices in range")
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self + s * other`, same shape required.
    pub fn add_scaled(&self, other: &Self, s: f64) -> Result<Self> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return Err(invalid("matrix shapes differ in add_scaled"));
        }
        let mut t = self.triplets();
        t.extend(other.triplets().into_iter().map(|(r, c, v)| (r, c, s * v)));
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ncols != other.nrows {
            return Err(invalid("inner dimensions differ in matmul"));
        }
        let mut t = Vec::new();
        for r in 0..self.nrows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    t.push((r, c, a * b));
                }
            }
        }
        Self::from_triplets(self.nrows, other.ncols, &t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                d[r][c] = v;
            }
        }
        d
    }

    /// Writes `y = A x` without allocating.
    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yr = acc;
        }
    }
}

/// `y = A x`.
pub fn spmv(a: &SparseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.ncols {
        return Err(invalid(format!(
            "spmv: vector length {} does not match {} columns",
            x.len(),
            a.ncols
        )));
    }
    let mut y = vec![0.0; a.nrows];
    a.mul_into(x, &mut y);
    Ok(y)
}

/// Right preconditioner: `apply` writes `z = M^{-1} r`.
pub trait Preconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

/// Diagonal scaling; zero diagonal entries are passed through unscaled.
#[derive(Debug, Clone)]
pub struct JacobiPreconditioner {
    inv_diag: Vec<f64>,
}

impl JacobiPreconditioner {
    pub fn new(a: &SparseMatrix) -> Self {
        let inv_diag = a
            .diagonal()
            .into_iter()
            .map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
            .collect();
        Self { inv_diag }
    }
}

impl Preconditioner for JacobiPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmresConfig {
    /// Relative residual target `||Ax - b|| <= tol ||b||`.
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
    /// Use diagonal scaling when the caller does not supply a preconditioner.
    pub jacobi: bool,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            restart: 60,
            max_iter: 5000,
            jacobi: true,
        }
    }
}

impl GmresConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(invalid(format!("GMRES tolerance {} not in (0, 1)", self.tol)));
        }
        if self.restart == 0 || self.max_iter == 0 {
            return Err(invalid("GMRES restart and max_iter must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final true relative residual.
    pub residual: f64,
    /// True relative residual at the end of each restart cycle.
    pub cycle_residuals: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` with the preconditioner chosen by `config.jacobi`.
pub fn gmres_solve(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    config: &GmresConfig,
) -> Result<GmresOutcome> {
    if config.jacobi {
        gmres_solve_with(a, b, x0, config, &JacobiPreconditioner::new(a))
    } else {
        gmres_solve_with(a, b, x0, config, &IdentityPreconditioner)
    }
}

/// Right-preconditioned restarted GMRES with modified Gram-Schmidt and
/// Givens rotations.
pub fn gmres_solve_with<P: Preconditioner + ?Sized>(
    a: &SparseMatrix,
    b: &[f64],
    x0: Option<&[f64]>,
    config: &GmresConfig,
    precond: &P,
) -> Result<GmresOutcome> {
    config.validate()?;
    let n = a.nrows;
    if a.ncols != n {
        return Err(invalid("GMRES requires a square matrix"));
    }
    if b.len() != n {
        return Err(invalid(format!(
            "GMRES: rhs length {} does not match dimension {n}",
            b.len()
        )));
    }
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(GmresOutcome {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            cycle_residuals: Vec::new(),
        });
    }

    let mut x = match x0 {
        Some(g) if g.len() == n => g.to_vec(),
        Some(_) => return Err(invalid("GMRES: initial guess has wrong length")),
        None => vec![0.0; n],
    };
    let target = config.tol * bnorm;
    let m = config.restart.min(n.max(1));

    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut h = vec![vec![0.0; m]; m + 1];
    let mut cs = vec![0.0; m];
    let mut sn = vec![0.0; m];
    let mut g = vec![0.0; m + 1];
    let mut iterations = 0;
    let mut cycle_residuals = Vec::new();

    // true residual r = b - A x
    let residual_into = |x: &[f64], r: &mut [f64], w: &mut [f64]| {
        a.mul_into(x, w);
        for i in 0..n {
            r[i] = b[i] - w[i];
        }
        norm(r)
    };

    let mut rnorm = residual_into(&x, &mut r, &mut w);
    if rnorm <= target {
        return Ok(GmresOutcome {
            x,
            iterations: 0,
            residual: rnorm / bnorm,
            cycle_residuals,
        });
    }

    while iterations < config.max_iter {
        basis.clear();
        basis.push(r.iter().map(|v| v / rnorm).collect());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = rnorm;
        let mut k_used = 0;

        for k in 0..m {
            precond.apply(&basis[k], &mut z);
            a.mul_into(&z, &mut w);
            for (j, vj) in basis.iter().enumerate() {
                let hj = dot(&w, vj);
                h[j][k] = hj;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= hj * vi;
                }
            }
            let hk1 = norm(&w);
            h[k + 1][k] = hk1;

            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = h[k][k] / denom;
                sn[k] = h[k + 1][k] / denom;
            }
            h[k][k] = cs[k] * h[k][k] + sn[k] * h[k + 1][k];
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];

            iterations += 1;
            k_used = k + 1;
            if g[k + 1].abs() <= target || hk1 == 0.0 || iterations >= config.max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / hk1).collect());
        }

        // back substitution for the Krylov coefficients
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= h[i][j] * y[j];
            }
            y[i] = if h[i][i] != 0.0 { acc / h[i][i] } else { 0.0 };
        }
        w.iter_mut().for_each(|v| *v = 0.0);
        for (yj, vj) in y.iter().zip(&basis) {
            for (wi, vi) in w.iter_mut().zip(vj) {
                *wi += yj * vi;
            }
        }
        precond.apply(&w, &mut z);
        for (xi, zi) in x.iter_mut().zip(&z) {
            *xi += zi;
        }

        rnorm = residual_into(&x, &mut r, &mut w);
        cycle_residuals.push(rnorm / bnorm);
        if rnorm <= target {
            return Ok(GmresOutcome {
                x,
                iterations,
                residual: rnorm / bnorm,
                cycle_residuals,
            });
        }
    }

    Err(Error::SolverFailure {
        iterations,
        residual: rnorm / bnorm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .zip(b)
            .map(|(row, bi)| {
                let mut r = row.clone();
                r.push(*bi);
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap();
            m.swap(col, piv);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = m[i][n];
            for j in i + 1..n {
                acc -= m[i][j] * x[j];
            }
            x[i] = acc / m[i][i];
        }
        x
    }

    #[test]
    fn triplets_sum_duplicates() {
        let a = SparseMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0)])
            .unwrap();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 1), 0.0);
    }

    #[test]
    fn spmv_zero_and_identity() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(spmv(&SparseMatrix::zeros(3, 3), &x).unwrap(), vec![0.0; 3]);
        assert_eq!(spmv(&SparseMatrix::identity(3), &x).unwrap(), x);
        assert!(matches!(
            spmv(&SparseMatrix::identity(2), &x),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn spmv_matches_dense_multiply() {
        let mut seed = 7;
        let mut t = Vec::new();
        for r in 0..20 {
            for c in 0..20 {
                if (r * 7 + c * 3) % 4 != 0 {
                    t.push((r, c, lcg(&mut seed)));
                }
            }
        }
        let a = SparseMatrix::from_triplets(20, 20, &t).unwrap();
        let x: Vec<f64> = (0..20).map(|_| lcg(&mut seed)).collect();
        let y = spmv(&a, &x).unwrap();
        let d = a.to_dense();
        for r in 0..20 {
            let mut yd = 0.0;
            for c in 0..20 {
                yd += d[r][c] * x[c];
            }
            assert!((y[r] - yd).abs() <= 1e-14 * (1.0 + yd.abs()));
        }
    }

    #[test]
    fn gmres_identity_one_iteration() {
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let out = gmres_solve(&SparseMatrix::identity(4), &b, None, &GmresConfig::default())
            .unwrap();
        assert_eq!(out.iterations, 1);
        for (x, y) in out.x.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn gmres_zero_rhs() {
        let a = SparseMatrix::identity(5).scaled(3.0);
        let out = gmres_solve(&a, &[0.0; 5], None, &GmresConfig::default()).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(out.x, vec![0.0; 5]);
    }

    fn random_spd(n: usize, seed: &mut u64) -> SparseMatrix {
        let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| lcg(seed)).collect()).collect();
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let mut acc = if i == j { n as f64 * 0.5 } else { 0.0 };
                for k in 0..n {
                    acc += b[k][i] * b[k][j];
                }
                t.push((i, j, acc));
            }
        }
        SparseMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn gmres_random_spd_matches_dense_solve() {
        let mut seed = 42;
        let a = random_spd(50, &mut seed);
        let b: Vec<f64> = (0..50).map(|_| lcg(&mut seed)).collect();
        for jacobi in [false, true] {
            let cfg = GmresConfig {
                jacobi,
                restart: 20,
                ..GmresConfig::default()
            };
            let out = gmres_solve(&a, &b, None, &cfg).unwrap();
            let xd = dense_solve(&a.to_dense(), &b);
            let scale = xd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (x, y) in out.x.iter().zip(&xd) {
                assert!((x - y).abs() <= 1e-10 * scale, "{x} vs {y}");
            }
            assert!(out.residual <= 1e-12);
        }
    }

    #[test]
    fn gmres_restart_residuals_non_increasing_and_deterministic() {
        let mut seed = 3;
        let a = random_spd(60, &mut seed);
        let b: Vec<f64> = (0..60).map(|_| lcg(&mut seed)).collect();
        let cfg = GmresConfig {
            restart: 5,
            jacobi: false,
            ..GmresConfig::default()
        };
        let first = gmres_solve(&a, &b, None, &cfg).unwrap();
        assert!(first.cycle_residuals.len() > 2);
        for pair in first.cycle_residuals.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12));
        }
        let second = gmres_solve(&a, &b, None, &cfg).unwrap();
        assert_eq!(first.x, second.x);
    }

    #[test]
    fn gmres_reports_non_convergence() {
        let mut seed = 11;
        let a = random_spd(40, &mut seed);
        let b: Vec<f64> = (0..40).map(|_| lcg(&mut seed)).collect();
        let cfg = GmresConfig {
            restart: 2,
            max_iter: 3,
            jacobi: false,
            ..GmresConfig::default()
        };
        match gmres_solve(&a, &b, None, &cfg) {
            Err(Error::SolverFailure { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-12);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }
}

//! Compressed sparse row matrices and preconditioned conjugate gradients.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::{Error, Result};

const PAR_ROWS: usize = 4096;

/// Sparsity structure shared between matrices assembled on the same mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Pattern {
    /// Builds a pattern from sorted, deduplicated column lists.
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::with_capacity(rows.iter().map(Vec::len).sum());
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            cols.extend_from_slice(r);
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Position of entry `(i, j)` in the value array.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row(i);
        r.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }
}

/// Square sparse matrix in CSR layout.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub pattern: Arc<Pattern>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Dense-to-sparse conversion keeping entries with `|a| > drop`, plus the diagonal.
    pub fn from_dense(d: &DMatrix<f64>, drop: f64) -> Self {
        assert_eq!(d.nrows(), d.ncols());
        let rows: Vec<Vec<usize>> = (0..d.nrows())
            .map(|i| (0..d.ncols()).filter(|&j| i == j || d[(i, j)].abs() > drop).collect())
            .collect();
        let pattern = Arc::new(Pattern::from_rows(&rows));
        let vals = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&j| d[(i, j)]))
            .collect();
        Self { pattern, vals }
    }

    pub fn identity(n: usize) -> Self {
        let rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        Self {
            pattern: Arc::new(Pattern::from_rows(&rows)),
            vals: vec![1.0; n],
        }
    }

    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let vals = vec![0.0; pattern.nnz()];
        Self { pattern, vals }
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.slot(i, j).map_or(0.0, |s| self.vals[s])
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.pattern.row_ptr[i], self.pattern.row_ptr[i + 1]);
        (&self.pattern.cols[a..b], &self.vals[a..b])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.get(i, i)).collect()
    }

    fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(i);
        c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
    }

    /// `y = A x`
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n());
        assert_eq!(y.len(), self.n());
        if self.n() >= PAR_ROWS {
            y.par_chunks_mut(PAR_ROWS).enumerate().for_each(|(c, ys)| {
                for (k, yi) in ys.iter_mut().enumerate() {
                    *yi = self.row_dot(c * PAR_ROWS + k, x);
                }
            });
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = self.row_dot(i, x);
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n()];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `xᵀ A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        dot(x, &self.mul_vec(y))
    }

    /// Applies the matrix to every column of a dense block.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n());
        let mut y = DMatrix::zeros(x.nrows(), x.ncols());
        for k in 0..x.ncols() {
            self.mul_vec_into(x.column(k).as_slice(), y.column_mut(k).as_mut_slice());
        }
        y
    }

    pub fn same_pattern(&self, other: &CsrMatrix) -> bool {
        Arc::ptr_eq(&self.pattern, &other.pattern) || self.pattern == other.pattern
    }

    /// `self += a * other`; both matrices must share a pattern.
    pub fn add_scaled(&mut self, a: f64, other: &CsrMatrix) -> Result<()> {
        if !self.same_pattern(other) {
            return Err(Error::Dimension("matrices have different sparsity patterns".into()));
        }
        for (x, y) in self.vals.iter_mut().zip(&other.vals) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> CsrMatrix {
        CsrMatrix {
            pattern: self.pattern.clone(),
            vals: self.vals.iter().map(|v| a * v).collect(),
        }
    }

    /// Largest `|a_ij − a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self
            .vals
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for i in 0..self.n() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                let b = self.pattern.slot(j, i).map_or(f64::INFINITY, |s| self.vals[s]);
                worst = worst.max((a - b).abs());
            }
        }
        worst / scale
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                d[(i, j)] = a;
            }
        }
        d
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    None,
    #[default]
    Jacobi,
    SymmetricGaussSeidel,
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub precond: Preconditioner,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5000,
            precond: Preconditioner::Jacobi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    /// Final `‖b − Ax‖ / ‖b‖`.
    pub residual: f64,
}

struct Precond<'a> {
    a: &'a CsrMatrix,
    kind: Preconditioner,
    inv_diag: Vec<f64>,
}

impl<'a> Precond<'a> {
    fn new(a: &'a CsrMatrix, kind: Preconditioner) -> Result<Self> {
        let d = a.diagonal();
        if let Some(i) = d.iter().position(|&x| !(x > 0.0)) {
            if kind != Preconditioner::None {
                return Err(Error::NotPositiveDefinite(format!("diagonal entry {i} is {}", d[i])));
            }
        }
        let inv_diag = d.iter().map(|x| 1.0 / x).collect();
        Ok(Self { a, kind, inv_diag })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self.kind {
            Preconditioner::None => z.copy_from_slice(r),
            Preconditioner::Jacobi => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
                    *zi = ri * di;
                }
            }
            Preconditioner::SymmetricGaussSeidel => {
                // (D+L) y = r, then (D+U) z = D y.
                let n = r.len();
                for i in 0..n {
                    let (c, v) = self.a.row(i);
                    let mut s = r[i];
                    for (&j, &a) in c.iter().zip(v) {
                        if j < i {
                            s -= a * z[j];
                        }
                    }
                    z[i] = s * self.inv_diag[i];
                }
                for i in (0..n).rev() {
                    let (c, v) = self.a.row(i);
                    let mut s = 0.0;
                    for (&j, &a) in c.iter().zip(v) {
                        if j > i {
                            s += a * z[j];
                        }
                    }
                    z[i] -= s * self.inv_diag[i];
                }
            }
        }
    }
}

/// Solves `A x = b` for symmetric positive definite `A`, starting from the
/// contents of `x`.
pub fn pcg(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: &CgOptions) -> Result<CgStats> {
    let n = a.n();
    if b.len() != n || x.len() != n {
        return Err(Error::Dimension(format!(
            "system of size {n} with rhs {} and guess {}",
            b.len(),
            x.len()
        )));
    }
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return Ok(CgStats {
            iterations: 0,
            residual: 0.0,
        });
    }
    let pc = Precond::new(a, opts.precond)?;
    let mut r = a.mul_vec(x);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut res = norm2(&r) / bnorm;
    if res <= opts.tol {
        return Ok(CgStats {
            iterations: 0,
            residual: res,
        });
    }
    let mut z = vec![0.0; n];
    pc.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=opts.max_iter {
        a.mul_vec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite(format!("pᵀAp = {pap:e} at iteration {it}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm2(&r) / bnorm;
        if res <= opts.tol {
            return Ok(CgStats {
                iterations: it,
                residual: res,
            });
        }
        pc.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::CgNotConverged {
        iterations: opts.max_iter,
        residual: res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> CsrMatrix {
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| (i.saturating_sub(1)..(i + 2).min(n)).collect())
            .collect();
        let mut m = CsrMatrix::zeros(Arc::new(Pattern::from_rows(&rows)));
        for i in 0..n {
            for j in i.saturating_sub(1)..(i + 2).min(n) {
                let s = m.pattern.slot(i, j).unwrap();
                m.vals[s] = if i == j { 2.0 } else { -1.0 };
            }
        }
        m
    }

    #[test]
    fn spmv_matches_dense() {
        let a = laplace_1d(7);
        let x: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let y = a.mul_vec(&x);
        let yd = a.to_dense() * nalgebra::DVector::from_vec(x);
        for i in 0..7 {
            assert!((y[i] - yd[i]).abs() < 1e-14);
        }
        assert_eq!(a.asymmetry(), 0.0);
    }

    #[test]
    fn cg_variants_solve_tridiagonal() {
        let n = 200;
        let a = laplace_1d(n);
        let b = vec![1.0; n];
        for pc in [
            Preconditioner::None,
            Preconditioner::Jacobi,
            Preconditioner::SymmetricGaussSeidel,
        ] {
            let mut x = vec![0.0; n];
            let opts = CgOptions {
                tol: 1e-10,
                max_iter: 1000,
                precond: pc,
            };
            let st = pcg(&a, &b, &mut x, &opts).unwrap();
            assert!(st.residual <= 1e-10);
            // exact solution x_i = (i+1)(n-i)/2
            for (i, xi) in x.iter().enumerate() {
                let e = ((i + 1) * (n - i)) as f64 / 2.0;
                assert!((xi - e).abs() < 1e-6 * e, "{pc:?} {i}");
            }
        }
    }

    #[test]
    fn cg_reports_indefinite() {
        let mut a = laplace_1d(5).scaled(-1.0);
        let mut x = vec![0.0; 5];
        let r = pcg(
            &a,
            &[1.0; 5],
            &mut x,
            &CgOptions {
                precond: Preconditioner::None,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(Error::NotPositiveDefinite(_))));
        a.vals.iter_mut().for_each(|v| *v = -*v);
        assert!(pcg(&a, &[1.0; 5], &mut x, &CgOptions::default()).is_ok());
    }

    #[test]
    fn cg_iteration_cap() {
        let a = laplace_1d(100);
        let mut x = vec![0.0; 100];
        let r = pcg(
            &a,
            &[1.0; 100],
            &mut x,
            &CgOptions {
                tol: 1e-14,
                max_iter: 3,
                precond: Preconditioner::None,
            },
        );
        assert!(matches!(r, Err(Error::CgNotConverged { iterations: 3, .. })));
    }
}

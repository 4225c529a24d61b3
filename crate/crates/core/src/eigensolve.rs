//! Lowest eigenpairs of symmetric generalized problems `A u = λ B u`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sparse::CsrMatrix;
use crate::{Error, Result};

const PIVOT_TOL: f64 = 1e-12;
const DEPENDENCE_TOL: f64 = 1e-12;

/// Dense generalized symmetric eigenproblem: Cholesky of `B`, reduction to
/// standard form, symmetric tridiagonal QR. Eigenvalues ascending, vectors
/// `B`-orthonormal.
pub fn dense_generalized(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::Dimension(format!(
            "A is {}x{}, B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let bs = (b + b.transpose()) * 0.5;
    let chol = Cholesky::new(bs).ok_or_else(|| Error::NotPositiveDefinite("Cholesky of B failed".into()))?;
    let l = chol.l();
    // A pivot that keeps almost none of its column's own mass means the column
    // is numerically a combination of the earlier ones.
    if let Some((j, rel)) = (0..n)
        .map(|j| (j, l[(j, j)] * l[(j, j)] / b[(j, j)].abs()))
        .find(|&(_, rel)| !(rel > DEPENDENCE_TOL))
    {
        return Err(Error::NotPositiveDefinite(format!(
            "B is numerically singular (column {j} keeps a fraction {rel:e} of its norm)"
        )));
    }
    let linv_a = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::NotPositiveDefinite("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_a.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut y = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        y.set_column(k, &eig.eigenvectors.column(i));
    }
    let x = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::NotPositiveDefinite("singular Cholesky factor".into()))?;
    Ok((vals, x))
}

/// Modified Gram-Schmidt in the `B` inner product, applied twice.
pub fn b_orthonormalize(u: &DMatrix<f64>, b: &CsrMatrix) -> Result<DMatrix<f64>> {
    let (q, _) = b_orthonormalize_with_image(u, b)?;
    Ok(q)
}

/// As [`b_orthonormalize`], also returning `B·U'`.
pub fn b_orthonormalize_with_image(u: &DMatrix<f64>, b: &CsrMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if u.nrows() != b.n() {
        return Err(Error::Dimension(format!(
            "{} rows against operator of size {}",
            u.nrows(),
            b.n()
        )));
    }
    let mut q = u.clone();
    let mut bq = DMatrix::zeros(u.nrows(), u.ncols());
    let mut buf = vec![0.0; u.nrows()];
    for j in 0..u.ncols() {
        b.mul_vec_into(q.column(j).as_slice(), &mut buf);
        let n0 = q.column(j).dot(&DVector::from_column_slice(&buf));
        if !(n0 > 0.0) {
            if n0 < 0.0 {
                return Err(Error::NotPositiveDefinite(format!("uᵀBu = {n0:e} for column {j}")));
            }
            return Err(Error::RankDeficient { column: j });
        }
        for _pass in 0..2 {
            for k in 0..j {
                let c = bq.column(k).dot(&q.column(j));
                let qk = q.column(k).clone_owned();
                q.column_mut(j).axpy(-c, &qk, 1.0);
            }
        }
        b.mul_vec_into(q.column(j).as_slice(), &mut buf);
        let n1 = q.column(j).dot(&DVector::from_column_slice(&buf));
        if !(n1 > PIVOT_TOL * PIVOT_TOL * n0) {
            return Err(Error::RankDeficient { column: j });
        }
        let s = 1.0 / n1.sqrt();
        q.column_mut(j).scale_mut(s);
        for (dst, src) in bq.column_mut(j).iter_mut().zip(&buf) {
            *dst = s * src;
        }
    }
    Ok((q, bq))
}

/// `‖UᵀBU − I‖_max`
pub fn orthonormality_error(u: &DMatrix<f64>, b: &CsrMatrix) -> f64 {
    let g = u.transpose() * b.mul_dense(u);
    let mut e = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let t = if i == j { 1.0 } else { 0.0 };
            e = e.max((g[(i, j)] - t).abs());
        }
    }
    e
}

#[derive(Debug, Clone)]
pub struct EigenOptions {
    /// Relative residual `‖Au − λBu‖ / ‖Bu‖`.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Extra block columns beyond the wanted count; `None` picks a default.
    pub guard: Option<usize>,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            seed: 0,
            guard: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenResult {
    pub values: Vec<f64>,
    /// `B`-orthonormal columns.
    pub vectors: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EigenResult {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, &r| m.max(r))
    }
}

fn random_block(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() - 0.5)
}

/// `B`-orthonormalizes a block whose Gram matrix may be ill-conditioned by
/// discarding directions with tiny Gram eigenvalues. Returns the transform
/// `T` so that `U T` is orthonormal.
fn svqb(gram: &DMatrix<f64>, drop: f64) -> Option<DMatrix<f64>> {
    let k = gram.nrows();
    if k == 0 {
        return None;
    }
    let d: Vec<f64> = (0..k).map(|i| gram[(i, i)].max(0.0).sqrt()).collect();
    let scale = DMatrix::from_fn(k, k, |i, j| if i == j && d[i] > 0.0 { 1.0 / d[i] } else { 0.0 });
    let g = &scale * gram * &scale;
    let g = (&g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(g);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, &x| m.max(x));
    let keep: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > drop * top).collect();
    if keep.is_empty() {
        return None;
    }
    let mut t = DMatrix::zeros(k, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = 1.0 / eig.eigenvalues[i].sqrt();
        t.set_column(c, &(eig.eigenvectors.column(i) * s));
    }
    Some(scale * t)
}

fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let k: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, k);
    let mut c = 0;
    for b in blocks {
        out.columns_mut(c, b.ncols()).copy_from(b);
        c += b.ncols();
    }
    out
}

/// Lowest `nev` eigenpairs of `A u = λ B u` by block preconditioned
/// iteration with Rayleigh-Ritz on `[X, W, P]` and a diagonal preconditioner.
pub fn solve_lowest(
    a: &CsrMatrix,
    b: &CsrMatrix,
    nev: usize,
    opts: &EigenOptions,
    init: Option<&DMatrix<f64>>,
) -> Result<EigenResult> {
    let n = a.n();
    if b.n() != n {
        return Err(Error::Dimension(format!("A is {n}, B is {}", b.n())));
    }
    if nev == 0 || nev >= n {
        return Err(Error::InvalidInput(format!(
            "requested {nev} eigenpairs of a problem of size {n}"
        )));
    }
    let guard = opts.guard.unwrap_or((nev / 4).max(1)).min(n - nev);
    let m = nev + guard;

    if n <= 4 * m {
        return dense_lowest(a, b, nev);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x0 = random_block(n, m, &mut rng);
    if let Some(u0) = init {
        if u0.nrows() != n {
            return Err(Error::Dimension(format!(
                "initial block has {} rows, expected {n}",
                u0.nrows()
            )));
        }
        let k = u0.ncols().min(m);
        x0.columns_mut(0, k).copy_from(&u0.columns(0, k));
    }
    let (mut x, mut bx) = match b_orthonormalize_with_image(&x0, b) {
        Ok(r) => r,
        Err(Error::RankDeficient { .. }) => b_orthonormalize_with_image(&random_block(n, m, &mut rng), b)?,
        Err(e) => return Err(e),
    };
    let mut ax = a.mul_dense(&x);

    // Initial Rayleigh-Ritz on X.
    let (theta, c) = dense_generalized(&(x.transpose() * &ax), &(x.transpose() * &bx))?;
    x = &x * &c;
    ax = &ax * &c;
    bx = &bx * &c;
    let mut theta: Vec<f64> = theta.iter().copied().collect();

    let diag_a = a.diagonal();
    let diag_b = b.diagonal();

    let mut p: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
    let mut residuals = vec![f64::INFINITY; m];
    let mut iterations = 0;
    let mut converged = false;

    for it in 0..=opts.max_iter {
        iterations = it;
        // Residuals.
        let mut r = ax.clone();
        for k in 0..m {
            let bk = bx.column(k).clone_owned();
            r.column_mut(k).axpy(-theta[k], &bk, 1.0);
            let bn = bk.norm();
            residuals[k] = if bn > 0.0 {
                r.column(k).norm() / bn
            } else {
                f64::INFINITY
            };
        }
        if residuals[..nev].iter().all(|&res| res <= opts.tol) {
            converged = true;
            break;
        }
        if it == opts.max_iter {
            break;
        }
        let active: Vec<usize> = (0..m).filter(|&k| residuals[k] > opts.tol).collect();

        // Preconditioned residuals.
        let sigma = theta[0] - 0.5 * theta[0].abs().max(1.0);
        let mut w = select_columns(&r, &active);
        for i in 0..n {
            let d = (diag_a[i] - sigma * diag_b[i])
                .max(1e-2 * diag_a[i].abs())
                .max(f64::MIN_POSITIVE);
            for k in 0..w.ncols() {
                w[(i, k)] /= d;
            }
        }
        // W ⟂_B X, then orthonormalize.
        let coef = bx.transpose() * &w;
        w -= &x * coef;
        let bw0 = b.mul_dense(&w);
        let Some(tw) = svqb(&(w.transpose() * &bw0), 1e-14) else {
            break;
        };
        let w = &w * &tw;
        let bw = bw0 * &tw;
        let aw = a.mul_dense(&w);

        let mut blocks_s = vec![x.clone(), w.clone()];
        let mut blocks_a = vec![ax.clone(), aw.clone()];
        let mut blocks_b = vec![bx.clone(), bw.clone()];
        if let Some((pp, ap, bp)) = p.take() {
            let cx = bx.transpose() * &pp;
            let cw = bw.transpose() * &pp;
            let pp = pp - &x * &cx - &w * &cw;
            let ap = ap - &ax * &cx - &aw * &cw;
            let bp = bp - &bx * &cx - &bw * &cw;
            if let Some(tp) = svqb(&(pp.transpose() * &bp), 1e-12) {
                blocks_s.push(pp * &tp);
                blocks_a.push(ap * &tp);
                blocks_b.push(bp * &tp);
            }
        }
        let s = hcat(&blocks_s.iter().collect::<Vec<_>>());
        let as_ = hcat(&blocks_a.iter().collect::<Vec<_>>());
        let bs = hcat(&blocks_b.iter().collect::<Vec<_>>());
        let ga = s.transpose() * &as_;
        let gb = s.transpose() * &bs;
        let (vals, c) = match dense_generalized(&((&ga + ga.transpose()) * 0.5), &gb) {
            Ok(r) => r,
            Err(_) => {
                // Drop the search direction block and retry on [X, W].
                let k = x.ncols() + w.ncols();
                let (s2, a2, b2) = (
                    s.columns(0, k).into_owned(),
                    as_.columns(0, k).into_owned(),
                    bs.columns(0, k).into_owned(),
                );
                let ga = s2.transpose() * &a2;
                let (vals, c) = dense_generalized(&((&ga + ga.transpose()) * 0.5), &(s2.transpose() * &b2))?;
                x = &s2 * c.columns(0, m);
                ax = &a2 * c.columns(0, m);
                bx = &b2 * c.columns(0, m);
                theta = vals.iter().take(m).copied().collect();
                continue;
            }
        };
        let cm = c.columns(0, m).into_owned();
        let xm = x.ncols();
        let rest = s.ncols() - xm;
        let cr = select_columns(&cm.rows(xm, rest).into_owned(), &active);
        let sr = s.columns(xm, rest);
        p = Some((sr * &cr, as_.columns(xm, rest) * &cr, bs.columns(xm, rest) * &cr));
        x = &s * &cm;
        ax = &as_ * &cm;
        bx = &bs * &cm;
        theta = vals.iter().take(m).copied().collect();

        // Guard against drift of the implicit updates.
        if it % 25 == 24 {
            let (xn, bxn) = b_orthonormalize_with_image(&x, b)?;
            x = xn;
            bx = bxn;
            ax = a.mul_dense(&x);
        }
    }

    if !converged {
        log::warn!(
            "eigensolver stopped after {iterations} iterations with max residual {:e}",
            residuals[..nev].iter().fold(0.0f64, |acc, &r| acc.max(r))
        );
    }
    Ok(EigenResult {
        values: theta[..nev].to_vec(),
        vectors: x.columns(0, nev).into_owned(),
        residuals: residuals[..nev].to_vec(),
        iterations,
        converged,
    })
}

fn dense_lowest(a: &CsrMatrix, b: &CsrMatrix, nev: usize) -> Result<EigenResult> {
    let (vals, vecs) = dense_generalized(&a.to_dense(), &b.to_dense())?;
    let x = vecs.columns(0, nev).into_owned();
    let ax = a.mul_dense(&x);
    let bx = b.mul_dense(&x);
    let residuals = (0..nev)
        .map(|k| {
            let r = ax.column(k) - bx.column(k) * vals[k];
            r.norm() / bx.column(k).norm()
        })
        .collect();
    Ok(EigenResult {
        values: vals.iter().take(nev).copied().collect(),
        vectors: x,
        residuals,
        iterations: 0,
        converged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_problem() {
        let a = CsrMatrix::from_dense(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])), 0.0);
        let b = CsrMatrix::identity(3);
        let r = solve_lowest(&a, &b, 2, &EigenOptions::default(), None).unwrap();
        assert!((r.values[0] - 1.0).abs() < 1e-12 && (r.values[1] - 2.0).abs() < 1e-12);
        assert!((r.vectors[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!((r.vectors[(1, 1)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dependent_columns_rejected() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let u = DMatrix::from_columns(&[v.clone(), v * 2.0]);
        let r = b_orthonormalize(&u, &CsrMatrix::identity(4));
        assert!(matches!(r, Err(Error::RankDeficient { column: 1 })));
    }

    #[test]
    fn orthonormal_input_is_fixed() {
        let u = DMatrix::from_fn(5, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let q = b_orthonormalize(&u, &CsrMatrix::identity(5)).unwrap();
        assert!((q - u).abs().max() < 1e-15);
    }

    #[test]
    fn dense_generalized_matches_definition() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0]);
        let b = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 2.0, 0.5, 0.0, 0.5, 2.0]);
        let (l, x) = dense_generalized(&a, &b).unwrap();
        for k in 0..3 {
            let r = &a * x.column(k) - &b * x.column(k) * l[k];
            assert!(r.norm() < 1e-12);
        }
        let g = x.transpose() * &b * &x;
        assert!((g - DMatrix::identity(3, 3)).abs().max() < 1e-12);
        assert!(l[0] <= l[1] && l[1] <= l[2]);
    }
}

//! Dense, deterministic linear algebra for the analysis side of the lab.
//!
//! Everything here is 64-bit and independent of the autodiff engine. The
//! singular value decomposition is built on a cyclic Jacobi eigensolver run
//! on the Gram matrix of the smaller side, which keeps results reproducible
//! bit-for-bit at the matrix sizes the analyses use (a few hundred rows, at
//! most a few dozen columns after truncation).

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Matrix { rows, cols, values })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidInput(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Matrix::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidInput(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · self`.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut g = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..n {
                    g.values[i * n + j] += a * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g.values[i * n + j] = g.values[j * n + i];
            }
        }
        g
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let n = self.rows.max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Copy with every column shifted to zero mean.
    pub fn centered(&self) -> Matrix {
        let means = self.column_means();
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, m) in out.values[i * self.cols..(i + 1) * self.cols]
                .iter_mut()
                .zip(&means)
            {
                *v -= m;
            }
        }
        out
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        let mut out = Matrix::zeros(self.rows, k);
        for i in 0..self.rows {
            out.values[i * k..(i + 1) * k].copy_from_slice(&self.row(i)[..k]);
        }
        out
    }

    /// Matrix-vector product.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.cols + j]
    }
}

/// Thin SVD `a = u · diag(s) · vᵀ` with `r = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.v.transpose()).expect("svd factor shapes agree")
    }
}

#[derive(Debug, Clone)]
pub struct CcaResult {
    /// `d′ × d_a`; rows are canonical directions for the first set.
    pub w_a: Matrix,
    /// `d′ × d_b`.
    pub w_b: Matrix,
    /// Canonical correlations, nonincreasing.
    pub correlations: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Eigenvalues come back nonincreasing; column `j` of the returned matrix is
/// the eigenvector for eigenvalue `j`.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if a.rows != a.cols {
        return Err(Error::InvalidInput(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("sym_eig input is not finite".into()));
    }
    let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if a.max_asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::InvalidInput(format!(
            "sym_eig input is not symmetric (max |a_ij - a_ji| = {:e})",
            a.max_asymmetry()
        )));
    }
    let n = a.rows;
    let mut m = a.clone();
    // Average out any asymmetry below tolerance so rotations see an exact symmetric matrix.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);
    let total = m.frobenius_norm();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let sign = sign_of_largest(&v.column(src));
        for k in 0..n {
            vectors[(k, dst)] = sign * v[(k, src)];
        }
    }
    Ok((values, vectors))
}

/// +1 or -1 so that the entry of largest magnitude becomes positive.
fn sign_of_largest(col: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in col {
        if x.abs() > best.abs() + 1e-12 {
            best = x;
        }
    }
    if best < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Thin singular value decomposition.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::InvalidInput("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::InvalidInput("svd input is not finite".into()));
    }
    let tall = a.rows >= a.cols;
    let work = if tall { a.clone() } else { a.transpose() };
    // work is m×n with m ≥ n; work = U S Vᵀ
    let (lambda, v) = sym_eig(&work.gram())?;
    let s: Vec<f64> = lambda.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let wv = work.matmul(&v)?;
    let m = work.rows;
    let n = work.cols;
    let mut u = Matrix::zeros(m, n);
    let cutoff = s[0] * 1e-13;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut col: Vec<f64> = if s[j] > cutoff && s[j] > 0.0 {
            wv.column(j).iter().map(|x| x / s[j]).collect()
        } else {
            Vec::new()
        };
        if !col.is_empty() {
            orthogonalize(&mut col, &basis);
        }
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if col.is_empty() || norm < 1e-8 {
            col = complete_basis(&basis, m);
        } else {
            col.iter_mut().for_each(|x| *x /= norm);
        }
        for i in 0..m {
            u[(i, j)] = col[i];
        }
        basis.push(col);
    }
    Ok(if tall {
        SvdResult { u, s, v }
    } else {
        SvdResult { u: v, s, v: u }
    })
}

fn orthogonalize(col: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let d: f64 = col.iter().zip(b).map(|(x, y)| x * y).sum();
            col.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
}

/// A unit vector orthogonal to `basis`, taken from the standard basis.
fn complete_basis(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for k in 0..dim {
        let mut e = vec![0.0; dim];
        e[k] = 1.0;
        orthogonalize(&mut e, basis);
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            e.iter_mut().for_each(|x| *x /= norm);
            return e;
        }
        if best.as_ref().is_none_or(|(n, _)| norm > *n) {
            best = Some((norm, e));
        }
    }
    let (norm, mut e) = best.expect("dimension is positive");
    e.iter_mut().for_each(|x| *x /= norm);
    e
}

/// Number of leading singular directions whose squared-singular-value energy
/// reaches `threshold`. Always at least one.
pub fn retained_dims(s: &[f64], threshold: f64) -> usize {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, x) in s.iter().enumerate() {
        acc += x * x;
        if acc / total >= threshold - 1e-12 {
            return i + 1;
        }
    }
    s.len().max(1)
}

/// Projection (`cols × k`) onto the leading right singular directions that
/// carry at least `threshold` of the energy.
pub fn truncate_by_variance(svd: &SvdResult, threshold: f64) -> Result<Matrix> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "variance threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let k = retained_dims(&svd.s, threshold);
    Ok(svd.v.leading_columns(k))
}

fn covariance(x: &Matrix, y: &Matrix) -> Matrix {
    let denom = (x.rows - 1) as f64;
    let mut c = x.transpose().matmul(y).expect("row counts agree");
    c.values.iter_mut().for_each(|v| *v /= denom);
    c
}

/// `(c + ridge·mean_variance·I)^{-1/2}` for a covariance `c`.
fn inverse_sqrt(c: &Matrix, regularization: f64, side: &str) -> Result<Matrix> {
    let d = c.rows;
    let mean_var = (0..d).map(|i| c[(i, i)]).sum::<f64>() / d as f64;
    if mean_var <= 0.0 {
        return Err(Error::Degenerate(format!("{side} set has zero variance")));
    }
    let mut reg = c.clone();
    let ridge = regularization * mean_var;
    for i in 0..d {
        reg[(i, i)] += ridge;
    }
    let (lambda, v) = sym_eig(&reg)?;
    let max = lambda[0];
    let min = *lambda.last().expect("nonempty");
    if min <= 1e-12 * max {
        return Err(Error::Singular(format!(
            "{side} covariance is rank deficient (eigenvalue ratio {:e})",
            min / max
        )));
    }
    let mut scaled = v.clone();
    for i in 0..d {
        for (j, l) in lambda.iter().enumerate() {
            scaled[(i, j)] /= l.sqrt();
        }
    }
    scaled.matmul(&v.transpose())
}

/// Canonical correlation analysis between two aligned sets of row vectors.
///
/// Columns are centered here. The ridge is applied as
/// `regularization × mean variance` on each side's covariance, which keeps
/// the result invariant to a global rescaling of either set.
pub fn cca_fit(x: &Matrix, y: &Matrix, regularization: f64) -> Result<CcaResult> {
    if x.rows != y.rows {
        return Err(Error::InvalidInput(format!(
            "cca sets differ in size: {} vs {}",
            x.rows, y.rows
        )));
    }
    if x.rows < 2 {
        return Err(Error::Degenerate("cca needs at least two samples".into()));
    }
    if regularization < 0.0 {
        return Err(Error::InvalidInput("negative regularization".into()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::InvalidInput("cca input is not finite".into()));
    }
    let xc = x.centered();
    let yc = y.centered();
    let caa = covariance(&xc, &xc);
    let cbb = covariance(&yc, &yc);
    let cab = covariance(&xc, &yc);
    let wa = inverse_sqrt(&caa, regularization, "first")?;
    let wb = inverse_sqrt(&cbb, regularization, "second")?;
    let m = wa.matmul(&cab)?.matmul(&wb)?;
    let dec = svd(&m)?;
    let d_prime = x.cols.min(y.cols);
    let w_a = wa.matmul(&dec.u.leading_columns(d_prime))?.transpose();
    let w_b = wb.matmul(&dec.v.leading_columns(d_prime))?.transpose();
    let correlations = dec.s[..d_prime].iter().map(|c| c.clamp(0.0, 1.0)).collect();
    Ok(CcaResult {
        w_a,
        w_b,
        correlations,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine of a zero-norm vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub r: f64,
    /// Two-sided p-value from the t distribution with `n − 2` degrees of freedom.
    pub p_value: f64,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Pearson> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "pearson over lists of lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::Degenerate("pearson needs at least two points".into()));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let tiny = |s: f64, v: &[f64]| s <= 1e-28 * v.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    if tiny(sxx, xs) || tiny(syy, ys) {
        return Err(Error::Degenerate("pearson input has zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if df < 1.0 {
        1.0
    } else if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Pearson { r, p_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralEmbedding {
    /// `n × dims` coordinates.
    pub coords: Matrix,
    /// Eigenvalues of the normalized Laplacian used for the coordinates, ascending.
    pub eigenvalues: Vec<f64>,
    /// The similarity graph has more than one connected component.
    pub disconnected: bool,
    /// The chosen eigenvectors are not separated from the next one by a gap.
    pub degenerate: bool,
}

/// Laplacian-eigenmap coordinates from a symmetric similarity matrix.
///
/// The diagonal is ignored (no self loops). The trivial eigenvector
/// `D^{1/2}·1` is shifted to the top of the spectrum so the returned
/// coordinates always come from directions orthogonal to it, then scaled by
/// `D^{-1/2}` and sign-fixed so each column's largest entry is positive.
pub fn spectral_embedding(similarity: &Matrix, dims: usize) -> Result<SpectralEmbedding> {
    let n = similarity.rows;
    if n != similarity.cols {
        return Err(Error::InvalidInput("similarity must be square".into()));
    }
    if dims == 0 || dims >= n {
        return Err(Error::InvalidInput(format!(
            "spectral embedding needs 0 < dims < n, got dims={dims}, n={n}"
        )));
    }
    if similarity
        .values
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + 1e-12)
    {
        return Err(Error::InvalidInput(
            "similarity entries must lie in [0, 1]".into(),
        ));
    }
    if similarity.max_asymmetry() > SYMMETRY_TOL {
        return Err(Error::InvalidInput("similarity must be symmetric".into()));
    }
    let degree: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| similarity[(i, j)]).sum())
        .collect();
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let mut lap = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lap[(i, j)] = -similarity[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
            }
        }
    }
    let root_total = degree.iter().sum::<f64>().sqrt();
    if root_total > 0.0 {
        let trivial: Vec<f64> = degree.iter().map(|d| d.sqrt() / root_total).collect();
        for i in 0..n {
            for j in 0..n {
                lap[(i, j)] += 3.0 * trivial[i] * trivial[j];
            }
        }
    }
    let (values, vectors) = sym_eig(&lap)?;
    // ascending order
    let asc: Vec<usize> = (0..n).rev().collect();
    let eigenvalues: Vec<f64> = asc[..dims].iter().map(|&i| values[i]).collect();
    let mut coords = Matrix::zeros(n, dims);
    for (c, &src) in asc[..dims].iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| vectors[(i, src)] * inv_sqrt[i]).collect();
        let sign = sign_of_largest(&col);
        for i in 0..n {
            coords[(i, c)] = sign * col[i];
        }
    }
    let disconnected = degree.contains(&0.0) || values[n - 1] < 1e-10;
    let gap_tol = 1e-9;
    let mut degenerate = (1..dims).any(|c| (values[asc[c]] - values[asc[c - 1]]).abs() < gap_tol);
    if dims < n {
        degenerate |= (values[asc[dims]] - values[asc[dims - 1]]).abs() < gap_tol;
    }
    Ok(SpectralEmbedding {
        coords,
        eigenvalues,
        disconnected,
        degenerate,
    })
}

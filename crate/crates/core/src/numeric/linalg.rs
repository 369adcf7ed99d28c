//! Dense `f64` linear algebra: Cholesky log-determinants, symmetric
//! eigendecomposition and PCA.

use crate::error::{DiecError, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;

/// Row-major dense `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(DiecError::shape(format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DiecError::shape("ragged rows"));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
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
            return Err(DiecError::shape(format!(
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
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(DiecError::shape("add: dimension mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Symmetry check shared by the log-determinants; returns `mean(diag A)`.
fn symmetric_mean_diag(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(DiecError::shape(format!("cholesky of non-square {}x{}", a.rows, a.cols)));
    }
    let n = a.rows;
    let scale = a.max_abs().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-6 * scale {
                return Err(DiecError::param(format!("matrix not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { (0..n).map(|i| a[(i, i)]).sum::<f64>() / n as f64 })
}

/// `log det(A + shift I)`, or the first pivot `<= floor` and its column.
fn factor_logdet(a: &Matrix, shift: f64, floor: f64) -> std::result::Result<f64, (f64, usize)> {
    let n = a.rows;
    let mut l = vec![0.0f64; n * n];
    let mut logdet = 0.0;
    for j in 0..n {
        let mut d = a[(j, j)] + shift;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > floor) || !d.is_finite() {
            return Err((d, j));
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        logdet += djj.ln();
        for i in (j + 1)..n {
            let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Ok(2.0 * logdet)
}

/// `log det(A + jitter * mean(diag A) * I)` through a Cholesky factorization.
pub fn cholesky_logdet(a: &Matrix, jitter: f64) -> Result<f64> {
    let shift = jitter * symmetric_mean_diag(a)?;
    factor_logdet(a, shift, 0.0).map_err(|(d, j)| DiecError::Singular(format!("non-positive pivot {d:e} at column {j}")))
}

/// Unregularized `log det A` while every pivot exceeds `jitter * mean(diag A)`;
/// falls back to [`cholesky_logdet`] with the same jitter otherwise.
pub fn guarded_logdet(a: &Matrix, jitter: f64) -> Result<f64> {
    let floor = jitter * symmetric_mean_diag(a)?;
    match factor_logdet(a, 0.0, floor) {
        Ok(v) => Ok(v),
        Err(_) => cholesky_logdet(a, jitter),
    }
}

/// Eigendecomposition of a symmetric matrix (Householder tridiagonalization
/// followed by implicit QL). Eigenvalues ascend; eigenvectors are columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return Err(DiecError::shape("eigendecomposition of non-square matrix"));
    }
    let n = a.rows;
    let mut v: Vec<Vec<f64>> = a.to_rows();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    if n == 0 {
        return Ok((d, Matrix::zeros(0, 0)));
    }
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    let vecs = Matrix::from_rows(&v)?;
    Ok((d, vecs))
}

fn tred2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[n - 1][j];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[j][i] = f;
                g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[k][i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

fn tql2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 100 {
                    return Err(DiecError::Singular("eigendecomposition did not converge".into()));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for row in v.iter_mut() {
                        h = row[i + 1];
                        row[i + 1] = s * row[i] + c * h;
                        row[i] = c * row[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    // sort ascending
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for (j, &dj) in d.iter().enumerate().skip(i + 1) {
            if dj < p {
                k = j;
                p = dj;
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for row in v.iter_mut() {
                row.swap(i, k);
            }
        }
    }
    Ok(())
}

/// Fitted principal-component projection.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `D x d`, orthonormal columns ordered by decreasing variance.
    pub basis: Matrix,
    /// Sample variance (divisor `N - 1`) along each basis column.
    pub explained_variance: Vec<f64>,
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(DiecError::shape(format!("PCA fitted on {} columns, got {}", self.mean.len(), x.cols())));
        }
        let mut centered = x.clone();
        for i in 0..centered.rows() {
            for (v, m) in centered.row_mut(i).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.matmul(&self.basis)
    }

    pub fn reconstruct(&self, y: &Matrix) -> Result<Matrix> {
        let mut x = y.matmul(&self.basis.transpose())?;
        for i in 0..x.rows() {
            for (v, m) in x.row_mut(i).iter_mut().zip(&self.mean) {
                *v += m;
            }
        }
        Ok(x)
    }
}

/// Fits PCA with `d` components and returns the fit with the projected data.
///
/// Uses the `D x D` covariance when `N >= D` and the `N x N` Gram matrix
/// otherwise.
pub fn pca_fit_transform(x: &Matrix, d: usize) -> Result<(Pca, Matrix)> {
    let (n, dim) = (x.rows(), x.cols());
    if n < 2 {
        return Err(DiecError::param(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d < 1 || d > (n - 1).min(dim) {
        return Err(DiecError::param(format!("PCA dim {d} outside [1, {}]", (n - 1).min(dim))));
    }
    let mut mean = vec![0.0; dim];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut xc = x.clone();
    for i in 0..n {
        for (v, m) in xc.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let denom = (n - 1) as f64;
    let mut basis = Matrix::zeros(dim, d);
    let mut variances = Vec::with_capacity(d);
    if n >= dim {
        let cov = gram_columns(&xc);
        let (vals, vecs) = symmetric_eigen(&cov)?;
        for k in 0..d {
            let src = dim - 1 - k;
            variances.push(vals[src].max(0.0) / denom);
            for r in 0..dim {
                basis[(r, k)] = vecs[(r, src)];
            }
        }
    } else {
        let gram = xc.matmul(&xc.transpose())?;
        let (vals, vecs) = symmetric_eigen(&gram)?;
        let top = vals.last().copied().unwrap_or(0.0).max(0.0);
        for k in 0..d {
            let src = n - 1 - k;
            let lambda = vals[src].max(0.0);
            variances.push(lambda / denom);
            if lambda > 1e-12 * top.max(f64::MIN_POSITIVE) && lambda > 0.0 {
                let inv = 1.0 / lambda.sqrt();
                for r in 0..dim {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += xc[(i, r)] * vecs[(i, src)];
                    }
                    basis[(r, k)] = s * inv;
                }
            }
        }
    }
    orthonormalize_columns(&mut basis);
    for k in 0..d {
        let mut best = 0;
        for r in 0..dim {
            if basis[(r, k)].abs() > basis[(best, k)].abs() + 1e-12 {
                best = r;
            }
        }
        if basis[(best, k)] < 0.0 {
            for r in 0..dim {
                basis[(r, k)] = -basis[(r, k)];
            }
        }
    }
    let pca = Pca { mean, basis, explained_variance: variances };
    let projected = xc.matmul(&pca.basis)?;
    Ok((pca, projected))
}

/// `X^T X` for a centered data matrix.
fn gram_columns(x: &Matrix) -> Matrix {
    let dim = x.cols();
    let mut out = Matrix::zeros(dim, dim);
    for i in 0..x.rows() {
        let row = x.row(i);
        for a in 0..dim {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..dim {
                out[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..a {
            out[(a, b)] = out[(b, a)];
        }
    }
    out
}

/// Modified Gram-Schmidt; columns that vanish are replaced by the first unit
/// vector that is independent of the ones already kept.
fn orthonormalize_columns(m: &mut Matrix) {
    let (rows, cols) = (m.rows(), m.cols());
    for k in 0..cols {
        for attempt in 0..=rows {
            for j in 0..k {
                let dot: f64 = (0..rows).map(|r| m[(r, k)] * m[(r, j)]).sum();
                for r in 0..rows {
                    m[(r, k)] -= dot * m[(r, j)];
                }
            }
            let norm: f64 = (0..rows).map(|r| m[(r, k)] * m[(r, k)]).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for r in 0..rows {
                    m[(r, k)] /= norm;
                }
                break;
            }
            if attempt < rows {
                for r in 0..rows {
                    m[(r, k)] = if r == attempt { 1.0 } else { 0.0 };
                }
            }
        }
    }
}

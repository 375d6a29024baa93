//! Small dense linear algebra helpers: Cholesky factorization for SPD solves
//! and a cyclic Jacobi eigensolver for symmetric matrices. Everything here
//! operates on `ndarray` types and is sized for the ranks this crate uses
//! (R up to a few hundred).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    pub fn new(a: ArrayView2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Parameter("cholesky: matrix not square".into()));
        }
        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numeric(format!(
                    "cholesky: matrix not positive definite (pivot {j} = {d})"
                )));
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / dj;
            }
        }
        Ok(Cholesky { l })
    }

    /// Solve A x = b.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.l.nrows();
        debug_assert_eq!(b.len(), n);
        // forward: L y = b
        let mut y = b.to_owned();
        for i in 0..n {
            for k in 0..i {
                let t = y[k];
                y[i] -= self.l[(i, k)] * t;
            }
            y[i] /= self.l[(i, i)];
        }
        // backward: L^t x = y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let t = y[k];
                y[i] -= self.l[(k, i)] * t;
            }
            y[i] /= self.l[(i, i)];
        }
        y
    }

    /// log(det A) for the factored matrix.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Inverse of the factored matrix.
    pub fn inverse(&self) -> Array2<f64> {
        let n = self.l.nrows();
        let mut inv = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut e = Array1::<f64>::zeros(n);
            e[j] = 1.0;
            let col = self.solve(e.view());
            inv.column_mut(j).assign(&col);
        }
        inv
    }
}

/// Solve the SPD system A x = b in one call.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    Ok(Cholesky::new(a)?.solve(b))
}

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
pub fn eigh(a: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Parameter("eigh: matrix not square".into()));
    }
    let mut m = a.to_owned();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
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
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok((m.diag().to_owned(), v))
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Log-density of a multivariate normal with the given mean and covariance.
pub fn mvn_log_pdf(x: ArrayView1<f64>, mean: ArrayView1<f64>, cov: ArrayView2<f64>) -> Result<f64> {
    let n = x.len() as f64;
    let chol = Cholesky::new(cov)?;
    let d = &x.to_owned() - &mean;
    let sol = chol.solve(d.view());
    let quad = d.dot(&sol);
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + quad))
}

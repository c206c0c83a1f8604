//! Dense symmetric-matrix kernel.
//!
//! Everything downstream (Gram matrices, covariance blocks, the rescaled
//! matrices fed to the truncated log-det series) is a small dense symmetric
//! matrix, so a cyclic Jacobi eigensolver and a Cholesky factorization cover
//! all of the linear algebra the crate needs.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated at construction before the input is rejected.
const SYMMETRY_TOL: f64 = 1e-8;
/// Jacobi stops once the off-diagonal Frobenius norm falls below this
/// fraction of the full Frobenius norm.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// A real symmetric matrix. Entries are exactly symmetric after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Builds a symmetric matrix from a square array, replacing it with
    /// `(M + Mᵀ)/2`. Inputs whose asymmetry exceeds `1e-8` relative are
    /// rejected. Non-finite entries are accepted here and reported by the
    /// numerical routines.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || rows != cols {
            return Err(Error::dims(
                "non-empty square matrix",
                format!("{rows}x{cols}"),
            ));
        }
        if data.iter().all(|v| v.is_finite()) {
            let scale = data.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let mut worst = 0.0f64;
            for i in 0..rows {
                for j in (i + 1)..rows {
                    worst = worst.max((data[[i, j]] - data[[j, i]]).abs());
                }
            }
            if scale > 0.0 && worst > SYMMETRY_TOL * scale {
                return Err(Error::Asymmetric(worst / scale));
            }
        }
        Ok(Self::symmetrized(data))
    }

    /// Symmetrizes without the asymmetry check. Used where the input is
    /// symmetric by construction up to rounding.
    pub(crate) fn symmetrized(mut data: Array2<f64>) -> Self {
        let n = data.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (data[[i, j]] + data[[j, i]]);
                data[[i, j]] = avg;
                data[[j, i]] = avg;
            }
        }
        Self { data }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            data: Array2::eye(n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            data: Array2::zeros((n, n)),
        }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        Self {
            data: Array2::from_diag(&Array1::from(diag.to_vec())),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            data: &self.data * c,
        }
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            data: &self.data + &other.data,
        })
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            data: &self.data - &other.data,
        })
    }

    /// `Q M Qᵀ` for a square `q` of matching size.
    pub fn congruence(&self, q: &Array2<f64>) -> Result<Self> {
        if q.dim() != self.data.dim() {
            return Err(Error::dims(
                format!("{n}x{n}", n = self.dim()),
                format!("{:?}", q.dim()),
            ));
        }
        Ok(Self::symmetrized(q.dot(&self.data).dot(&q.t())))
    }

    fn check_same_dim(&self, other: &SymMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::dims(self.dim(), other.dim()));
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite)
        }
    }
}

/// Eigenvalues of a symmetric matrix, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Spectrum {
    fn from_unsorted(mut eigenvalues: Vec<f64>) -> Self {
        eigenvalues.sort_by(f64::total_cmp);
        let lambda_min = eigenvalues[0];
        let lambda_max = eigenvalues[eigenvalues.len() - 1];
        Self {
            eigenvalues,
            lambda_min,
            lambda_max,
        }
    }
}

/// Full symmetric eigendecomposition `M = Q diag(λ) Qᵀ`; column `i` of
/// `vectors` belongs to `spectrum.eigenvalues[i]`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub spectrum: Spectrum,
    pub vectors: Array2<f64>,
}

impl Eigen {
    pub fn reconstruct(&self) -> Array2<f64> {
        let lambda = Array1::from(self.spectrum.eigenvalues.clone());
        let scaled = &self.vectors * &lambda;
        scaled.dot(&self.vectors.t())
    }
}

/// Eigenvalues of `m`, ascending.
pub fn sym_eig(m: &SymMatrix) -> Result<Spectrum> {
    m.check_finite()?;
    let (values, _) = jacobi(m, false);
    Ok(Spectrum::from_unsorted(values))
}

/// Eigenvalues and eigenvectors of `m`, ascending.
pub fn sym_eigen(m: &SymMatrix) -> Result<Eigen> {
    m.check_finite()?;
    let n = m.dim();
    let (values, vectors) = jacobi(m, true);
    let vectors = vectors.expect("vectors requested");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut sorted = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        sorted.column_mut(dst).assign(&vectors.column(src));
    }
    Ok(Eigen {
        spectrum: Spectrum::from_unsorted(values),
        vectors: sorted,
    })
}

/// Cyclic Jacobi on a row-major copy. Returns unsorted eigenvalues and,
/// optionally, the accumulated rotation (eigenvectors as columns).
fn jacobi(m: &SymMatrix, want_vectors: bool) -> (Vec<f64>, Option<Array2<f64>>) {
    let n = m.dim();
    let mut a: Vec<f64> = m.data.iter().copied().collect();
    let mut v = if want_vectors {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Some(v)
    } else {
        None
    };

    let total = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = JACOBI_TOL * total;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
        }
        if off.sqrt() <= threshold || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                if let Some(v) = v.as_mut() {
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let values = (0..n).map(|i| a[i * n + i]).collect();
    let vectors = v.map(|v| Array2::from_shape_vec((n, n), v).expect("square"));
    (values, vectors)
}

/// Lower-triangular Cholesky factor `L` with `M = L Lᵀ`.
pub fn cholesky(m: &SymMatrix) -> Result<Array2<f64>> {
    m.check_finite()?;
    let n = m.dim();
    let max_diag = (0..n).fold(0.0f64, |acc, i| acc.max(m.get(i, i).abs()));
    let floor = f64::EPSILON * max_diag * n as f64;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut pivot = m.get(j, j);
        for k in 0..j {
            pivot -= l[[j, k]] * l[[j, k]];
        }
        if pivot <= floor {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: pivot,
            });
        }
        let root = pivot.sqrt();
        l[[j, j]] = root;
        for i in (j + 1)..n {
            let mut acc = m.get(i, j);
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = acc / root;
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[[i, k]] * y[k];
        }
        y[i] = acc / l[[i, i]];
    }
    y
}

/// `log det M` for symmetric positive definite `M`, via Cholesky.
pub fn logdet_exact(m: &SymMatrix) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(2.0 * l.diag().iter().map(|d| d.ln()).sum::<f64>())
}

/// Determinant of a symmetric matrix as the product of its eigenvalues.
pub fn det_sym(m: &SymMatrix) -> Result<f64> {
    Ok(sym_eig(m)?.eigenvalues.iter().product())
}

/// `(det(A+B), det(A−B))`, whose product is `det [[A, B], [B, A]]`.
pub fn block_det_factored(a: &SymMatrix, b: &SymMatrix) -> Result<(f64, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::dims(a.dim(), b.dim()));
    }
    Ok((det_sym(&a.add(b)?)?, det_sym(&a.sub(b)?)?))
}

/// Assembles the `2n × 2n` matrix `[[A, B], [B, A]]`.
pub fn assemble_block(a: &SymMatrix, b: &SymMatrix) -> Result<SymMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::dims(a.dim(), b.dim()));
    }
    let n = a.dim();
    let mut out = Array2::zeros((2 * n, 2 * n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = a.get(i, j);
            out[[i + n, j + n]] = a.get(i, j);
            out[[i, j + n]] = b.get(i, j);
            out[[i + n, j]] = b.get(i, j);
        }
    }
    Ok(SymMatrix { data: out })
}

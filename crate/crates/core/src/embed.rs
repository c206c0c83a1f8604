//! Embedding batches, per-feature standardization, and the Gram matrices
//! entering the loss.
//!
//! A batch is stored `d × m`: one column per sample, one row per feature.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::matrix::{assemble_block, logdet_exact, SymMatrix};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    data: Array2<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Raw (unnormalized) batch, `d × m`.
    pub fn new(data: Array2<f64>) -> Self {
        Self {
            data,
            normalized: false,
        }
    }

    /// Wraps data that the caller guarantees is already standardized.
    pub fn assume_normalized(data: Array2<f64>) -> Self {
        Self {
            data,
            normalized: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn batch_size(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }
}

/// What the backward pass of [`normalize_batch`] needs.
#[derive(Debug, Clone)]
pub struct NormCache {
    inv_std: Array1<f64>,
    output: Array2<f64>,
}

/// Row-wise standardization: subtract the row mean, divide by
/// `sqrt(var + eps)` with the population variance.
pub fn normalize_batch(raw: &EmbeddingBatch, eps: f64) -> Result<EmbeddingBatch> {
    Ok(normalize_with_cache(raw.view(), eps)?.0)
}

pub fn normalize_with_cache(
    raw: ArrayView2<'_, f64>,
    eps: f64,
) -> Result<(EmbeddingBatch, NormCache)> {
    let m = raw.ncols();
    if m < 2 {
        return Err(Error::BatchTooSmall(m));
    }
    let mut out = raw.to_owned();
    let mut inv_std = Array1::zeros(raw.nrows());
    for (mut row, inv) in out.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / m as f64;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / m as f64;
        *inv = 1.0 / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let batch = EmbeddingBatch::assume_normalized(out.clone());
    Ok((
        batch,
        NormCache {
            inv_std,
            output: out,
        },
    ))
}

/// Gradient with respect to the raw batch given the gradient with respect to
/// the normalized batch.
pub fn normalize_backward(cache: &NormCache, grad_out: ArrayView2<'_, f64>) -> Array2<f64> {
    let m = grad_out.ncols() as f64;
    let mut grad_in = Array2::zeros(grad_out.raw_dim());
    for (r, mut g_in) in grad_in.rows_mut().into_iter().enumerate() {
        let g = grad_out.row(r);
        let y = cache.output.row(r);
        let mean_g = g.sum() / m;
        let mean_gy = g.dot(&y) / m;
        let s = cache.inv_std[r];
        for ((gi, &gr), &yr) in g_in.iter_mut().zip(g.iter()).zip(y.iter()) {
            *gi = s * (gr - mean_g - yr * mean_gy);
        }
    }
    grad_in
}

/// The three `m × m` Gram matrices of the loss, each scaled by `1/m`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    /// `Z̄ᵀZ̄ / m`
    pub g_zz: SymMatrix,
    /// `Z̄'ᵀZ̄' / m`
    pub g_zpzp: SymMatrix,
    /// `(Z̄ᵀZ̄' + Z̄'ᵀZ̄) / (2m)`
    pub g_zzp_sym: SymMatrix,
}

impl GramSet {
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            g_zz: self.g_zz.scaled(c),
            g_zpzp: self.g_zpzp.scaled(c),
            g_zzp_sym: self.g_zzp_sym.scaled(c),
        }
    }

    /// `g_zz − g_zzp_sym`, the argument of the alignment log-det.
    pub fn align_matrix(&self) -> SymMatrix {
        self.g_zz
            .sub(&self.g_zzp_sym)
            .expect("same dimension by construction")
    }
}

/// `(P + Pᵀ) / (2m)` for `P = aᵀb`. Identical inputs give identical bits.
fn sym_gram(a: &Array2<f64>, b: &Array2<f64>) -> SymMatrix {
    let m = a.ncols();
    let p = a.t().dot(b);
    let denom = 2.0 * m as f64;
    let sym = Array2::from_shape_fn((m, m), |(i, j)| (p[[i, j]] + p[[j, i]]) / denom);
    SymMatrix::symmetrized(sym)
}

pub fn build_gram_set(z: &EmbeddingBatch, zprime: &EmbeddingBatch) -> Result<GramSet> {
    if z.data.dim() != zprime.data.dim() {
        return Err(Error::dims(
            format!("{:?}", z.data.dim()),
            format!("{:?}", zprime.data.dim()),
        ));
    }
    if !z.normalized || !zprime.normalized {
        return Err(Error::NotNormalized);
    }
    Ok(GramSet {
        g_zz: sym_gram(&z.data, &z.data),
        g_zpzp: sym_gram(&zprime.data, &zprime.data),
        g_zzp_sym: sym_gram(&z.data, &zprime.data),
    })
}

/// Feature-space covariance blocks `(C, X)` of two batches: `C` pools
/// `Z̄Z̄ᵀ` and `Z̄'Z̄'ᵀ`, `X` is the symmetrized cross-covariance, both `/m`.
pub fn pooled_cov_blocks(
    z: &EmbeddingBatch,
    zprime: &EmbeddingBatch,
) -> Result<(SymMatrix, SymMatrix)> {
    if z.data.dim() != zprime.data.dim() {
        return Err(Error::dims(
            format!("{:?}", z.data.dim()),
            format!("{:?}", zprime.data.dim()),
        ));
    }
    let m = z.batch_size() as f64;
    let c = (z.data.dot(&z.data.t()) + zprime.data.dot(&zprime.data.t())) / (2.0 * m);
    let cross = z.data.dot(&zprime.data.t());
    let x = (&cross + &cross.t()) / (2.0 * m);
    Ok((SymMatrix::symmetrized(c), SymMatrix::symmetrized(x)))
}

/// `(log det [[C, X], [X, C]], log det(C+X) + log det(C−X))`.
pub fn joint_cov_logdet_check_blocks(c: &SymMatrix, x: &SymMatrix) -> Result<(f64, f64)> {
    let joint = assemble_block(c, x)?;
    let direct = logdet_exact(&joint)?;
    let factored = logdet_exact(&c.add(x)?)? + logdet_exact(&c.sub(x)?)?;
    Ok((direct, factored))
}

/// Validates the block-determinant factorization of the joint covariance on
/// a pair of batches, with the pooled covariance on both diagonal blocks.
pub fn joint_cov_logdet_check(z: &EmbeddingBatch, zprime: &EmbeddingBatch) -> Result<(f64, f64)> {
    let (c, x) = pooled_cov_blocks(z, zprime)?;
    joint_cov_logdet_check_blocks(&c, &x)
}

/// Per-row mean and population standard deviation.
pub fn row_stats(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty batch");
    let std = x.std_axis(Axis(1), 0.0);
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::sym_eig;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(d: usize, m: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((d, m), |_| rng.random::<f64>() * 4.0 - 1.0)
    }

    #[test]
    fn batch_too_small() {
        let b = EmbeddingBatch::new(Array2::zeros((3, 1)));
        assert_eq!(normalize_batch(&b, 1e-5), Err(Error::BatchTooSmall(1)));
    }

    #[test]
    fn constant_row_becomes_zero() {
        let b = EmbeddingBatch::new(array![[3.0, 3.0, 3.0, 3.0], [1.0, 2.0, 3.0, 4.0]]);
        let n = normalize_batch(&b, 1e-5).unwrap();
        assert!(n.data().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_rows_standardized() {
        let b = EmbeddingBatch::new(random(4, 64, 1));
        let n = normalize_batch(&b, 1e-5).unwrap();
        let (mean, std) = row_stats(n.view());
        for (&mu, &s) in mean.iter().zip(std.iter()) {
            assert!(mu.abs() <= 1e-12);
            assert!((1.0 - 1e-3..=1.0).contains(&s));
        }
    }

    #[test]
    fn standardized_batch_nearly_unchanged() {
        let b = EmbeddingBatch::new(random(3, 50, 2));
        let once = normalize_batch(&b, 1e-5).unwrap();
        let twice = normalize_batch(&EmbeddingBatch::new(once.data().clone()), 1e-5).unwrap();
        let diff = (once.data() - twice.data())
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn gram_requires_normalized_and_matching() {
        let raw = EmbeddingBatch::new(random(3, 8, 3));
        assert_eq!(build_gram_set(&raw, &raw), Err(Error::NotNormalized));
        let a = EmbeddingBatch::assume_normalized(random(3, 8, 3));
        let b = EmbeddingBatch::assume_normalized(random(3, 9, 3));
        assert!(matches!(
            build_gram_set(&a, &b),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn identical_views_give_identical_grams() {
        let z = normalize_batch(&EmbeddingBatch::new(random(5, 12, 4)), 1e-5).unwrap();
        let g = build_gram_set(&z, &z.clone()).unwrap();
        assert_eq!(g.g_zz, g.g_zpzp);
        assert_eq!(g.g_zz, g.g_zzp_sym);
    }

    #[test]
    fn orthogonal_batch_has_identity_gram() {
        // rows of a scaled 4x4 Hadamard: columns orthogonal with norm² = m
        let h = array![
            [1.0, 1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, -1.0, 1.0]
        ];
        let z = EmbeddingBatch::assume_normalized(h);
        let g = build_gram_set(&z, &z).unwrap();
        assert_eq!(g.g_zz, SymMatrix::identity(4));
    }

    #[test]
    fn gram_trace_is_scaled_frobenius() {
        let z = normalize_batch(&EmbeddingBatch::new(random(6, 10, 5)), 1e-5).unwrap();
        let g = build_gram_set(&z, &z).unwrap();
        let fro2 = z.data().iter().map(|v| v * v).sum::<f64>() / 10.0;
        assert!((g.g_zz.trace() - fro2).abs() <= 1e-9 * fro2);
        assert!(sym_eig(&g.g_zz).unwrap().lambda_min >= -1e-9);
    }

    #[test]
    fn joint_check_closed_forms() {
        let d = 3;
        let c = SymMatrix::identity(d);
        let (a, b) = joint_cov_logdet_check_blocks(&c, &SymMatrix::zeros(d)).unwrap();
        assert!(a.abs() < 1e-14 && b.abs() < 1e-14);

        let x = SymMatrix::identity(d).scaled(0.5);
        let (a, b) = joint_cov_logdet_check_blocks(&c, &x).unwrap();
        let expected = d as f64 * (1.5f64.ln() + 0.5f64.ln());
        assert!((a - expected).abs() < 1e-12);
        assert!((b - expected).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let raw = random(3, 7, 6);
        let weights = random(3, 7, 7);
        let f = |x: &Array2<f64>| {
            let (n, _) = normalize_with_cache(x.view(), 1e-3).unwrap();
            (n.data() * &weights).sum()
        };
        let (_, cache) = normalize_with_cache(raw.view(), 1e-3).unwrap();
        let analytic = normalize_backward(&cache, weights.view());
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..7 {
                let mut p = raw.clone();
                p[[i, j]] += h;
                let mut q = raw.clone();
                q[[i, j]] -= h;
                let numeric = (f(&p) - f(&q)) / (2.0 * h);
                assert!((numeric - analytic[[i, j]]).abs() < 1e-7, "{i},{j}");
            }
        }
    }
}

//! Multivariate generalized Gaussian distribution (Kotz type).
//!
//! Density of an `n`-dimensional GGD with mean `μ`, dispersion `Σ` and
//! shape `β > 0`:
//!
//! ```text
//! p(x) = Φ(β, n) / det(Σ)^½ · exp(−½ [(x−μ)ᵀ Σ⁻¹ (x−μ)]^β)
//! Φ(β, n) = β Γ(n/2) / (2^{n/(2β)} π^{n/2} Γ(n/(2β)))
//! ```
//!
//! `β = 1` is the Gaussian. The quadratic form `q = (x−μ)ᵀΣ⁻¹(x−μ)` satisfies
//! `q^β ~ Gamma(n/(2β), scale 2)`, which gives an exact rejection-free sampler
//! and the moment `E[q^β] = n/β`. All mutual information values are in nats.

mod kdtree;
mod ksg;

pub use ksg::{mi_invariance_check, mi_knn_estimate, DEFAULT_K};

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::matrix::{cholesky, forward_substitute, logdet_exact, SymMatrix};

/// Parameters of a multivariate GGD.
#[derive(Debug, Clone)]
pub struct GgdSpec {
    mean: Array1<f64>,
    dispersion: SymMatrix,
    shape: f64,
    chol: Array2<f64>,
}

impl GgdSpec {
    pub fn new(mean: Array1<f64>, dispersion: SymMatrix, shape: f64) -> Result<Self> {
        if !(shape > 0.0) || !shape.is_finite() {
            return Err(Error::InvalidShape(shape));
        }
        if mean.len() != dispersion.dim() {
            return Err(Error::dims(dispersion.dim(), mean.len()));
        }
        let chol = cholesky(&dispersion)?;
        Ok(Self {
            mean,
            dispersion,
            shape,
            chol,
        })
    }

    /// Zero-mean GGD.
    pub fn centered(dispersion: SymMatrix, shape: f64) -> Result<Self> {
        let n = dispersion.dim();
        Self::new(Array1::zeros(n), dispersion, shape)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn dispersion(&self) -> &SymMatrix {
        &self.dispersion
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    /// Covariance implied by the dispersion: `Σ · covariance_scale(n, β)`.
    pub fn covariance(&self) -> SymMatrix {
        self.dispersion
            .scaled(covariance_scale(self.dim(), self.shape))
    }

    /// Quadratic form `(x−μ)ᵀ Σ⁻¹ (x−μ)`.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dims(self.dim(), x.len()));
        }
        let centered: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect();
        let y = forward_substitute(&self.chol, &centered);
        Ok(y.iter().map(|v| v * v).sum())
    }
}

/// `log Φ(β, n)`, the log normalizing constant of the GGD density.
pub fn log_normalizer(shape: f64, n: usize) -> f64 {
    let n = n as f64;
    shape.ln() + ln_gamma(n / 2.0)
        - (n / (2.0 * shape)) * std::f64::consts::LN_2
        - (n / 2.0) * std::f64::consts::PI.ln()
        - ln_gamma(n / (2.0 * shape))
}

/// Ratio between covariance and dispersion:
/// `C = Σ · 2^{1/β} Γ((n+2)/(2β)) / (n Γ(n/(2β)))`.
pub fn covariance_scale(n: usize, shape: f64) -> f64 {
    let nf = n as f64;
    let log = std::f64::consts::LN_2 / shape + ln_gamma((nf + 2.0) / (2.0 * shape))
        - nf.ln()
        - ln_gamma(nf / (2.0 * shape));
    log.exp()
}

/// `E[q^β]` for the quadratic form of an `n`-dimensional GGD, equal to `n/β`.
/// For the `2n`-dimensional joint of two `n`-dimensional blocks this is `2n/β`.
pub fn radial_moment(n: usize, shape: f64) -> f64 {
    n as f64 / shape
}

/// Shape of the Gamma law (scale 2) followed by `q^β`.
pub fn radial_gamma_shape(n: usize, shape: f64) -> f64 {
    n as f64 / (2.0 * shape)
}

/// Draws `count` samples (one per row) as `μ + √q · L u` with `u` uniform on
/// the unit sphere, `L` the Cholesky factor of `Σ`, and `q = t^{1/β}` for
/// `t ~ Gamma(n/(2β), scale 2)`.
pub fn ggd_sample<R: Rng + ?Sized>(spec: &GgdSpec, count: usize, rng: &mut R) -> Array2<f64> {
    let n = spec.dim();
    let radial = Gamma::new(radial_gamma_shape(n, spec.shape), 2.0)
        .expect("shape validated at construction");
    let mut out = Array2::zeros((count, n));
    let mut u = vec![0.0; n];
    for mut row in out.rows_mut() {
        let norm = loop {
            for v in u.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                break norm;
            }
        };
        let t: f64 = radial.sample(rng);
        let radius = t.powf(1.0 / spec.shape).sqrt() / norm;
        for i in 0..n {
            let mut acc = 0.0;
            for (k, uk) in u.iter().enumerate().take(i + 1) {
                acc += spec.chol[[i, k]] * uk;
            }
            row[i] = spec.mean[i] + radius * acc;
        }
    }
    out
}

/// Log density at `x`.
pub fn ggd_logpdf(spec: &GgdSpec, x: &[f64]) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let q = spec.quadratic_form(x)?;
    let logdet = logdet_exact(&spec.dispersion)?;
    Ok(log_normalizer(spec.shape, spec.dim()) - 0.5 * logdet - 0.5 * q.powf(spec.shape))
}

/// A joint GGD over `Z̃ = [Z; Z']` with `Z, Z'` of dimension `d` each.
#[derive(Debug, Clone)]
pub struct JointGgdSpec {
    block_dim: usize,
    joint: GgdSpec,
}

impl JointGgdSpec {
    pub fn new(block_dim: usize, joint: GgdSpec) -> Result<Self> {
        if joint.dim() != 2 * block_dim || block_dim == 0 {
            return Err(Error::dims(2 * block_dim, joint.dim()));
        }
        Ok(Self { block_dim, joint })
    }

    /// Assembles the joint dispersion from its blocks `Σ_ZZ`, `Σ_Z'Z'`, `Σ_ZZ'`.
    pub fn from_blocks(
        zz: &SymMatrix,
        zpzp: &SymMatrix,
        cross: &Array2<f64>,
        shape: f64,
    ) -> Result<Self> {
        let d = zz.dim();
        if zpzp.dim() != d || cross.dim() != (d, d) {
            return Err(Error::dims(
                format!("{d}x{d} blocks"),
                format!("{}, {:?}", zpzp.dim(), cross.dim()),
            ));
        }
        let mut joint = Array2::zeros((2 * d, 2 * d));
        joint.slice_mut(s![..d, ..d]).assign(zz.as_array());
        joint.slice_mut(s![d.., d..]).assign(zpzp.as_array());
        joint.slice_mut(s![..d, d..]).assign(cross);
        joint.slice_mut(s![d.., ..d]).assign(&cross.t());
        let joint = GgdSpec::centered(SymMatrix::new(joint)?, shape)?;
        Self::new(d, joint)
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn joint(&self) -> &GgdSpec {
        &self.joint
    }

    /// The same dispersion with a different shape parameter.
    pub fn with_shape(&self, shape: f64) -> Result<Self> {
        let joint = GgdSpec::new(
            self.joint.mean.clone(),
            self.joint.dispersion.clone(),
            shape,
        )?;
        Self::new(self.block_dim, joint)
    }

    pub fn block_zz(&self) -> SymMatrix {
        self.diag_block(0)
    }

    pub fn block_zpzp(&self) -> SymMatrix {
        self.diag_block(self.block_dim)
    }

    pub fn block_cross(&self) -> Array2<f64> {
        let d = self.block_dim;
        self.joint
            .dispersion
            .as_array()
            .slice(s![..d, d..])
            .to_owned()
    }

    fn diag_block(&self, offset: usize) -> SymMatrix {
        let d = self.block_dim;
        let block = self
            .joint
            .dispersion
            .as_array()
            .slice(s![offset..offset + d, offset..offset + d])
            .to_owned();
        SymMatrix::symmetrized(block)
    }

    /// Splits joint samples (rows) into the `Z` and `Z'` column blocks.
    pub fn split_samples(&self, samples: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.block_dim;
        (
            samples.slice(s![.., ..d]).to_owned(),
            samples.slice(s![.., d..]).to_owned(),
        )
    }
}

/// `½ log[det Σ_ZZ · det Σ_Z'Z' / det Σ_Z̃Z̃]` in nats. Never reads the shape
/// parameter; the value is the same for dispersion or covariance blocks.
pub fn mi_closed_form(joint: &JointGgdSpec) -> Result<f64> {
    let full = logdet_exact(joint.joint.dispersion())?;
    let zz = logdet_exact(&joint.block_zz())?;
    let zpzp = logdet_exact(&joint.block_zpzp())?;
    Ok(0.5 * (zz + zpzp - full))
}

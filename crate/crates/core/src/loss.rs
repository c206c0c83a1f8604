//! The log-determinant mutual-information loss.
//!
//! ```text
//! L = logdet(G_zz − G_zz'^sym) − logdet(G_zz) − logdet(G_z'z')
//! ```
//!
//! Each log-det is evaluated on a spectrally rescaled matrix
//! `M̃ = (M − μ_λ I)/α + I` (with `μ_λ = (λ_min + λ_max)/2` and
//! `α = β(μ_λ − λ_min)` taken from EMA-tracked extremes), through the
//! truncated series `tr Σ_{k=1..p} (−1)^{k+1} (M̃ − I)^k / k`.
//!
//! `μ_λ` and `α` are constants for differentiation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embed::{build_gram_set, EmbeddingBatch, GramSet};
use crate::error::{Error, Result};
use crate::matrix::{sym_eig, SymMatrix};

/// Spread below which the tracked spectrum counts as degenerate.
const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RescaleConfig {
    /// Rescale parameter; eigenvalues of `M̃` lie in `[1 − 1/β, 1 + 1/β]`.
    pub rescale_beta: f64,
    pub taylor_order: usize,
    /// Batches between eigenvalue refreshes.
    pub track_interval: u64,
    /// EMA coefficient applied at each refresh.
    pub ema_rho: f64,
    /// Track one pair of extremes (from `G_zz`) for all three terms.
    pub shared_tracking: bool,
    /// Let `rescale` seed an uninitialized state from exact extremes.
    pub lazy_init: bool,
}

impl Default for RescaleConfig {
    fn default() -> Self {
        Self {
            rescale_beta: 5.0,
            taylor_order: 4,
            track_interval: 100,
            ema_rho: 0.99,
            shared_tracking: false,
            lazy_init: true,
        }
    }
}

impl RescaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rescale_beta > 1.0) || !self.rescale_beta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "rescale_beta = {} must be > 1: the log-det series converges only when \
                 ||M~ - I|| <= 1/beta < 1",
                self.rescale_beta
            )));
        }
        if self.taylor_order < 1 {
            return Err(Error::InvalidConfig("taylor_order must be >= 1".into()));
        }
        if self.track_interval < 1 {
            return Err(Error::InvalidConfig("track_interval must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_rho) {
            return Err(Error::InvalidConfig(format!(
                "ema_rho = {} must lie in [0, 1)",
                self.ema_rho
            )));
        }
        Ok(())
    }
}

/// EMA-tracked extreme eigenvalues of one log-det argument.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RescaleState {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub batch_counter: u64,
    pub initialized: bool,
}

impl RescaleState {
    /// Advances the batch counter and refreshes the tracked extremes on the
    /// first call and on every batch whose 1-based index is `1 mod interval`.
    /// Returns whether a refresh happened.
    pub fn update(&mut self, m: &SymMatrix, cfg: &RescaleConfig) -> Result<bool> {
        let refresh = !self.initialized || self.batch_counter.is_multiple_of(cfg.track_interval);
        self.batch_counter += 1;
        if !refresh {
            return Ok(false);
        }
        let spectrum = sym_eig(m)?;
        if self.initialized {
            let rho = cfg.ema_rho;
            self.lambda_min = rho * self.lambda_min + (1.0 - rho) * spectrum.lambda_min;
            self.lambda_max = rho * self.lambda_max + (1.0 - rho) * spectrum.lambda_max;
        } else {
            self.lambda_min = spectrum.lambda_min;
            self.lambda_max = spectrum.lambda_max;
            self.initialized = true;
        }
        Ok(true)
    }

    /// State holding the exact extremes of `m`.
    pub fn exact(m: &SymMatrix) -> Result<Self> {
        let s = sym_eig(m)?;
        Ok(Self {
            lambda_min: s.lambda_min,
            lambda_max: s.lambda_max,
            batch_counter: 0,
            initialized: true,
        })
    }
}

pub fn update_rescale_state(
    state: &RescaleState,
    m: &SymMatrix,
    cfg: &RescaleConfig,
) -> Result<RescaleState> {
    let mut next = *state;
    next.update(m, cfg)?;
    Ok(next)
}

/// The affine map `M ↦ (M − shift·I)/alpha + I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescaling {
    pub shift: f64,
    pub alpha: f64,
}

impl Rescaling {
    pub fn from_state(state: &RescaleState, cfg: &RescaleConfig, center: bool) -> Self {
        let mu = 0.5 * (state.lambda_max + state.lambda_min);
        let mut alpha = cfg.rescale_beta * (mu - state.lambda_min);
        if state.lambda_max - state.lambda_min < DEGENERATE_SPREAD {
            alpha = alpha.max(DEGENERATE_SPREAD * cfg.rescale_beta);
        }
        Self {
            shift: if center { mu } else { 0.0 },
            alpha,
        }
    }

    pub fn apply(&self, m: &SymMatrix) -> SymMatrix {
        let n = m.dim();
        let mut out = m.as_array() - &(Array2::<f64>::eye(n) * self.shift);
        out /= self.alpha;
        out += &Array2::<f64>::eye(n);
        SymMatrix::symmetrized(out)
    }
}

fn resolve_state(state: &RescaleState, m: &SymMatrix, cfg: &RescaleConfig) -> Result<RescaleState> {
    if state.initialized {
        Ok(*state)
    } else if cfg.lazy_init {
        RescaleState::exact(m)
    } else {
        Err(Error::Uninitialized)
    }
}

/// `M̃ = (M − μ_λ I)/α + I` using the tracked extremes in `state`.
pub fn rescale(m: &SymMatrix, state: &RescaleState, cfg: &RescaleConfig) -> Result<SymMatrix> {
    let state = resolve_state(state, m, cfg)?;
    Ok(Rescaling::from_state(&state, cfg, true).apply(m))
}

/// `M̃ = M/α + I`, the rescaling without the `μ_λ` shift.
pub fn rescale_uncentered(
    m: &SymMatrix,
    state: &RescaleState,
    cfg: &RescaleConfig,
) -> Result<SymMatrix> {
    let state = resolve_state(state, m, cfg)?;
    Ok(Rescaling::from_state(&state, cfg, false).apply(m))
}

/// Truncated series value and its derivative with respect to `M̃`:
/// `Σ_{k=1..p} (−1)^{k+1} X^{k−1}` with `X = M̃ − I`.
fn taylor_with_grad(m_tilde: &SymMatrix, p: usize) -> (f64, Array2<f64>) {
    let n = m_tilde.dim();
    let eye = Array2::<f64>::eye(n);
    let x = m_tilde.as_array() - &eye;
    let mut power = eye; // X^{k-1}
    let mut grad = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    for k in 1..=p {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        grad.scaled_add(sign, &power);
        power = power.dot(&x);
        value += sign * power.diag().sum() / k as f64;
    }
    (value, grad)
}

/// `tr Σ_{k=1..p} (−1)^{k+1} (M̃ − I)^k / k`. Converges to `log det M̃` as
/// `p → ∞` when the spectral radius of `M̃ − I` is below one.
pub fn logdet_taylor(m_tilde: &SymMatrix, p: usize) -> f64 {
    let n = m_tilde.dim();
    let x = m_tilde.as_array() - &Array2::<f64>::eye(n);
    let mut power = x.clone();
    let mut value = 0.0;
    for k in 1..=p {
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        value += sign * power.diag().sum() / k as f64;
        if k < p {
            power = power.dot(&x);
        }
    }
    value
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Full,
    NoLogdetZ,
    NoLogdetZprime,
    NoBoth,
    MseAlign,
    NoMuLambda,
}

impl LossVariant {
    pub const ALL: [LossVariant; 6] = [
        LossVariant::Full,
        LossVariant::NoLogdetZ,
        LossVariant::NoLogdetZprime,
        LossVariant::NoBoth,
        LossVariant::MseAlign,
        LossVariant::NoMuLambda,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Full => "full",
            LossVariant::NoLogdetZ => "no_logdet_z",
            LossVariant::NoLogdetZprime => "no_logdet_zprime",
            LossVariant::NoBoth => "no_both",
            LossVariant::MseAlign => "mse_align",
            LossVariant::NoMuLambda => "no_mu_lambda",
        }
    }

    fn keeps_z(&self) -> bool {
        !matches!(self, LossVariant::NoLogdetZ | LossVariant::NoBoth)
    }

    fn keeps_zprime(&self) -> bool {
        !matches!(self, LossVariant::NoLogdetZprime | LossVariant::NoBoth)
    }

    fn centered(&self) -> bool {
        !matches!(self, LossVariant::NoMuLambda)
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One tracked state per log-det term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RescaleStates {
    pub align: RescaleState,
    pub z: RescaleState,
    pub zprime: RescaleState,
}

impl RescaleStates {
    pub fn update(&mut self, gram: &GramSet, cfg: &RescaleConfig) -> Result<()> {
        if cfg.shared_tracking {
            self.z.update(&gram.g_zz, cfg)?;
            self.align = self.z;
            self.zprime = self.z;
        } else {
            self.align.update(&gram.align_matrix(), cfg)?;
            self.z.update(&gram.g_zz, cfg)?;
            self.zprime.update(&gram.g_zpzp, cfg)?;
        }
        Ok(())
    }

    /// States holding the exact extremes of each term's matrix.
    pub fn exact(gram: &GramSet) -> Result<Self> {
        Ok(Self {
            align: RescaleState::exact(&gram.align_matrix())?,
            z: RescaleState::exact(&gram.g_zz)?,
            zprime: RescaleState::exact(&gram.g_zpzp)?,
        })
    }
}

/// Loss terms and gradients with respect to both normalized batches.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub term_align: f64,
    pub term_z: f64,
    pub term_zprime: f64,
    pub total: f64,
    pub grad_z: Array2<f64>,
    pub grad_zprime: Array2<f64>,
}

impl LossBreakdown {
    pub fn check_finite(&self) -> Result<()> {
        let checks: [(&'static str, bool); 6] = [
            ("align", self.term_align.is_finite()),
            ("logdet_z", self.term_z.is_finite()),
            ("logdet_zprime", self.term_zprime.is_finite()),
            ("total", self.total.is_finite()),
            ("grad_z", self.grad_z.iter().all(|v| v.is_finite())),
            (
                "grad_zprime",
                self.grad_zprime.iter().all(|v| v.is_finite()),
            ),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((term, _)) => Err(Error::NonFiniteLoss { term }),
            None => Ok(()),
        }
    }
}

/// Rescaled truncated log-det of `m` and its gradient with respect to `m`.
fn logdet_term(
    m: &SymMatrix,
    state: &RescaleState,
    cfg: &RescaleConfig,
    centered: bool,
) -> Result<(f64, Array2<f64>)> {
    let state = resolve_state(state, m, cfg)?;
    let rescaling = Rescaling::from_state(&state, cfg, centered);
    let (value, mut grad) = taylor_with_grad(&rescaling.apply(m), cfg.taylor_order);
    grad /= rescaling.alpha;
    Ok((value, grad))
}

/// Evaluates the loss on a pair of normalized batches. `states` must already
/// reflect this batch (see [`RescaleStates::update`]).
pub fn mmi_loss(
    z: &EmbeddingBatch,
    zprime: &EmbeddingBatch,
    states: &RescaleStates,
    cfg: &RescaleConfig,
    variant: LossVariant,
) -> Result<LossBreakdown> {
    let gram = build_gram_set(z, zprime)?;
    mmi_loss_from_gram(z, zprime, &gram, states, cfg, variant)
}

/// [`mmi_loss`] with a precomputed Gram set.
pub fn mmi_loss_from_gram(
    z: &EmbeddingBatch,
    zprime: &EmbeddingBatch,
    gram: &GramSet,
    states: &RescaleStates,
    cfg: &RescaleConfig,
    variant: LossVariant,
) -> Result<LossBreakdown> {
    let zb = z.data();
    let zp = zprime.data();
    let m = z.batch_size() as f64;
    let centered = variant.centered();

    let mut grad_z = Array2::<f64>::zeros(zb.raw_dim());
    let mut grad_zprime = Array2::<f64>::zeros(zp.raw_dim());

    let term_align = if variant == LossVariant::MseAlign {
        let diff = zb - zp;
        grad_z.scaled_add(2.0 / m, &diff);
        grad_zprime.scaled_add(-2.0 / m, &diff);
        diff.iter().map(|v| v * v).sum::<f64>() / m
    } else {
        let (value, g) = logdet_term(&gram.align_matrix(), &states.align, cfg, centered)?;
        let zg = zb.dot(&g);
        let zpg = zp.dot(&g);
        grad_z.scaled_add(2.0 / m, &zg);
        grad_z.scaled_add(-1.0 / m, &zpg);
        grad_zprime.scaled_add(-1.0 / m, &zg);
        value
    };

    let term_z = if variant.keeps_z() {
        let (value, g) = logdet_term(&gram.g_zz, &states.z, cfg, centered)?;
        grad_z.scaled_add(-2.0 / m, &zb.dot(&g));
        value
    } else {
        0.0
    };

    let term_zprime = if variant.keeps_zprime() {
        let (value, g) = logdet_term(&gram.g_zpzp, &states.zprime, cfg, centered)?;
        grad_zprime.scaled_add(-2.0 / m, &zp.dot(&g));
        value
    } else {
        0.0
    };

    Ok(LossBreakdown {
        term_align,
        term_z,
        term_zprime,
        total: term_align - term_z - term_zprime,
        grad_z,
        grad_zprime,
    })
}

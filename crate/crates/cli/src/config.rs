use std::fmt;
use std::path::{Path, PathBuf};

use mmi_ssl_core::eval::ProbeConfig;
use mmi_ssl_core::siamese::{MlpSpec, TrainConfig};
use mmi_ssl_core::synth::{AugmentSpec, DatasetSpec};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "MMI_SSL_SEED";

/// Any problem with the configuration itself (exit code 2).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            knn_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Record per-step wall-clock milliseconds. Off by default so that the
    /// CSV is a pure function of config and seed; the column then holds 0.
    pub wall_clock: bool,
    /// Write an SVG of the loss curves next to the CSV.
    pub plot: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            wall_clock: false,
            plot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiValidateConfig {
    pub block_dims: Vec<usize>,
    pub shapes: Vec<f64>,
    /// Random joint dispersions drawn per block dimension.
    pub specs_per_dim: usize,
    pub samples: usize,
    pub k: usize,
    pub tolerance: f64,
    pub sampler_samples: usize,
    pub moment_rel_tol: f64,
    pub covariance_rel_tol: f64,
    pub invariance_block_dims: Vec<usize>,
    pub invariance_samples: usize,
    pub invariance_tolerance: f64,
}

impl Default for MiValidateConfig {
    fn default() -> Self {
        Self {
            block_dims: vec![1, 2, 4],
            shapes: vec![0.5, 1.0, 2.0, 3.0],
            specs_per_dim: 1,
            samples: 100_000,
            k: 5,
            tolerance: 0.05,
            sampler_samples: 100_000,
            moment_rel_tol: 0.02,
            covariance_rel_tol: 0.05,
            invariance_block_dims: vec![1, 2],
            invariance_samples: 50_000,
            invariance_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogdetBenchConfig {
    pub sizes: Vec<usize>,
    /// Eigenvalue ranges `[lo, hi]` of the test matrices.
    pub spectra: Vec<[f64; 2]>,
    pub matrices_per_case: usize,
    pub taylor_orders: Vec<usize>,
}

impl Default for LogdetBenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![8, 32, 64],
            spectra: vec![[0.5, 1.5], [0.01, 1.0], [1e-4, 10.0]],
            matrices_per_case: 10,
            taylor_orders: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub widths: Vec<usize>,
    pub batch_size: usize,
    pub step: f64,
    pub loss_tolerance: f64,
    pub param_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            widths: vec![6, 8, 5],
            batch_size: 12,
            step: 1e-6,
            loss_tolerance: 1e-5,
            param_tolerance: 1e-4,
        }
    }
}

/// Everything one invocation needs. `seed` drives initialization, batching
/// and augmentation; the dataset has its own `dataset.seed` so that runs with
/// different seeds share the same data. `train.seed` mirrors `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub augment: AugmentSpec,
    pub model: MlpSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub metrics: MetricsConfig,
    pub mi_validate: MiValidateConfig,
    pub logdet_bench: LogdetBenchConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            dataset: DatasetSpec::default(),
            augment: AugmentSpec::default(),
            model: MlpSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            metrics: MetricsConfig::default(),
            mi_validate: MiValidateConfig::default(),
            logdet_bench: LogdetBenchConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    /// Reads, applies the seed overrides (`flag` over `MMI_SSL_SEED` over the
    /// file) and validates.
    pub fn load(path: &Path, seed_flag: Option<u64>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("reading {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let env = std::env::var(SEED_ENV).ok();
        if let Some(seed) = resolve_seed(seed_flag, env.as_deref())? {
            cfg.set_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = |e: mmi_ssl_core::Error| invalid(e.to_string());
        self.dataset.validate().map_err(core)?;
        self.augment.validate().map_err(core)?;
        self.model.validate().map_err(core)?;
        self.train.validate().map_err(core)?;
        if self.model.input_dim() != self.dataset.dim {
            return Err(invalid(format!(
                "model input width {} does not match dataset dim {}",
                self.model.input_dim(),
                self.dataset.dim
            )));
        }
        let n = self.dataset.num_classes * self.dataset.samples_per_class;
        if self.train.batch_size > n {
            return Err(invalid(format!(
                "batch_size {} exceeds dataset size {n}",
                self.train.batch_size
            )));
        }
        let p = &self.eval.probe;
        if !(p.split_ratio > 0.0 && p.split_ratio < 1.0) {
            return Err(invalid(format!(
                "probe split_ratio {} must lie in (0, 1)",
                p.split_ratio
            )));
        }
        if self.eval.knn_k < 1 {
            return Err(invalid("knn_k must be >= 1"));
        }
        let mi = &self.mi_validate;
        if mi.block_dims.contains(&0)
            || mi.invariance_block_dims.contains(&0)
            || mi.shapes.iter().any(|&b| !(b > 0.0))
        {
            return Err(invalid(
                "mi_validate block dims must be >= 1 and shapes > 0",
            ));
        }
        if mi.k < 1 || mi.samples <= mi.k || mi.invariance_samples <= mi.k {
            return Err(invalid("mi_validate sample counts must exceed k >= 1"));
        }
        let lb = &self.logdet_bench;
        if lb.sizes.contains(&0) || lb.taylor_orders.contains(&0) {
            return Err(invalid("logdet_bench sizes and taylor orders must be >= 1"));
        }
        if lb.spectra.iter().any(|[lo, hi]| !(*lo > 0.0 && lo <= hi)) {
            return Err(invalid("logdet_bench spectra need 0 < lo <= hi"));
        }
        let gc = &self.grad_check;
        if gc.widths.len() < 3 || gc.widths.contains(&0) || gc.batch_size < 2 || !(gc.step > 0.0) {
            return Err(invalid(
                "grad_check needs >= 1 hidden layer, batch >= 2, step > 0",
            ));
        }
        Ok(())
    }
}

/// Seed precedence: command-line flag, then environment, then file.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>) -> Result<Option<u64>, ConfigError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match env {
        Some(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        None => Ok(None),
    }
}

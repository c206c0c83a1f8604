use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use mmi_ssl_core::embed::{build_gram_set, normalize_batch, EmbeddingBatch};
use mmi_ssl_core::ggd::{
    ggd_sample, mi_closed_form, mi_invariance_check, mi_knn_estimate, radial_moment, GgdSpec,
    JointGgdSpec,
};
use mmi_ssl_core::loss::{
    logdet_taylor, mmi_loss, rescale, LossVariant, RescaleState, RescaleStates,
};
use mmi_ssl_core::matrix::{logdet_exact, sym_eigen, SymMatrix};
use mmi_ssl_core::siamese::{
    batch_gradients, encode, load_checkpoint, save_checkpoint, EncoderState, MlpSpec,
};
use mmi_ssl_core::synth::{make_dataset, Dataset};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::plot::loss_svg;
use crate::train::{evaluate, run_training, write_metrics_csv, EvalReport, MetricsRow};

pub struct RunOptions {
    pub out_dir: PathBuf,
    pub quiet: bool,
}

impl RunOptions {
    pub fn new(cfg: &ExperimentConfig, out: Option<PathBuf>, quiet: bool) -> Self {
        Self {
            out_dir: out.unwrap_or_else(|| cfg.output_dir.clone()),
            quiet,
        }
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn prepare(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

pub fn dataset_for(cfg: &ExperimentConfig) -> Dataset {
    make_dataset(
        &cfg.dataset,
        &mut ChaCha8Rng::seed_from_u64(cfg.dataset.seed),
    )
}

pub fn dataset_sha256(dataset: &Dataset) -> String {
    format!("{:x}", Sha256::digest(dataset.to_bytes()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub variant: LossVariant,
    pub seed: u64,
    pub steps: u64,
    pub dataset_sha256: String,
    pub final_loss: Option<FinalLoss>,
    #[serde(flatten)]
    pub eval: EvalReport,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FinalLoss {
    pub total: f64,
    pub align: f64,
    pub logdet_z: f64,
    pub logdet_zprime: f64,
}

impl From<&MetricsRow> for FinalLoss {
    fn from(r: &MetricsRow) -> Self {
        Self {
            total: r.loss_total,
            align: r.loss_align,
            logdet_z: r.loss_z,
            logdet_zprime: r.loss_zp,
        }
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub rows: Vec<MetricsRow>,
    pub state: EncoderState,
}

/// Trains and evaluates without touching the filesystem.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    opts: &RunOptions,
) -> mmi_ssl_core::Result<TrainOutcome> {
    let every = (cfg.train.epochs / 10).max(1);
    let run = run_training(cfg, dataset, |row| {
        if row.step % 10 == 0 && row.epoch % every == 0 {
            opts.say(format!(
                "epoch {:>3} step {:>5} lr {:.4} loss {:.5} (align {:.5}, z {:.5}, z' {:.5})",
                row.epoch,
                row.step,
                row.lr,
                row.loss_total,
                row.loss_align,
                row.loss_z,
                row.loss_zp
            ));
        }
    })?;
    let eval = evaluate(cfg, &run.state, dataset)?;
    let report = TrainReport {
        variant: cfg.train.variant,
        seed: cfg.seed,
        steps: run.state.step,
        dataset_sha256: dataset_sha256(dataset),
        final_loss: run.rows.last().map(FinalLoss::from),
        eval,
    };
    Ok(TrainOutcome {
        report,
        rows: run.rows,
        state: run.state,
    })
}

/// Writes `metrics.csv`, `checkpoint.bin` (+ `.json` sidecar),
/// `report.json` and optionally `loss.svg`.
pub fn run_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<TrainReport> {
    let dir = opts.prepare()?;
    let dataset = dataset_for(cfg);
    opts.say(format!(
        "training {} on {} samples (dim {}), {} epochs",
        cfg.train.variant,
        dataset.len(),
        dataset.dim(),
        cfg.train.epochs
    ));
    let out = train_and_evaluate(cfg, &dataset, opts)?;
    let mut csv_bytes = Vec::new();
    write_metrics_csv(&mut csv_bytes, &out.rows)?;
    fs::write(dir.join("metrics.csv"), csv_bytes)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &out.state, &cfg.train)?;
    write_json(&dir.join("report.json"), &out.report)?;
    write_json(&dir.join("config.json"), cfg)?;
    if cfg.metrics.plot {
        fs::write(dir.join("loss.svg"), loss_svg(&out.rows))?;
    }
    opts.say(format!(
        "probe top-1 {:.4}, k-NN {:.4}, effective rank {:.3}, top eigen mass {:.3}{}",
        out.report.eval.probe.top1,
        out.report.eval.knn_top1,
        out.report.eval.collapse.effective_rank,
        out.report.eval.collapse.top_eigen_mass,
        if out.report.eval.collapse.collapsed {
            " (collapsed)"
        } else {
            ""
        }
    ));
    Ok(out.report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: LossVariant,
    pub status: String,
    pub error: Option<String>,
    pub dataset_sha256: String,
    pub probe_top1: Option<f64>,
    pub knn_top1: Option<f64>,
    pub final_loss: Option<FinalLoss>,
    pub collapse: Option<mmi_ssl_core::eval::CollapseReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub dataset_sha256: String,
    pub variants: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: LossVariant) -> Option<&AblationRow> {
        self.variants.iter().find(|r| r.variant == variant)
    }
}

/// Trains every loss variant on the same dataset and seed, sequentially.
/// A failing variant is recorded and the rest still run.
pub fn ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> AblationReport {
    let mut rows = Vec::new();
    let mut reference = None;
    for variant in LossVariant::ALL {
        let mut vcfg = cfg.clone();
        vcfg.train.variant = variant;
        let dataset = dataset_for(&vcfg);
        let hash = dataset_sha256(&dataset);
        reference.get_or_insert_with(|| hash.clone());
        opts.say(format!("variant {variant}"));
        let row = match train_and_evaluate(&vcfg, &dataset, opts) {
            Ok(out) => AblationRow {
                variant,
                status: "ok".into(),
                error: None,
                dataset_sha256: hash,
                probe_top1: Some(out.report.eval.probe.top1),
                knn_top1: Some(out.report.eval.knn_top1),
                final_loss: out.report.final_loss,
                collapse: Some(out.report.eval.collapse),
            },
            Err(e) => AblationRow {
                variant,
                status: "failed".into(),
                error: Some(e.to_string()),
                dataset_sha256: hash,
                probe_top1: None,
                knn_top1: None,
                final_loss: None,
                collapse: None,
            },
        };
        opts.say(format!(
            "  {variant}: {} probe {:?} collapsed {:?}",
            row.status,
            row.probe_top1,
            row.collapse.as_ref().map(|c| c.collapsed)
        ));
        rows.push(row);
    }
    AblationReport {
        seed: cfg.seed,
        dataset_sha256: reference.unwrap_or_default(),
        variants: rows,
    }
}

pub fn run_ablate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<AblationReport> {
    let dir = opts.prepare()?;
    let report = ablate(cfg, opts);
    write_json(&dir.join("ablation.json"), &report)?;
    Ok(report)
}

pub fn run_probe(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    opts: &RunOptions,
) -> Result<EvalReport> {
    let dir = opts.prepare()?;
    let state = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let dataset = dataset_for(cfg);
    let report = evaluate(cfg, &state, &dataset)?;
    write_json(&dir.join("probe.json"), &report)?;
    opts.say(format!(
        "probe top-1 {:.4}, k-NN {:.4}",
        report.probe.top1, report.knn_top1
    ));
    Ok(report)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Random SPD joint dispersion `W Wᵀ/(2d) + ½ I` of size `2d`.
pub fn random_joint_dispersion<R: Rng + ?Sized>(block_dim: usize, rng: &mut R) -> SymMatrix {
    let n = 2 * block_dim;
    let w = gaussian_matrix(n, n, rng);
    let m = w.dot(&w.t()) / n as f64 + Array2::<f64>::eye(n) * 0.5;
    SymMatrix::new(m).expect("W Wᵀ is symmetric")
}

#[derive(Debug, Clone, Serialize)]
pub struct MiCase {
    pub block_dim: usize,
    pub spec_index: usize,
    pub shape: f64,
    pub closed_form: f64,
    pub estimate: f64,
    pub abs_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShapeInvariance {
    pub block_dim: usize,
    pub spec_index: usize,
    pub closed_form_bits_identical: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerCase {
    pub block_dim: usize,
    pub spec_index: usize,
    pub shape: f64,
    pub radial_moment: f64,
    pub radial_moment_expected: f64,
    pub radial_moment_rel_error: f64,
    pub covariance_max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceCase {
    pub block_dim: usize,
    pub before: f64,
    pub after: f64,
    pub abs_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MiValidateReport {
    pub cases: Vec<MiCase>,
    pub reference_cases: Vec<MiCase>,
    pub shape_invariance: Vec<ShapeInvariance>,
    pub sampler: Vec<SamplerCase>,
    pub invariance: Vec<InvarianceCase>,
    pub all_pass: bool,
}

fn mi_case(
    joint: &JointGgdSpec,
    spec_index: usize,
    samples: usize,
    k: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> mmi_ssl_core::Result<MiCase> {
    let closed_form = mi_closed_form(joint)?;
    let draws = ggd_sample(joint.joint(), samples, rng);
    let (z, zp) = joint.split_samples(&draws);
    let estimate = mi_knn_estimate(z.view(), zp.view(), k)?;
    let abs_error = (estimate - closed_form).abs();
    Ok(MiCase {
        block_dim: joint.block_dim(),
        spec_index,
        shape: joint.joint().shape(),
        closed_form,
        estimate,
        abs_error,
        pass: abs_error <= tol,
    })
}

/// Largest deviation of the sample covariance from `expected`, each entry
/// measured against `sqrt(C_ii C_jj)`.
pub fn covariance_rel_error(samples: &Array2<f64>, expected: &SymMatrix) -> f64 {
    let n = samples.nrows() as f64;
    let mean = samples.mean_axis(ndarray::Axis(0)).expect("non-empty");
    let centered = samples - &mean;
    let cov = centered.t().dot(&centered) / n;
    let c = expected.as_array();
    let mut worst: f64 = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            let scale = (c[[i, i]] * c[[j, j]]).sqrt();
            worst = worst.max((cov[[i, j]] - c[[i, j]]).abs() / scale);
        }
    }
    worst
}

fn sampler_case(
    joint: &JointGgdSpec,
    spec_index: usize,
    cfg: &crate::config::MiValidateConfig,
    rng: &mut ChaCha8Rng,
) -> mmi_ssl_core::Result<SamplerCase> {
    let spec = joint.joint();
    let beta = spec.shape();
    let draws = ggd_sample(spec, cfg.sampler_samples, rng);
    let mut moment = 0.0;
    for row in draws.rows() {
        moment += spec
            .quadratic_form(row.as_slice().expect("row-major"))?
            .powf(beta);
    }
    moment /= draws.nrows() as f64;
    let expected = radial_moment(spec.dim(), beta);
    let moment_err = (moment - expected).abs() / expected;
    let cov_err = covariance_rel_error(&draws, &spec.covariance());
    Ok(SamplerCase {
        block_dim: joint.block_dim(),
        spec_index,
        shape: beta,
        radial_moment: moment,
        radial_moment_expected: expected,
        radial_moment_rel_error: moment_err,
        covariance_max_rel_error: cov_err,
        pass: moment_err <= cfg.moment_rel_tol && cov_err <= cfg.covariance_rel_tol,
    })
}

pub const MONOTONE_MAP_Z: fn(f64) -> f64 = |x| x * x * x + x;
pub const MONOTONE_MAP_ZPRIME: fn(f64) -> f64 = |x| (0.5 * x).exp();

pub fn mi_validate(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> mmi_ssl_core::Result<MiValidateReport> {
    let mc = &cfg.mi_validate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();
    let mut shape_invariance = Vec::new();
    let mut sampler = Vec::new();
    for &d in &mc.block_dims {
        for spec_index in 0..mc.specs_per_dim {
            let dispersion = random_joint_dispersion(d, &mut rng);
            let base = JointGgdSpec::new(d, GgdSpec::centered(dispersion, 1.0)?)?;
            let mut bits = Vec::new();
            for &beta in &mc.shapes {
                let joint = base.with_shape(beta)?;
                bits.push(mi_closed_form(&joint)?.to_bits());
                let case = mi_case(&joint, spec_index, mc.samples, mc.k, mc.tolerance, &mut rng)?;
                opts.say(format!(
                    "d={d} spec {spec_index} beta={beta}: closed form {:.4}, KSG {:.4}{}",
                    case.closed_form,
                    case.estimate,
                    if case.pass { "" } else { "  FAIL" }
                ));
                cases.push(case);
                sampler.push(sampler_case(&joint, spec_index, mc, &mut rng)?);
            }
            shape_invariance.push(ShapeInvariance {
                block_dim: d,
                spec_index,
                closed_form_bits_identical: bits.windows(2).all(|w| w[0] == w[1]),
            });
        }
    }

    let ref_tol = 0.02;
    let corr = |r: f64| {
        JointGgdSpec::from_blocks(
            &SymMatrix::identity(1),
            &SymMatrix::identity(1),
            &Array2::from_elem((1, 1), r),
            1.0,
        )
    };
    let independent = JointGgdSpec::from_blocks(
        &SymMatrix::from_diag(&[1.0, 2.0]),
        &SymMatrix::from_diag(&[0.5, 1.5]),
        &Array2::zeros((2, 2)),
        1.0,
    )?;
    let reference_cases = vec![
        mi_case(&corr(0.8)?, 0, mc.samples, mc.k, ref_tol, &mut rng)?,
        mi_case(&independent, 0, mc.samples, mc.k, ref_tol, &mut rng)?,
    ];

    let mut invariance = Vec::new();
    for &d in &mc.invariance_block_dims {
        let joint = JointGgdSpec::new(
            d,
            GgdSpec::centered(random_joint_dispersion(d, &mut rng), 1.0)?,
        )?;
        let draws = ggd_sample(joint.joint(), mc.invariance_samples, &mut rng);
        let (z, zp) = joint.split_samples(&draws);
        let (before, after) = mi_invariance_check(
            z.view(),
            zp.view(),
            MONOTONE_MAP_Z,
            MONOTONE_MAP_ZPRIME,
            mc.k,
        )?;
        let abs_diff = (after - before).abs();
        invariance.push(InvarianceCase {
            block_dim: d,
            before,
            after,
            abs_diff,
            pass: abs_diff <= mc.invariance_tolerance,
        });
    }

    let all_pass = cases.iter().chain(&reference_cases).all(|c| c.pass)
        && shape_invariance
            .iter()
            .all(|s| s.closed_form_bits_identical)
        && sampler.iter().all(|s| s.pass)
        && invariance.iter().all(|c| c.pass);
    Ok(MiValidateReport {
        cases,
        reference_cases,
        shape_invariance,
        sampler,
        invariance,
        all_pass,
    })
}

pub fn run_mi_validate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<MiValidateReport> {
    let dir = opts.prepare()?;
    let report = mi_validate(cfg, opts)?;
    write_json(&dir.join("mi_validate.json"), &report)?;
    opts.say(format!("all pass: {}", report.all_pass));
    Ok(report)
}

/// Random orthogonal matrix from the eigenvectors of a random symmetric one.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    let g = gaussian_matrix(n, n, rng);
    let s = SymMatrix::new((&g + &g.t()) * 0.5).expect("symmetrized");
    sym_eigen(&s).expect("finite input").vectors
}

/// `Q diag(λ) Qᵀ` with `λ` log-spaced at random in `[lo, hi]`, both ends hit.
pub fn matrix_with_spectrum<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> SymMatrix {
    let q = random_orthogonal(n, rng);
    let mut lambdas: Vec<f64> = (0..n)
        .map(|_| (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp())
        .collect();
    lambdas[0] = lo;
    if n > 1 {
        lambdas[n - 1] = hi;
    }
    let d = Array2::from_diag(&Array1::from(lambdas));
    SymMatrix::new(q.dot(&d).dot(&q.t())).expect("congruence of a diagonal")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub instance: usize,
    pub order: usize,
    pub logdet_original: f64,
    pub logdet_exact: f64,
    pub logdet_taylor: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub exact_us: f64,
    pub taylor_us: f64,
}

/// Exact log-det of the rescaled matrix versus its truncated series, for
/// every size, spectrum and series order in the config.
pub fn logdet_bench(cfg: &ExperimentConfig) -> mmi_ssl_core::Result<Vec<BenchRow>> {
    let lb = &cfg.logdet_bench;
    let rc = &cfg.train.rescale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &size in &lb.sizes {
        for &[lo, hi] in &lb.spectra {
            for instance in 0..lb.matrices_per_case {
                let m = matrix_with_spectrum(size, lo, hi, &mut rng);
                let logdet_original = logdet_exact(&m)?;
                let m_tilde = rescale(&m, &RescaleState::exact(&m)?, rc)?;
                let t0 = Instant::now();
                let exact = logdet_exact(&m_tilde)?;
                let exact_us = t0.elapsed().as_secs_f64() * 1e6;
                for &order in &lb.taylor_orders {
                    let t1 = Instant::now();
                    let approx = logdet_taylor(&m_tilde, order);
                    let taylor_us = t1.elapsed().as_secs_f64() * 1e6;
                    let abs_error = (approx - exact).abs();
                    rows.push(BenchRow {
                        size,
                        lambda_lo: lo,
                        lambda_hi: hi,
                        instance,
                        order,
                        logdet_original,
                        logdet_exact: exact,
                        logdet_taylor: approx,
                        abs_error,
                        rel_error: if exact == 0.0 {
                            abs_error
                        } else {
                            abs_error / exact.abs()
                        },
                        exact_us,
                        taylor_us,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn run_logdet_bench(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<BenchRow>> {
    let dir = opts.prepare()?;
    let rows = logdet_bench(cfg)?;
    let mut w = csv::Writer::from_path(dir.join("logdet_bench.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    for &size in &cfg.logdet_bench.sizes {
        for &order in &cfg.logdet_bench.taylor_orders {
            let worst = rows
                .iter()
                .filter(|r| r.size == size && r.order == order)
                .map(|r| r.abs_error)
                .fold(0.0, f64::max);
            opts.say(format!(
                "size {size:>3} order {order}: max abs error {worst:.3e}"
            ));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub what: String,
    pub rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub all_pass: bool,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Loss-level gradients with respect to both normalized batches for every
/// variant, then end-to-end parameter gradients of a tiny network (plain and
/// momentum variant), all against central differences.
pub fn grad_check(cfg: &ExperimentConfig) -> mmi_ssl_core::Result<GradCheckReport> {
    let gc = &cfg.grad_check;
    let rc = cfg.train.rescale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut entries = Vec::new();
    let d = *gc.widths.last().expect("validated");
    let m = gc.batch_size;

    let z = normalize_batch(
        &EmbeddingBatch::new(gaussian_matrix(d, m, &mut rng)),
        cfg.train.norm_eps,
    )?;
    let mix = gaussian_matrix(d, m, &mut rng) * 0.5 + z.data();
    let zp = normalize_batch(&EmbeddingBatch::new(mix), cfg.train.norm_eps)?;
    let states = RescaleStates::exact(&build_gram_set(&z, &zp)?)?;
    for variant in LossVariant::ALL {
        let analytic = mmi_loss(&z, &zp, &states, &rc, variant)?;
        let loss_at = |zv: &[f64], zpv: &[f64]| {
            let a = EmbeddingBatch::assume_normalized(
                Array2::from_shape_vec((d, m), zv.to_vec()).expect("shape"),
            );
            let b = EmbeddingBatch::assume_normalized(
                Array2::from_shape_vec((d, m), zpv.to_vec()).expect("shape"),
            );
            mmi_loss(&a, &b, &states, &rc, variant)
                .map(|l| l.total)
                .unwrap_or(f64::NAN)
        };
        let zv: Vec<f64> = z.data().iter().copied().collect();
        let zpv: Vec<f64> = zp.data().iter().copied().collect();
        let num_z = numeric_gradient(&zv, gc.step, |v| loss_at(v, &zpv));
        let num_zp = numeric_gradient(&zpv, gc.step, |v| loss_at(&zv, v));
        for (name, num, ana) in [
            ("z", num_z, &analytic.grad_z),
            ("zprime", num_zp, &analytic.grad_zprime),
        ] {
            let ana: Vec<f64> = ana.iter().copied().collect();
            let rel_error = relative_error(&num, &ana);
            entries.push(GradCheckEntry {
                what: format!("loss {variant} d/d{name}"),
                rel_error,
                tolerance: gc.loss_tolerance,
                pass: rel_error <= gc.loss_tolerance,
            });
        }
    }

    let spec = MlpSpec::new(gc.widths.clone(), true)?;
    for momentum in [false, true] {
        let state = EncoderState::init(&spec, momentum, &mut rng)?;
        let x = gaussian_matrix(spec.input_dim(), m, &mut rng);
        let xp = &x + &(gaussian_matrix(spec.input_dim(), m, &mut rng) * 0.3);
        let mut tcfg = cfg.train.clone();
        tcfg.momentum_encoder = momentum;
        let states = {
            let za = normalize_batch(&branch_z(&state, &x)?, tcfg.norm_eps)?;
            let zb = normalize_batch(&branch_zprime(&state, &xp)?, tcfg.norm_eps)?;
            RescaleStates::exact(&build_gram_set(&za, &zb)?)?
        };
        let (_, grads) = batch_gradients(&state, x.view(), xp.view(), &tcfg, &states)?;
        let base = state.params.flat();
        let mut probe = state.clone();
        let numeric = numeric_gradient(&base, gc.step, |p| {
            probe.params.set_flat(p).expect("same layout");
            batch_gradients(&probe, x.view(), xp.view(), &tcfg, &states)
                .map(|(l, _)| l.total)
                .unwrap_or(f64::NAN)
        });
        let rel_error = relative_error(&numeric, &grads.flat());
        entries.push(GradCheckEntry {
            what: format!(
                "parameters ({})",
                if momentum {
                    "momentum encoder"
                } else {
                    "shared encoder"
                }
            ),
            rel_error,
            tolerance: gc.param_tolerance,
            pass: rel_error <= gc.param_tolerance,
        });
    }
    let all_pass = entries.iter().all(|e| e.pass);
    Ok(GradCheckReport { entries, all_pass })
}

fn branch_z(state: &EncoderState, x: &Array2<f64>) -> mmi_ssl_core::Result<EmbeddingBatch> {
    let h = encode(state, x.view(), false)?;
    match &state.params.predictor {
        Some(p) => Ok(EmbeddingBatch::new(p.forward(h.view())?)),
        None => Ok(h),
    }
}

fn branch_zprime(state: &EncoderState, xp: &Array2<f64>) -> mmi_ssl_core::Result<EmbeddingBatch> {
    encode(state, xp.view(), state.target.is_some())
}

pub fn run_grad_check(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<GradCheckReport> {
    let dir = opts.prepare()?;
    let report = grad_check(cfg)?;
    for e in &report.entries {
        opts.say(format!(
            "{:<40} rel error {:.3e} (tol {:.0e}) {}",
            e.what,
            e.rel_error,
            e.tolerance,
            if e.pass { "ok" } else { "FAIL" }
        ));
    }
    write_json(&dir.join("grad_check.json"), &report)?;
    Ok(report)
}

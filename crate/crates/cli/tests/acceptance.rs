//! End-to-end acceptance checks, one PASS/FAIL line per criterion. Runs
//! without the libtest harness so every line is printed and a failing
//! criterion does not stop the rest.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use mmi_ssl_cli::commands::{
    ablate, grad_check, mi_validate, run_train, MiValidateReport, RunOptions,
};
use mmi_ssl_cli::config::ExperimentConfig;
use mmi_ssl_core::embed::{build_gram_set, normalize_batch, EmbeddingBatch};
use mmi_ssl_core::loss::{
    logdet_taylor, mmi_loss_from_gram, rescale, LossVariant, RescaleConfig, RescaleState,
    RescaleStates,
};
use mmi_ssl_core::matrix::{assemble_block, block_det_factored, logdet_exact, sym_eig, SymMatrix};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = (bool, String);

fn quiet() -> RunOptions {
    RunOptions {
        out_dir: std::env::temp_dir().join("mmi-ssl-acceptance"),
        quiet: true,
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
    let g = gaussian(n, n, rng);
    SymMatrix::new((&g + &g.t()) * 0.5).unwrap()
}

/// Determinant by LU with partial pivoting, independent of the eigensolver.
fn det_lu(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut m = a.clone();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| m[[i, c]].abs().total_cmp(&m[[j, c]].abs()))
            .unwrap();
        if p != c {
            for k in 0..n {
                m.swap([p, k], [c, k]);
            }
            det = -det;
        }
        det *= m[[c, c]];
        for r in c + 1..n {
            let f = m[[r, c]] / m[[c, c]];
            for k in c..n {
                m[[r, k]] -= f * m[[c, k]];
            }
        }
    }
    det
}

struct MiRun {
    report: MiValidateReport,
    elapsed: Duration,
}

fn mi_run() -> &'static MiRun {
    static RUN: OnceLock<MiRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = Instant::now();
        let report = mi_validate(&ExperimentConfig::default(), &quiet()).unwrap();
        MiRun {
            report,
            elapsed: t.elapsed(),
        }
    })
}

fn criterion_01_closed_form_mi_matches_knn_estimate() -> Outcome {
    let run = mi_run();
    let r = &run.report;
    let worst = r
        .cases
        .iter()
        .max_by(|a, b| a.abs_error.total_cmp(&b.abs_error))
        .unwrap();
    let failing: Vec<String> = r
        .cases
        .iter()
        .filter(|c| c.abs_error > 0.05)
        .map(|c| format!("d={} beta={} err {:.3}", c.block_dim, c.shape, c.abs_error))
        .collect();
    let identical = r
        .shape_invariance
        .iter()
        .all(|s| s.closed_form_bits_identical);
    let pass = r.cases.len() >= 10
        && failing.is_empty()
        && identical
        && run.elapsed <= Duration::from_secs(120);
    (
        pass,
        format!(
            "{} cases, worst |err| {:.4} (d={}, beta={}), over tolerance: [{}], shape-identical {identical}, {:.0} s",
            r.cases.len(),
            worst.abs_error,
            worst.block_dim,
            worst.shape,
            failing.join("; "),
            run.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_02_sampler_moments_and_covariance() -> Outcome {
    let r = &mi_run().report;
    let moment = r
        .sampler
        .iter()
        .map(|s| s.radial_moment_rel_error)
        .fold(0.0, f64::max);
    let cov = r
        .sampler
        .iter()
        .map(|s| s.covariance_max_rel_error)
        .fold(0.0, f64::max);
    let pass = !r.sampler.is_empty() && moment <= 0.02 && cov <= 0.05;
    (
        pass,
        format!(
            "{} cases, max moment rel err {moment:.4}, max covariance err {cov:.4}",
            r.sampler.len()
        ),
    )
}

fn criterion_03_mi_invariant_under_monotone_maps() -> Outcome {
    let r = &mi_run().report;
    let worst = r.invariance.iter().map(|c| c.abs_diff).fold(0.0, f64::max);
    let pass = !r.invariance.is_empty() && worst <= 0.05;
    (
        pass,
        format!(
            "{} cases, max |before - after| {worst:.4} nats",
            r.invariance.len()
        ),
    )
}

fn criterion_04_block_determinant_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let n = 1 + i % 12;
        let g = gaussian(n, n, &mut rng);
        let a = SymMatrix::new(g.dot(&g.t()) / n as f64 + Array2::<f64>::eye(n) * 0.5).unwrap();
        let b = random_symmetric(n, &mut rng);
        let lmin = sym_eig(&a).unwrap().lambda_min;
        let bs = sym_eig(&b).unwrap();
        let b = b.scaled(0.9 * lmin / bs.lambda_max.abs().max(bs.lambda_min.abs()));
        let (plus, minus) = block_det_factored(&a, &b).unwrap();
        let direct = det_lu(assemble_block(&a, &b).unwrap().as_array());
        worst = worst.max(((plus * minus - direct) / direct).abs());
    }
    (
        worst <= 1e-9,
        format!("200 instances, max rel err {worst:.2e}"),
    )
}

fn criterion_05_taylor_logdet_accuracy() -> Outcome {
    let t = Instant::now();
    let cfg = RescaleConfig::default();
    assert_eq!((cfg.rescale_beta, cfg.taylor_order), (5.0, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut detail = Vec::new();
    let mut pass = true;
    for n in [8, 32, 64] {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let m = random_symmetric(n, &mut rng);
            let mt = rescale(&m, &RescaleState::exact(&m).unwrap(), &cfg).unwrap();
            worst = worst
                .max((logdet_taylor(&mt, cfg.taylor_order) - logdet_exact(&mt).unwrap()).abs());
        }
        pass &= worst <= n as f64 * 8e-5;
        detail.push(format!(
            "n={n} max err {worst:.2e} (bound {:.1e})",
            n as f64 * 8e-5
        ));
    }
    pass &= t.elapsed() <= Duration::from_secs(60);
    (
        pass,
        format!("{}, {:.1} s", detail.join(", "), t.elapsed().as_secs_f64()),
    )
}

fn criterion_06_gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let r = grad_check(&cfg).unwrap();
    let loss = r
        .entries
        .iter()
        .filter(|e| e.what.starts_with("loss"))
        .map(|e| e.rel_error)
        .fold(0.0, f64::max);
    let params = r
        .entries
        .iter()
        .filter(|e| e.what.starts_with("param"))
        .map(|e| e.rel_error)
        .fold(0.0, f64::max);
    let pass = loss <= 1e-5 && params <= 1e-4 && t.elapsed() <= Duration::from_secs(120);
    (
        pass,
        format!(
            "loss-level max rel err {loss:.2e}, parameter-level {params:.2e}, {:.1} s",
            t.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_07_ablation_analog() -> Outcome {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.dataset.num_classes, 4);
    assert_eq!(cfg.dataset.dim, 16);
    assert_eq!(
        cfg.dataset.num_classes * cfg.dataset.samples_per_class,
        1000
    );
    assert_eq!(cfg.train.epochs, 50);
    let r = ablate(&cfg, &quiet());
    let acc = |v| r.row(v).and_then(|row| row.probe_top1).unwrap_or(f64::NAN);
    let finite = |v| {
        r.row(v)
            .and_then(|row| row.final_loss.as_ref())
            .is_some_and(|l| l.total.is_finite())
    };
    let (full, none) = (acc(LossVariant::Full), acc(LossVariant::NoBoth));
    let none_collapsed = r
        .row(LossVariant::NoBoth)
        .and_then(|row| row.collapse.as_ref())
        .is_some_and(|c| c.collapsed);
    let between = |v| finite(v) && acc(v) > none && acc(v) < full;
    let checks = [
        ("full >= 0.90", full >= 0.90),
        ("no_both <= 0.35", none <= 0.35),
        ("no_both collapsed", none_collapsed),
        ("no_logdet_z between", between(LossVariant::NoLogdetZ)),
        (
            "no_logdet_zprime between",
            between(LossVariant::NoLogdetZprime),
        ),
        ("under 10 min", t.elapsed() <= Duration::from_secs(600)),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    let table: Vec<String> = r
        .variants
        .iter()
        .map(|row| {
            format!(
                "{} {:.3}{}",
                row.variant,
                row.probe_top1.unwrap_or(f64::NAN),
                if row.collapse.as_ref().is_some_and(|c| c.collapsed) {
                    " (collapsed)"
                } else {
                    ""
                }
            )
        })
        .collect();
    (
        failed.is_empty(),
        format!(
            "probe top-1: {}; failed checks: [{}]",
            table.join(", "),
            failed.join(", ")
        ),
    )
}

fn criterion_08_rescale_state_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let appendix = RescaleConfig {
        track_interval: 100,
        ema_rho: 0.99,
        ..Default::default()
    };
    let mut state = RescaleState::default();
    let mut prev = state;
    let mut only_on_refresh = true;
    for batch in 1..=450u64 {
        let m = random_symmetric(6, &mut rng);
        state.update(&m, &appendix).unwrap();
        let changed = state.lambda_min != prev.lambda_min || state.lambda_max != prev.lambda_max;
        only_on_refresh &= changed == (batch % 100 == 1);
        prev = state;
    }
    let raw = RescaleConfig {
        track_interval: 1,
        ema_rho: 0.0,
        ..Default::default()
    };
    let mut state = RescaleState::default();
    let mut exact = true;
    for _ in 0..100 {
        let m = random_symmetric(6, &mut rng);
        state.update(&m, &raw).unwrap();
        let s = sym_eig(&m).unwrap();
        exact &= state.lambda_min == s.lambda_min && state.lambda_max == s.lambda_max;
    }
    (
        only_on_refresh && exact,
        format!("interval 100: changes only on batches 1, 101, ...: {only_on_refresh}; interval 1 rho 0 exact: {exact}"),
    )
}

fn criterion_09_gram_scale_invariance() -> Outcome {
    let cfg = RescaleConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let (d, m) = (4 + case % 12, 8 + case % 25);
        let s = gaussian(d, m, &mut rng);
        let z =
            normalize_batch(&EmbeddingBatch::new(&s + &gaussian(d, m, &mut rng)), 1e-5).unwrap();
        let zp =
            normalize_batch(&EmbeddingBatch::new(&s + &gaussian(d, m, &mut rng)), 1e-5).unwrap();
        let gram = build_gram_set(&z, &zp).unwrap();
        let base = mmi_loss_from_gram(
            &z,
            &zp,
            &gram,
            &RescaleStates::exact(&gram).unwrap(),
            &cfg,
            LossVariant::Full,
        )
        .unwrap();
        for c in [1e-6, 1e-2, 0.37, 3.0, 1e3, 1e6] {
            let g = gram.scaled(c);
            let l = mmi_loss_from_gram(
                &z,
                &zp,
                &g,
                &RescaleStates::exact(&g).unwrap(),
                &cfg,
                LossVariant::Full,
            )
            .unwrap();
            for (a, b) in [
                (base.term_align, l.term_align),
                (base.term_z, l.term_z),
                (base.term_zprime, l.term_zprime),
            ] {
                worst = worst.max((a - b).abs());
            }
        }
    }
    (
        worst <= 1e-10,
        format!("50 Gram sets x 6 scales, max term change {worst:.2e}"),
    )
}

fn criterion_10_training_is_reproducible() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::default();
    let opts = |name: &str| RunOptions {
        out_dir: dir.path().join(name),
        quiet: true,
    };
    run_train(&cfg, &opts("a")).unwrap();
    run_train(&cfg, &opts("b")).unwrap();
    let a = std::fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/metrics.csv")).unwrap();
    (
        a == b,
        format!(
            "two default runs, metrics.csv {} bytes, identical {}",
            a.len(),
            a == b
        ),
    )
}

fn main() -> std::process::ExitCode {
    let criteria: [(u32, fn() -> Outcome); 10] = [
        (1, criterion_01_closed_form_mi_matches_knn_estimate),
        (2, criterion_02_sampler_moments_and_covariance),
        (3, criterion_03_mi_invariant_under_monotone_maps),
        (4, criterion_04_block_determinant_identity),
        (5, criterion_05_taylor_logdet_accuracy),
        (6, criterion_06_gradient_fidelity),
        (7, criterion_07_ablation_analog),
        (8, criterion_08_rescale_state_mechanics),
        (9, criterion_09_gram_scale_invariance),
        (10, criterion_10_training_is_reproducible),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (n, check) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let (pass, detail) = std::panic::catch_unwind(check)
            .unwrap_or_else(|e| (false, format!("panicked: {:?}", e.downcast_ref::<String>())));
        println!(
            "criterion {n:>2}: {}  {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        failures += usize::from(!pass);
    }
    println!("{failures} criteria failed");
    if failures == 0 {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}

mod common;

use approx::assert_relative_eq;
use common::{gaussian, max_rel_error, numeric_gradient, random_orthogonal, random_symmetric, rng};
use mmi_ssl_core::embed::{build_gram_set, normalize_batch, EmbeddingBatch, DEFAULT_NORM_EPS};
use mmi_ssl_core::loss::{
    logdet_taylor, mmi_loss, mmi_loss_from_gram, rescale, rescale_uncentered, update_rescale_state,
    LossVariant, RescaleConfig, RescaleState, RescaleStates,
};
use mmi_ssl_core::matrix::{logdet_exact, sym_eig, SymMatrix};
use mmi_ssl_core::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

/// A correlated pair of normalized batches, the shape the loss sees in training.
fn batch_pair(d: usize, m: usize, seed: u64) -> (EmbeddingBatch, EmbeddingBatch) {
    let mut r = rng(seed);
    let s = gaussian(d, m, &mut r);
    let z = &s + &(gaussian(d, m, &mut r) * 0.7);
    let zp = &s + &(gaussian(d, m, &mut r) * 0.7);
    (
        normalize_batch(&EmbeddingBatch::new(z), DEFAULT_NORM_EPS).unwrap(),
        normalize_batch(&EmbeddingBatch::new(zp), DEFAULT_NORM_EPS).unwrap(),
    )
}

fn exact_states(z: &EmbeddingBatch, zp: &EmbeddingBatch) -> RescaleStates {
    RescaleStates::exact(&build_gram_set(z, zp).unwrap()).unwrap()
}

#[test]
fn loss_gradients_match_finite_differences() {
    let cfg = RescaleConfig::default();
    let mut r = rng(2024);
    for case in 0..20u64 {
        let d = r.random_range(4..=16);
        let m = r.random_range(8..=32);
        let (z, zp) = batch_pair(d, m, case);
        let states = exact_states(&z, &zp);
        for variant in LossVariant::ALL {
            let out = mmi_loss(&z, &zp, &states, &cfg, variant).unwrap();
            let total = |a: &[f64], b: &[f64]| {
                let za = EmbeddingBatch::assume_normalized(
                    Array2::from_shape_vec((d, m), a.to_vec()).unwrap(),
                );
                let zb = EmbeddingBatch::assume_normalized(
                    Array2::from_shape_vec((d, m), b.to_vec()).unwrap(),
                );
                mmi_loss(&za, &zb, &states, &cfg, variant).unwrap().total
            };
            let zf: Vec<f64> = z.data().iter().copied().collect();
            let zpf: Vec<f64> = zp.data().iter().copied().collect();
            let fd_z = numeric_gradient(&zf, 1e-5, |a| total(a, &zpf));
            let fd_zp = numeric_gradient(&zpf, 1e-5, |b| total(&zf, b));
            let an_z: Vec<f64> = out.grad_z.iter().copied().collect();
            let an_zp: Vec<f64> = out.grad_zprime.iter().copied().collect();
            let ez = max_rel_error(&fd_z, &an_z);
            let ezp = max_rel_error(&fd_zp, &an_zp);
            assert!(
                ez <= 1e-5 && ezp <= 1e-5,
                "case {case} ({d}x{m}) {variant}: {ez:.2e} {ezp:.2e}"
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn loss_terms_invariant_to_gram_scale(d in 2usize..10, m in 4usize..24, c in 1e-3f64..1e3, seed in any::<u64>()) {
        let cfg = RescaleConfig::default();
        let (z, zp) = batch_pair(d, m, seed);
        let gram = build_gram_set(&z, &zp).unwrap();
        let scaled = gram.scaled(c);
        for variant in LossVariant::ALL {
            if variant == LossVariant::MseAlign {
                continue;
            }
            let a = mmi_loss_from_gram(&z, &zp, &gram, &RescaleStates::exact(&gram).unwrap(), &cfg, variant).unwrap();
            let b = mmi_loss_from_gram(&z, &zp, &scaled, &RescaleStates::exact(&scaled).unwrap(), &cfg, variant).unwrap();
            if variant == LossVariant::NoMuLambda {
                // without the shift M̃ = M/α + I is still degree-0 homogeneous
                prop_assert!((a.total - b.total).abs() <= 1e-10);
                continue;
            }
            prop_assert!((a.term_align - b.term_align).abs() <= 1e-10);
            prop_assert!((a.term_z - b.term_z).abs() <= 1e-10);
            prop_assert!((a.term_zprime - b.term_zprime).abs() <= 1e-10);
        }
    }

    #[test]
    fn swapping_views_with_equal_grams_keeps_total(d in 2usize..10, m in 4usize..24, seed in any::<u64>()) {
        let cfg = RescaleConfig::default();
        let mut r = rng(seed);
        let z = normalize_batch(&EmbeddingBatch::new(gaussian(d, m, &mut r)), DEFAULT_NORM_EPS).unwrap();
        let q = random_orthogonal(d, &mut r);
        let zp = EmbeddingBatch::assume_normalized(q.dot(z.data()));
        let ab = mmi_loss(&z, &zp, &exact_states(&z, &zp), &cfg, LossVariant::Full).unwrap();
        let ba = mmi_loss(&zp, &z, &exact_states(&zp, &z), &cfg, LossVariant::Full).unwrap();
        prop_assert!((ab.total - ba.total).abs() <= 1e-12 * ab.total.abs().max(1.0));
    }

    #[test]
    fn swapping_views_swaps_mse_gradients(d in 2usize..10, m in 4usize..24, seed in any::<u64>()) {
        let cfg = RescaleConfig::default();
        let (z, zp) = batch_pair(d, m, seed);
        let mut swapped = exact_states(&z, &zp);
        std::mem::swap(&mut swapped.z, &mut swapped.zprime);
        let ab = mmi_loss(&z, &zp, &exact_states(&z, &zp), &cfg, LossVariant::MseAlign).unwrap();
        let ba = mmi_loss(&zp, &z, &swapped, &cfg, LossVariant::MseAlign).unwrap();
        prop_assert!((ab.total - ba.total).abs() <= 1e-12 * ab.total.abs().max(1.0));
        let gz = (&ab.grad_z - &ba.grad_zprime).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let gzp = (&ab.grad_zprime - &ba.grad_z).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assert!(gz <= 1e-12 && gzp <= 1e-12, "{gz:.2e} {gzp:.2e}");
    }

    #[test]
    fn taylor_error_within_tail_bound(n in 2usize..40, seed in any::<u64>()) {
        let cfg = RescaleConfig::default();
        let m = random_symmetric(n, &mut rng(seed));
        let mt = rescale(&m, &RescaleState::exact(&m).unwrap(), &cfg).unwrap();
        let s = sym_eig(&mt).unwrap();
        prop_assert!(s.lambda_min >= 0.8 - 1e-12 && s.lambda_max <= 1.2 + 1e-12);
        let err = (logdet_taylor(&mt, 4) - logdet_exact(&mt).unwrap()).abs();
        prop_assert!(err <= n as f64 * 8e-5, "{err}");
    }
}

#[test]
fn taylor_bound_on_hundred_matrices_per_size() {
    let cfg = RescaleConfig::default();
    for n in [8, 32, 64] {
        for i in 0..100u64 {
            let m = random_symmetric(n, &mut rng(n as u64 * 1000 + i));
            let mt = rescale(&m, &RescaleState::exact(&m).unwrap(), &cfg).unwrap();
            let err = (logdet_taylor(&mt, 4) - logdet_exact(&mt).unwrap()).abs();
            assert!(err <= n as f64 * 8e-5, "n={n} i={i}: {err}");
        }
    }
}

#[test]
fn taylor_examples() {
    for p in [1, 2, 4, 8] {
        assert_eq!(logdet_taylor(&SymMatrix::identity(4), p), 0.0);
    }
    let m = SymMatrix::from_diag(&[1.1, 0.9]);
    let series = logdet_taylor(&m, 4);
    assert_relative_eq!(series, -0.01005, max_relative = 1e-12);
    assert!((series - 0.99f64.ln()).abs() <= 5e-6);
}

#[test]
fn rescale_examples() {
    let cfg = RescaleConfig::default();
    let m = SymMatrix::from_diag(&[0.5, 1.5]);
    let state = RescaleState::exact(&m).unwrap();
    let mt = rescale(&m, &state, &cfg).unwrap();
    let s = sym_eig(&mt).unwrap();
    assert_relative_eq!(s.lambda_min, 0.8, max_relative = 1e-12);
    assert_relative_eq!(s.lambda_max, 1.2, max_relative = 1e-12);

    // alpha = 5 * (1.0 - 0.5) = 2.5, no shift
    let mt = rescale_uncentered(&m, &state, &cfg).unwrap();
    assert_relative_eq!(mt.get(0, 0), 0.5 / 2.5 + 1.0, max_relative = 1e-12);
    assert_relative_eq!(mt.get(1, 1), 1.5 / 2.5 + 1.0, max_relative = 1e-12);

    let c = SymMatrix::identity(3).scaled(2.7);
    let mt = rescale(&c, &RescaleState::exact(&c).unwrap(), &cfg).unwrap();
    assert_eq!(mt, SymMatrix::identity(3));

    let strict = RescaleConfig {
        lazy_init: false,
        ..cfg
    };
    assert!(matches!(
        rescale(&m, &RescaleState::default(), &strict),
        Err(Error::Uninitialized)
    ));
}

#[test]
fn refresh_happens_only_on_interval_batches() {
    let cfg = RescaleConfig {
        track_interval: 100,
        ema_rho: 0.99,
        ..Default::default()
    };
    let mut state = RescaleState::default();
    let mut prev = state;
    for batch in 1..=350u64 {
        let m = random_symmetric(4, &mut rng(batch));
        state = update_rescale_state(&state, &m, &cfg).unwrap();
        assert_eq!(state.batch_counter, batch);
        let changed = state.lambda_min != prev.lambda_min || state.lambda_max != prev.lambda_max;
        assert_eq!(changed, batch % 100 == 1, "batch {batch}");
        prev = state;
    }
}

#[test]
fn unsmoothed_tracking_follows_true_extremes() {
    let cfg = RescaleConfig {
        track_interval: 1,
        ema_rho: 0.0,
        ..Default::default()
    };
    let mut state = RescaleState::default();
    for batch in 0..50u64 {
        let m = random_symmetric(5, &mut rng(batch));
        state = update_rescale_state(&state, &m, &cfg).unwrap();
        let s = sym_eig(&m).unwrap();
        assert_eq!(state.lambda_min, s.lambda_min);
        assert_eq!(state.lambda_max, s.lambda_max);
    }
}

#[test]
fn smoothed_tracking_converges_on_constant_input() {
    let cfg = RescaleConfig {
        track_interval: 1,
        ema_rho: 0.99,
        ..Default::default()
    };
    let first = random_symmetric(5, &mut rng(1));
    let m = random_symmetric(5, &mut rng(2));
    let mut state = update_rescale_state(&RescaleState::default(), &first, &cfg).unwrap();
    for _ in 0..1000 {
        state.update(&m, &cfg).unwrap();
    }
    let s = sym_eig(&m).unwrap();
    assert!((state.lambda_min - s.lambda_min).abs() <= 1e-3);
    assert!((state.lambda_max - s.lambda_max).abs() <= 1e-3);
}

#[test]
fn aligned_views_have_zero_alignment_term() {
    let cfg = RescaleConfig::default();
    let (z, _) = batch_pair(6, 16, 3);
    let zp = z.clone();
    let out = mmi_loss(&z, &zp, &exact_states(&z, &zp), &cfg, LossVariant::Full).unwrap();
    assert_eq!(out.term_align, 0.0);
}

#[test]
fn removed_terms_are_exactly_zero_and_variants_agree() {
    let cfg = RescaleConfig::default();
    let (z, zp) = batch_pair(8, 20, 4);
    let states = exact_states(&z, &zp);
    let full = mmi_loss(&z, &zp, &states, &cfg, LossVariant::Full).unwrap();
    let none = mmi_loss(&z, &zp, &states, &cfg, LossVariant::NoBoth).unwrap();
    assert_eq!(none.term_z, 0.0);
    assert_eq!(none.term_zprime, 0.0);
    assert_eq!(none.total, none.term_align);
    assert_eq!(full.total, none.total - full.term_z - full.term_zprime);
}

#[test]
fn loss_is_bit_deterministic() {
    let cfg = RescaleConfig::default();
    let (z, zp) = batch_pair(8, 20, 5);
    let states = exact_states(&z, &zp);
    for variant in LossVariant::ALL {
        let a = mmi_loss(&z, &zp, &states, &cfg, variant).unwrap();
        let b = mmi_loss(&z.clone(), &zp.clone(), &states, &cfg, variant).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn beta_at_most_one_rejected() {
    for beta in [1.0, 0.5, f64::NAN] {
        let cfg = RescaleConfig {
            rescale_beta: beta,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}

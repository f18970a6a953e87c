//! Property tests over the structural invariants of the objectives and
//! diagnostics.

use isogeo_core::diagnostics::{anisotropy_of_maps, tdi};
use isogeo_core::linalg::Matrix;
use isogeo_core::loss::{LossKind, Targets};
use isogeo_core::objectives::{cap_rescale, pgd_attack, warmup_weight, PgdConfig, Warmup, WarmupShape};
use isogeo_core::verify::isotropy_violation;
use isogeo_core::{Activation, MlpEncoderDecoder, ModelSpec, RngState};
use proptest::prelude::*;

fn random_orthogonal(d: usize, rng: &mut RngState) -> Matrix {
    let g = rng.gaussian_matrix(d, d, 1.0);
    let q = nalgebra::DMatrix::from_row_slice(d, d, g.as_slice()).qr().q();
    Matrix::from_fn(d, d, |i, j| q[(i, j)])
}

fn shape() -> impl Strategy<Value = WarmupShape> {
    prop_oneof![Just(WarmupShape::Linear), Just(WarmupShape::Cosine)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn anisotropy_never_below_one(seed in any::<u64>(), rows in 1usize..6, dim in 1usize..6, maps in 1usize..5) {
        let mut rng = RngState::new(seed);
        let js: Vec<Matrix> = (0..maps).map(|_| rng.gaussian_matrix(rows, dim, 1.0)).collect();
        let w = rng.unit_vector(dim);
        let a = anisotropy_of_maps(&js, &w).unwrap();
        prop_assert!(a >= 1.0 - 1e-12, "anisotropy {a}");
        prop_assert!(a.is_finite());
    }

    #[test]
    fn capped_fraction_never_exceeds_fixed_point(task in 0.0f64..10.0, raw in 0.0f64..10.0, nominal in 0.0f64..100.0, cap in 0.0f64..2.0) {
        let eff = cap_rescale(task, raw, nominal, Some(cap));
        prop_assert!(eff >= 0.0 && eff <= nominal);
        let total = task + eff * raw;
        if total > 0.0 {
            prop_assert!(eff * raw / total <= cap / (1.0 + cap) + 1e-12);
        }
        prop_assert_eq!(cap_rescale(task, raw, nominal, None), nominal);
    }

    #[test]
    fn warmup_is_monotone_and_bounded(start in 0usize..100, length in 1usize..100, t in 0usize..300, shape in shape()) {
        let w = Warmup { start, length, shape };
        let (a, b) = (warmup_weight(t, &w), warmup_weight(t + 1, &w));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a);
        prop_assert_eq!(warmup_weight(start + length, &w), 1.0);
        prop_assert_eq!(warmup_weight(start, &w), 0.0);
    }

    #[test]
    fn pgd_stays_in_the_box(seed in any::<u64>(), eps in 0.0f64..1.0, steps in 1usize..8) {
        let mut rng = RngState::new(seed);
        let net = MlpEncoderDecoder::init(&ModelSpec::new(3, vec![4], Activation::Tanh, 1), &mut rng).unwrap();
        let x = rng.gaussian_matrix(5, 3, 1.0);
        let y = Targets::Regression(rng.gaussian_vec(5, 1.0));
        let pgd = PgdConfig { epsilon: eps, steps, step_size: eps / 3.0 };
        let d = pgd_attack(&net, &x, &y, &pgd, LossKind::Mse).unwrap();
        prop_assert!(d.as_slice().iter().all(|v| v.abs() <= eps));
    }

    #[test]
    fn tdi_ignores_encoder_scale_for_linear_nets(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = RngState::new(seed);
        let w = rng.gaussian_matrix(3, 4, 1.0);
        let x = rng.gaussian_matrix(16, 4, 1.0);
        let a = MlpEncoderDecoder::linear(vec![w.clone()], Matrix::zeros(1, 3)).unwrap();
        let b = MlpEncoderDecoder::linear(vec![w.scale(c)], Matrix::zeros(1, 3)).unwrap();
        let ta = tdi(&a, &x, 0.2, 4, &mut RngState::new(seed ^ 1)).unwrap().value;
        let tb = tdi(&b, &x, 0.2, 4, &mut RngState::new(seed ^ 1)).unwrap().value;
        prop_assert!((ta - tb).abs() <= 1e-10 * ta.max(1e-300), "{ta} vs {tb}");
    }

    #[test]
    fn tdi_is_rotation_invariant_for_linear_nets(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let (d, r) = (4, 3);
        let w = rng.gaussian_matrix(r, d, 1.0);
        let x = rng.gaussian_matrix(64, d, 1.0);
        let q = random_orthogonal(d, &mut rng);
        // Inputs x ↦ Qx with weights W ↦ WQᵀ leave φ unchanged on the data.
        let xr = x.matmul_transposed(&q).unwrap();
        let wr = w.matmul_transposed(&q).unwrap();
        let a = MlpEncoderDecoder::linear(vec![w], Matrix::zeros(1, r)).unwrap();
        let b = MlpEncoderDecoder::linear(vec![wr], Matrix::zeros(1, r)).unwrap();
        let ta = tdi(&a, &x, 0.3, 32, &mut RngState::new(seed ^ 2)).unwrap();
        let tb = tdi(&b, &xr, 0.3, 32, &mut RngState::new(seed ^ 3)).unwrap();
        let se = (ta.se * ta.se + tb.se * tb.se).sqrt();
        prop_assert!((ta.value - tb.value).abs() <= 4.0 * se, "{} vs {} (se {se})", ta.value, tb.value);
    }

    #[test]
    fn scaled_identity_is_isotropic(d in 1usize..6, s in 0.0f64..5.0) {
        prop_assert!(isotropy_violation(&Matrix::identity(d).scale(s)).is_none());
    }

    #[test]
    fn unequal_variances_are_witnessed(seed in any::<u64>(), d in 2usize..6) {
        let mut rng = RngState::new(seed);
        let diag: Vec<f64> = (0..d).map(|_| 0.5 + rng.uniform()).collect();
        let (i, j, gap) = isotropy_violation(&Matrix::diagonal(&diag)).unwrap();
        // A diagonal covariance is caught by a single coordinate.
        prop_assert_eq!(i, j);
        prop_assert!(gap != 0.0);
        prop_assert!((gap - (diag[i] - diag[0])).abs() < 1e-12);
    }
}

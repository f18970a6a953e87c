//! Analytic gradients and Jacobians against central finite differences.

use isogeo_core::linalg::Matrix;
use isogeo_core::loss::{sample_losses, LossKind, Targets};
use isogeo_core::objectives::{pmh_loss, MatchingLayers};
use isogeo_core::{Activation, MlpEncoderDecoder, ModelSpec, RngState};

const NETS: u64 = 20;
const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;
// Entries below this magnitude are compared absolutely at REL_TOL * FLOOR.
const FLOOR: f64 = 1e-2;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()).max(FLOOR)
}

struct Case {
    net: MlpEncoderDecoder,
    x: Matrix,
    targets: Targets,
    loss: LossKind,
}

fn random_case(seed: u64) -> Case {
    let mut rng = RngState::new(seed);
    let input = 2 + rng.below(4);
    let depth = 1 + rng.below(3);
    let hidden: Vec<usize> = (0..depth).map(|_| 2 + rng.below(5)).collect();
    let activation = if seed % 4 == 3 { Activation::Identity } else { Activation::Tanh };
    let loss = if seed.is_multiple_of(2) { LossKind::Mse } else { LossKind::CrossEntropy };
    let outputs = match loss {
        LossKind::Mse => 1,
        LossKind::CrossEntropy => 3,
    };
    let net = MlpEncoderDecoder::init(&ModelSpec::new(input, hidden, activation, outputs), &mut rng).unwrap();
    let n = 3 + rng.below(4);
    let x = rng.gaussian_matrix(n, input, 1.0);
    let targets = match loss {
        LossKind::Mse => Targets::Regression(rng.gaussian_vec(n, 1.0)),
        LossKind::CrossEntropy => Targets::Classes {
            labels: (0..n).map(|_| rng.below(outputs)).collect(),
            classes: outputs,
        },
    };
    Case { net, x, targets, loss }
}

fn central(mut f: impl FnMut(f64) -> f64, at: f64) -> f64 {
    (f(at + H) - f(at - H)) / (2.0 * H)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..NETS {
        let c = random_case(seed);
        let (pred, trace) = c.net.forward_with_trace(&c.x).unwrap();
        let s = sample_losses(c.loss, &pred, &c.targets).unwrap();
        let analytic = c.net.backward(&trace, Some(&s.mean_grad()), &[]).unwrap().grads.to_flat();
        let params = c.net.parameters();
        assert_eq!(analytic.len(), params.len());
        let mut probe = c.net.clone();
        for k in 0..params.len() {
            let numeric = central(
                |v| {
                    let mut p = params.clone();
                    p[k] = v;
                    probe.set_parameters(&p).unwrap();
                    probe.loss(&c.x, &c.targets, c.loss).unwrap()
                },
                params[k],
            );
            assert!(close(analytic[k], numeric), "net {seed} param {k}: {} vs {numeric}", analytic[k]);
        }
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    for seed in 0..NETS {
        let c = random_case(seed);
        let analytic = c.net.input_gradient(&c.x, &c.targets, c.loss).unwrap();
        for i in 0..c.x.rows() {
            let row = c.x.select_rows(&[i]);
            let target = match &c.targets {
                Targets::Regression(y) => Targets::Regression(vec![y[i]]),
                Targets::Classes { labels, classes } => Targets::Classes {
                    labels: vec![labels[i]],
                    classes: *classes,
                },
            };
            for j in 0..c.x.cols() {
                let numeric = central(
                    |v| {
                        let mut r = row.clone();
                        r[(0, j)] = v;
                        c.net.loss(&r, &target, c.loss).unwrap()
                    },
                    row[(0, j)],
                );
                assert!(close(analytic[(i, j)], numeric), "net {seed} row {i} coord {j}");
            }
        }
    }
}

#[test]
fn prefix_jacobians_match_finite_differences() {
    for seed in 0..NETS {
        let c = random_case(seed);
        let x = c.x.row(0).to_vec();
        let jacs = c.net.prefix_jacobians(&x).unwrap();
        assert_eq!(jacs.len(), c.net.depth());
        assert_eq!(c.net.encoder_jacobian(&x).unwrap(), *jacs.last().unwrap());
        for j in 0..x.len() {
            let shifted = |v: f64| {
                let mut p = x.clone();
                p[j] = v;
                let row = Matrix::from_vec(1, p.len(), p).unwrap();
                c.net.encode_prefixes(&row).unwrap()
            };
            let (up, down) = (shifted(x[j] + H), shifted(x[j] - H));
            for (l, jac) in jacs.iter().enumerate() {
                for r in 0..jac.rows() {
                    let numeric = (up[l][(0, r)] - down[l][(0, r)]) / (2.0 * H);
                    assert!(close(jac[(r, j)], numeric), "net {seed} layer {l} entry ({r},{j})");
                }
            }
        }
    }
}

#[test]
fn matching_penalty_gradients_match_finite_differences() {
    for seed in 0..NETS {
        let c = random_case(seed);
        let depth = c.net.depth();
        let matching = if seed % 2 == 0 {
            MatchingLayers::Final
        } else {
            MatchingLayers::Normalized((0..depth).collect())
        };
        let rng = RngState::new(1000 + seed);
        let analytic = pmh_loss(&c.net, &c.x, 0.3, &matching, &mut rng.clone()).unwrap().grads.to_flat();
        let params = c.net.parameters();
        let mut probe = c.net.clone();
        for k in 0..params.len() {
            let numeric = central(
                |v| {
                    let mut p = params.clone();
                    p[k] = v;
                    probe.set_parameters(&p).unwrap();
                    pmh_loss(&probe, &c.x, 0.3, &matching, &mut rng.clone()).unwrap().value
                },
                params[k],
            );
            assert!(close(analytic[k], numeric), "net {seed} param {k}: {} vs {numeric}", analytic[k]);
        }
    }
}

#[test]
fn representation_jacobian_is_column_block_of_full_jacobian() {
    // Splitting the input into signal and nuisance coordinates splits the
    // Jacobian into the matching column blocks.
    let c = random_case(6);
    let x = c.x.row(1).to_vec();
    let full = c.net.encoder_jacobian(&x).unwrap();
    let split = x.len() / 2;
    let (signal, nuisance) = (full.column_block(0, split), full.column_block(split, x.len()));
    for r in 0..full.rows() {
        for j in 0..x.len() {
            let expect = if j < split { signal[(r, j)] } else { nuisance[(r, j - split)] };
            assert_eq!(full[(r, j)], expect);
        }
    }
    assert!((signal.frobenius_sq() + nuisance.frobenius_sq() - full.frobenius_sq()).abs() < 1e-12);
}

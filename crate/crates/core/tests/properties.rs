use nalgebra::DMatrix;
use proptest::prelude::*;

use augbias::augment::{bias_label, mixup_k};
use augbias::linalg::{self, softmax};
use augbias::losses::{combined_grad, loss_a, loss_a_over, CorrectionSet, MixWeights};
use augbias::model::{ce_grad, ce_loss, p_of_scores};
use augbias::theory::{estimate_l_smooth, estimate_mu, Quadratic};
use augbias::trainers::{read_records, write_records, TraceRecord};
use augbias::{Arch, Mat, Predictor, Rng};

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn scores(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, k)
}

fn model(seed: u64, mlp: bool, d: usize, k: usize) -> Predictor {
    let arch = if mlp {
        Arch::Mlp { dim: d, hidden: 4, classes: k }
    } else {
        Arch::SoftmaxLinear { dim: d, classes: k }
    };
    arch.random(0.7, &mut Rng::new(seed))
}

fn spectral_norm(m: &Mat) -> f64 {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    dm.singular_values().max()
}

proptest! {
    #[test]
    fn softmax_ignores_constant_shifts(s in scores(6), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let (a, b) = (softmax(&s).unwrap(), softmax(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_linear_in_the_label(s in scores(5), y1 in simplex(5), y2 in simplex(5), t in 0.0f64..1.0) {
        let mix: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let lhs = ce_loss(&mix, &s).unwrap();
        let rhs = t * ce_loss(&y1, &s).unwrap() + (1.0 - t) * ce_loss(&y2, &s).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }

    /// The label gradient is `Jᵀy`, so label changes move it by at most
    /// `‖J‖ ‖Δy‖`, and it is bounded by `‖J‖ ‖y‖`.
    #[test]
    fn label_gradient_is_lipschitz_and_bounded(seed in 0u64..1000, mlp: bool, y1 in simplex(3), y2 in simplex(3)) {
        let m = model(seed, mlp, 4, 3);
        let x = Rng::new(seed + 1).normal_vec(4, 1.0);
        let g = spectral_norm(&m.p_jacobian(&x).unwrap());
        let g1 = ce_grad(&m, &x, &y1).unwrap().grad;
        let g2 = ce_grad(&m, &x, &y2).unwrap().grad;
        let dy = linalg::distance(&y1, &y2).unwrap();
        prop_assert!(linalg::distance(&g1, &g2).unwrap() <= g * dy * (1.0 + 1e-9) + 1e-12);
        prop_assert!(linalg::norm(&g1) <= g * linalg::norm(&y1) * (1.0 + 1e-9) + 1e-12);
    }

    /// With the clean label inside the ball, the corrected loss never
    /// exceeds the clean loss, so neither does the mixed objective.
    #[test]
    fn corrected_loss_lower_bounds_the_clean_loss(s in scores(4), y in simplex(4), yt in simplex(4), lam in 0.0f64..1.0) {
        let delta = linalg::distance(&y, &yt).unwrap();
        let clean = ce_loss(&y, &s).unwrap();
        for set in [CorrectionSet::Ball, CorrectionSet::BallSimplex] {
            let la = loss_a_over(&yt, &s, delta, set).unwrap().value;
            prop_assert!(la <= clean + 1e-9);
            prop_assert!(lam * clean + (1.0 - lam) * la <= clean + 1e-9);
        }
    }

    #[test]
    fn simplex_minimiser_is_feasible_and_between_the_bounds(s in scores(5), yt in simplex(5), delta in 0.0f64..1.2) {
        let r = loss_a_over(&yt, &s, delta, CorrectionSet::BallSimplex).unwrap();
        let z = &r.minimizer_z;
        prop_assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(z.iter().all(|v| *v >= -1e-12));
        prop_assert!(linalg::distance(z, &yt).unwrap() <= delta + 1e-9);
        let ball = loss_a(&yt, &s, delta).unwrap().value;
        prop_assert!(r.value >= ball - 1e-9);
        prop_assert!(r.value <= ce_loss(&yt, &s).unwrap() + 1e-9);
        let p = p_of_scores(&s).unwrap();
        let pmin = p.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(r.value >= pmin - 1e-9);
    }

    #[test]
    fn biased_labels_stay_on_the_simplex(y in simplex(5), delta in 0.0f64..0.6) {
        let b = bias_label(&y, delta).unwrap();
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(b.iter().all(|v| *v >= 0.0));
        prop_assert!(linalg::distance(&b, &y).unwrap() <= delta + 1e-9);
    }

    #[test]
    fn mixup_labels_are_convex_combinations(w in simplex(3), y1 in simplex(4), y2 in simplex(4), y3 in simplex(4)) {
        let xs = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let yr: Vec<&[f64]> = vec![&y1, &y2, &y3];
        let (x, y) = mixup_k(&xr, &yr, &w).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!((x[0] - (w[0] + w[2])).abs() < 1e-12);
    }

    #[test]
    fn mixed_gradient_endpoints(seed in 0u64..500, mlp: bool, delta in 0.0f64..0.4) {
        let m = model(seed, mlp, 3, 3);
        let mut rng = Rng::new(seed);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(3, 1.0)).collect();
        let ys = [vec![1.0, 0.0, 0.0], vec![0.2, 0.5, 0.3], vec![0.0, 0.0, 1.0], vec![0.3, 0.3, 0.4]];
        let orig: Vec<(&[f64], &[f64])> = vec![(&xs[0], &ys[0]), (&xs[1], &ys[1])];
        let aug: Vec<(&[f64], &[f64])> = vec![(&xs[2], &ys[2]), (&xs[3], &ys[3])];
        let mean = |b: &[(&[f64], &[f64])]| {
            let mut g = vec![0.0; m.params().len()];
            for (x, y) in b {
                linalg::axpy(0.5, &ce_grad(&m, x, y).unwrap().grad, &mut g);
            }
            g
        };
        let only_orig = combined_grad(&m, &orig, &[], &MixWeights::new(1.0, delta, 2).unwrap()).unwrap();
        let only_aug = combined_grad(&m, &[], &aug, &MixWeights::new(0.0, 0.0, 2).unwrap()).unwrap();
        prop_assert!(linalg::distance(&only_orig, &mean(&orig)).unwrap() < 1e-12);
        prop_assert!(linalg::distance(&only_aug, &mean(&aug)).unwrap() < 1e-12);
    }

    #[test]
    fn constant_estimates_are_monotone_in_the_sample(seed in 0u64..200) {
        let mut rng = Rng::new(seed);
        let a = Mat::new(3, 3, rng.normal_vec(9, 1.0)).unwrap();
        let q = Quadratic::new(a, vec![0.5, -0.5, 0.0]).unwrap();
        let pts: Vec<Vec<f64>> = (0..30).map(|_| rng.normal_vec(3, 2.0)).collect();
        // the floor of a least-squares problem is at most any sampled value
        let floor = 0.0;
        if let (Ok(all), Ok(sub)) = (estimate_mu(&q, floor, &pts), estimate_mu(&q, floor, &pts[..10])) {
            prop_assert!(sub >= all);
        }
        let pairs: Vec<_> = pts.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
        let few = estimate_l_smooth(&q, &pairs[..5]).unwrap();
        let many = estimate_l_smooth(&q, &pairs).unwrap();
        prop_assert!(many >= few);
    }

    #[test]
    fn trace_csv_round_trips(vals in prop::collection::vec((any::<f64>(), -1e300f64..1e300), 1..20)) {
        let records: Vec<TraceRecord> = vals
            .iter()
            .enumerate()
            .map(|(i, (a, b))| TraceRecord {
                t: i,
                stage: (i % 3) as u8,
                l: if a.is_finite() { *a } else { 0.0 },
                l_tilde: *b,
                l_c: b / 3.0,
                grad_norm: b.abs(),
                constraint: -b,
            })
            .collect();
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (x, y) in back.iter().zip(&records) {
            prop_assert_eq!(x.l.to_bits(), y.l.to_bits());
            prop_assert_eq!(x.l_tilde.to_bits(), y.l_tilde.to_bits());
            prop_assert_eq!(x.l_c.to_bits(), y.l_c.to_bits());
            prop_assert_eq!(x.constraint.to_bits(), y.constraint.to_bits());
        }
    }
}

use hdsr_core::analysis::{cosine_similarity_matrix, hungarian_max, pearson};
use hdsr_core::dynsys::Trajectory;
use hdsr_core::eval::{hellinger_distance, power_spectrum, state_space_divergence};
use hdsr_core::model::{materialize, GroupParams, ModelSpec, Scheme, SubjectFeature};
use hdsr_core::train::gtf_interpolate;
use hdsr_core::Mat;
use proptest::prelude::*;

fn trajectory(n: usize) -> impl Strategy<Value = Trajectory> {
    (4usize..60).prop_flat_map(move |t| {
        prop::collection::vec(-50.0f64..50.0, t * n)
            .prop_map(move |v| Trajectory::new(Mat::from_vec(t, n, v).unwrap(), 1.0).unwrap())
    })
}

proptest! {
    #[test]
    fn kl_is_finite_and_nonnegative(a in trajectory(2), b in trajectory(2), m in 1usize..12) {
        let d = state_space_divergence(&a, &b, m).unwrap();
        prop_assert!(d.is_finite() && d >= 0.0);
        prop_assert_eq!(state_space_divergence(&a, &a, m).unwrap(), 0.0);
    }

    #[test]
    fn hellinger_is_bounded_and_symmetric(a in trajectory(3), b in trajectory(3)) {
        let d = hellinger_distance(&a, &b, 2.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let e = hellinger_distance(&b, &a, 2.0).unwrap();
        prop_assert!((d - e).abs() < 1e-12);
    }

    #[test]
    fn spectra_are_distributions(v in prop::collection::vec(-1e3f64..1e3, 2..300), s in 0.0f64..5.0) {
        let p = power_spectrum(&v, s).unwrap();
        prop_assert_eq!(p.values.len(), v.len() / 2 + 1);
        prop_assert!((p.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.values.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn interpolation_stays_between_endpoints(
        pair in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..8),
        alpha in 0.0f64..=1.0,
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pair.into_iter().unzip();
        let z = gtf_interpolate(&a, &b, alpha);
        for i in 0..a.len() {
            let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
            prop_assert!(z[i] >= lo - 1e-12 && z[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn subject_parameters_are_linear_in_the_feature(
        vals in prop::collection::vec(-1.0f64..1.0, 200),
        l1 in prop::collection::vec(-2.0f64..2.0, 2),
        l2 in prop::collection::vec(-2.0f64..2.0, 2),
        outer in any::<bool>(),
    ) {
        let mut spec = ModelSpec::shplrnn(3, 2).with_hidden(5);
        if outer {
            spec.scheme = Scheme::OuterProduct;
        }
        let mut g = GroupParams::zeros(spec).unwrap();
        let n = g.len();
        g.values_mut().copy_from_slice(&vals[..n]);
        let sum: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| a + b).collect();
        let flat = |l: &[f64]| -> Vec<f64> {
            let m = materialize(&g, &SubjectFeature(l.to_vec())).unwrap();
            match m.flow {
                hdsr_core::model::FlowParams::ShPlrnn(p) => {
                    let mut v = p.a.clone();
                    v.extend_from_slice(p.w1.as_slice());
                    v.extend_from_slice(p.w2.as_slice());
                    v.extend_from_slice(&p.h1);
                    v.extend_from_slice(&p.h2);
                    v
                }
                _ => unreachable!(),
            }
        };
        let (a, b, c) = (flat(&l1), flat(&l2), flat(&sum));
        for i in 0..a.len() {
            prop_assert!((a[i] + b[i] - c[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn hungarian_beats_identity(vals in prop::collection::vec(-5.0f64..5.0, 25)) {
        let w = Mat::from_vec(5, 5, vals).unwrap();
        let a = hungarian_max(&w);
        let best: f64 = (0..5).map(|r| w[(r, a[r])]).sum();
        let ident: f64 = (0..5).map(|r| w[(r, r)]).sum();
        prop_assert!(best >= ident - 1e-12);
    }

    #[test]
    fn cosine_similarities_are_symmetric_and_bounded(vals in prop::collection::vec(-3.0f64..3.0, 12)) {
        let m = cosine_similarity_matrix(&Mat::from_vec(4, 3, vals).unwrap());
        for a in 0..4 {
            for b in 0..4 {
                let v = m[(a, b)];
                prop_assert!(v.is_nan() || (-1.0..=1.0).contains(&v));
                prop_assert!(v.is_nan() == m[(b, a)].is_nan());
                if !v.is_nan() {
                    prop_assert_eq!(v, m[(b, a)]);
                }
            }
        }
    }

    #[test]
    fn pearson_is_scale_invariant(
        xs in prop::collection::vec(-5.0f64..5.0, 3..30),
        k in 0.1f64..10.0,
        c in -5.0f64..5.0,
    ) {
        let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| v * v + i as f64).collect();
        let scaled: Vec<f64> = xs.iter().map(|v| k * v + c).collect();
        let r1 = pearson(&xs, &ys);
        let r2 = pearson(&scaled, &ys);
        prop_assert!((r1 - r2).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&r1));
    }
}

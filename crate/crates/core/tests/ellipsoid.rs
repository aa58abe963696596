use crokit::uncertainty::Ellipsoid;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn arb_set(m: usize) -> impl Strategy<Value = Ellipsoid> {
    (
        prop::collection::vec(-1.0f64..1.0, m),
        prop::collection::vec(-1.0f64..1.0, m * m),
        0.05f64..4.0,
    )
        .prop_map(move |(mu, a, r)| {
            let a = DMatrix::from_vec(m, m, a);
            let sigma = &a * a.transpose() + DMatrix::identity(m, m) * 0.05;
            Ellipsoid::from_shape(DVector::from_vec(mu), &sigma, r).unwrap()
        })
}

fn arb_case() -> impl Strategy<Value = (Ellipsoid, DVector<f64>)> {
    (1usize..5).prop_flat_map(|m| (arb_set(m), prop::collection::vec(-3.0f64..3.0, m).prop_map(DVector::from_vec)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn mahalanobis_agrees_with_explicit_inverse((set, xi) in arb_case()) {
        let d = &xi - set.mu();
        let inv = set.sigma().try_inverse().unwrap();
        let want = d.dot(&(inv * &d));
        let got = set.mahalanobis_sq(&xi).unwrap();
        prop_assert!((got - want).abs() <= 1e-8 * (1.0 + want));
        prop_assert_eq!(set.contains(&xi).unwrap(), got <= 1.0 + 1e-9);
    }

    #[test]
    fn boundary_points_lie_on_the_boundary((set, u) in arb_case()) {
        prop_assume!(u.norm() > 1e-3);
        let b = set.boundary_point(&u);
        prop_assert!((set.mahalanobis_sq(&b).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn support_function_bounds_the_set((set, v) in arb_case()) {
        let (h, arg) = set.support_function(&v).unwrap();
        prop_assert!((arg.dot(&v) - h).abs() <= 1e-9 * (1.0 + h.abs()));
        prop_assert!(set.mahalanobis_sq(&arg).unwrap() <= 1.0 + 1e-8 || v.norm() == 0.0);
        for k in 0..50 {
            let t = k as f64 * 0.7;
            let u = DVector::from_fn(set.dim(), |i, _| (t * (i + 1) as f64).sin() + 0.1);
            prop_assert!(set.boundary_point(&u).dot(&v) <= h + 1e-9);
        }
    }

    #[test]
    fn smooth_membership_brackets_hard_membership((set, xi) in arb_case(), beta in 1.0f64..100.0) {
        let y = set.smooth_membership(&xi, beta).unwrap();
        prop_assert!((0.0..=1.0).contains(&y));
        let inside = set.mahalanobis_sq(&xi).unwrap() < 1.0;
        prop_assert_eq!(y > 0.5, inside);
        // sharper sets move further from one half
        let sharper = set.smooth_membership(&xi, 2.0 * beta).unwrap();
        prop_assert!((sharper - 0.5).abs() >= (y - 0.5).abs() - 1e-15);
    }

    #[test]
    fn scaling_the_radius_scales_distance((set, xi) in arb_case(), s in 0.1f64..10.0) {
        let scaled = set.with_scale(set.r() * s).unwrap();
        let a = set.mahalanobis_sq(&xi).unwrap();
        let b = scaled.mahalanobis_sq(&xi).unwrap();
        prop_assert!((a - s * b).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn json_round_trip((set, _) in arb_case()) {
        let back = Ellipsoid::from_json(&set.to_json()).unwrap();
        prop_assert_eq!(back, set);
    }
}

#[test]
fn rejects_invalid_factors() {
    let mu = DVector::zeros(2);
    assert!(Ellipsoid::new(mu.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), 1.0).is_err());
    assert!(Ellipsoid::new(mu.clone(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, -1.0]), 1.0).is_err());
    assert!(Ellipsoid::new(mu.clone(), DMatrix::identity(2, 2), -1.0).is_err());
    assert!(Ellipsoid::new(mu, DMatrix::identity(3, 3), 1.0).is_err());
}

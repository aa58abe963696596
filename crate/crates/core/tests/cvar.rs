use crokit::risk::{cvar, cvar_subgradient};
use proptest::prelude::*;

/// Maximum of `υᵀy` over the capped simplex by enumerating its vertices:
/// every coordinate sits at 0 or at the cap except at most one, which takes
/// up the remaining mass.
fn lp_oracle(y: &[f64], alpha: f64) -> f64 {
    let m = y.len();
    let cap = 1.0 / ((1.0 - alpha) * m as f64);
    let mut best = f64::NEG_INFINITY;
    let states = 3usize.pow(m as u32);
    for code in 0..states {
        let mut c = code;
        let mut at_cap = Vec::new();
        let mut free = Vec::new();
        for i in 0..m {
            match c % 3 {
                1 => at_cap.push(i),
                2 => free.push(i),
                _ => {}
            }
            c /= 3;
        }
        if free.len() > 1 {
            continue;
        }
        let rest = 1.0 - cap * at_cap.len() as f64;
        let value: f64 = at_cap.iter().map(|&i| cap * y[i]).sum();
        let value = match free.first() {
            Some(&j) if rest >= -1e-12 && rest <= cap + 1e-12 => value + rest * y[j],
            Some(_) => continue,
            None if rest.abs() <= 1e-12 => value,
            None => continue,
        };
        best = best.max(value);
    }
    best
}

fn levels() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.0), Just(0.25), Just(0.5), Just(0.9)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_vertex_enumeration(y in prop::collection::vec(-5.0f64..5.0, 1..=6), alpha in levels()) {
        let got = cvar(&y, alpha).unwrap();
        let want = lp_oracle(&y, alpha);
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn ties_match_vertex_enumeration(y in prop::collection::vec(prop_oneof![Just(-1.0), Just(0.0), Just(2.0)], 1..=6), alpha in levels()) {
        let got = cvar(&y, alpha).unwrap();
        prop_assert!((got - lp_oracle(&y, alpha)).abs() <= 1e-12);
    }

    #[test]
    fn subgradient_is_feasible_and_complementary(y in prop::collection::vec(-5.0f64..5.0, 1..=40), alpha in levels()) {
        let w = cvar_subgradient(&y, alpha).unwrap();
        let cap = 1.0 / ((1.0 - alpha) * y.len() as f64);
        prop_assert!(w.iter().all(|&v| v >= 0.0 && v <= cap + 1e-15));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let dot: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
        prop_assert!((dot - cvar(&y, alpha).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn monotone_in_level(y in prop::collection::vec(-5.0f64..5.0, 1..=30)) {
        let a = cvar(&y, 0.25).unwrap();
        let b = cvar(&y, 0.9).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean <= a + 1e-12 && a <= b + 1e-12 && b <= max + 1e-12);
    }

    #[test]
    fn translation_equivariant(y in prop::collection::vec(-5.0f64..5.0, 1..=20), c in -3.0f64..3.0, alpha in levels()) {
        let shifted: Vec<f64> = y.iter().map(|v| v + c).collect();
        prop_assert!((cvar(&shifted, alpha).unwrap() - cvar(&y, alpha).unwrap() - c).abs() <= 1e-11);
    }
}

#[test]
fn rejects_bad_input() {
    assert!(cvar(&[], 0.5).is_err());
    assert!(cvar(&[1.0], 1.0).is_err());
    assert!(cvar(&[f64::NAN], 0.5).is_err());
}

use crokit::data::{
    load_stock_panel, make_returns, rolling_windows, sample_assets, standard_split, synthetic_panel, Dataset, MixtureEnv,
    Split, StockConfig,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

#[test]
fn default_split_is_600_400_1000() {
    let d = MixtureEnv::default_env().sample(2000, 0).unwrap();
    assert_eq!(d.split_sizes(), (600, 400, 1000));
    let small = MixtureEnv::default_env().sample(10, 0).unwrap();
    assert_eq!(small.split_sizes(), (3, 2, 5));
}

#[test]
fn checked_in_environment_matches_the_builtin_one() {
    let text = include_str!("../configs/default_env.json");
    assert_eq!(MixtureEnv::from_json(text).unwrap(), MixtureEnv::default_env());
}

#[test]
fn same_seed_same_draws() {
    let env = MixtureEnv::default_env().perturbed(4);
    assert_eq!(env.sample(300, 9).unwrap(), env.sample(300, 9).unwrap());
    assert_ne!(env.sample(300, 9).unwrap(), env.sample(300, 10).unwrap());
}

/// Sample moments match the mixture's mean and total covariance within a
/// few standard errors.
#[test]
fn sample_moments_match_the_mixture() {
    let env = MixtureEnv::default_env();
    let n = 200_000;
    let d = env.sample(n, 1).unwrap();
    let dim = env.joint_dim();
    let rows: Vec<DVector<f64>> = d
        .psi
        .iter()
        .zip(&d.xi)
        .map(|(p, x)| DVector::from_iterator(dim, p.iter().chain(x.iter()).copied()))
        .collect();
    let mut mean = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    for c in &env.components {
        mean += DVector::from_column_slice(&c.mean) * c.weight;
    }
    for c in &env.components {
        let m = DVector::from_column_slice(&c.mean) - &mean;
        let s = DMatrix::from_fn(dim, dim, |i, j| c.cov[i][j]);
        cov += (s + &m * m.transpose()) * c.weight;
    }
    let emp_mean = rows.iter().fold(DVector::zeros(dim), |a, r| a + r) / n as f64;
    let emp_cov = rows
        .iter()
        .fold(DMatrix::zeros(dim, dim), |a, r| a + (r - &emp_mean) * (r - &emp_mean).transpose())
        / (n - 1) as f64;
    for i in 0..dim {
        let se = (cov[(i, i)] / n as f64).sqrt();
        assert!((emp_mean[i] - mean[i]).abs() < 5.0 * se, "mean {i}");
        for j in 0..dim {
            let tol = 5.0 * ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt() + 0.02;
            assert!((emp_cov[(i, j)] - cov[(i, j)]).abs() < tol, "cov {i},{j}");
        }
    }
}

#[test]
fn conditional_law_integrates_to_the_marginal() {
    // E[E[ξ|ψ]] = E[ξ]
    let env = MixtureEnv::default_env();
    let d = env.sample(50_000, 2).unwrap();
    let m = env.uncertainty_dim;
    let mut avg_cond = DVector::zeros(m);
    for p in d.psi.iter().take(5000) {
        avg_cond += env.conditional(p).unwrap().mean();
    }
    avg_cond /= 5000.0;
    let emp = d.xi.iter().fold(DVector::zeros(m), |a, x| a + x) / d.len() as f64;
    assert!((avg_cond - emp).amax() < 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_sizes_follow_the_floors(n in 1usize..5000) {
        let s = standard_split(n);
        let train = s.iter().filter(|&&v| v == Split::Train).count();
        let val = s.iter().filter(|&&v| v == Split::Validation).count();
        prop_assert_eq!(train, n * 3 / 10);
        prop_assert_eq!(val, n / 5);
        prop_assert_eq!(s.len(), n);
        // chronological blocks
        prop_assert!(s.windows(2).all(|w| (w[0] as u8) <= (w[1] as u8)));
    }

    #[test]
    fn dataset_csv_round_trip(n in 1usize..200, seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = MixtureEnv::default_env().sample(n, seed).unwrap();
        d.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        prop_assert_eq!(back.psi, d.psi);
        prop_assert_eq!(back.xi, d.xi);
        prop_assert_eq!(back.split, d.split);
    }

    #[test]
    fn window_arithmetic(n in 10usize..400, tr in 1usize..60, va in 1usize..30, te in 1usize..30, stride in 1usize..50) {
        prop_assume!(tr + va + te <= n);
        let d = MixtureEnv::default_env().sample(n, 0).unwrap();
        let w = rolling_windows(&d, tr, va, te, stride).unwrap();
        prop_assert_eq!(w.len(), (n - tr - va - te) / stride + 1);
        for (k, win) in w.iter().enumerate() {
            prop_assert_eq!(win.start, k * stride);
            prop_assert_eq!(win.data.split_sizes(), (tr, va, te));
            prop_assert_eq!(&win.data.psi[0], &d.psi[k * stride]);
            prop_assert_eq!(win.data.psi.last().unwrap(), &d.psi[k * stride + tr + va + te - 1]);
        }
    }

    #[test]
    fn asset_subsets_are_sorted_and_distinct(n in 1usize..60, k in 1usize..60, seed in 0u64..100) {
        prop_assume!(k <= n);
        let idx = sample_assets(n, k, seed).unwrap();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
        prop_assert_eq!(idx, sample_assets(n, k, seed).unwrap());
    }
}

#[test]
fn windows_from_small_examples() {
    let d = MixtureEnv::default_env().sample(10, 0).unwrap();
    let w = rolling_windows(&d, 5, 2, 3, 10).unwrap();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].data.psi[..5], d.psi[0..5]);
    assert_eq!(w[0].data.psi[5..7], d.psi[5..7]);
    assert_eq!(w[0].data.psi[7..], d.psi[7..10]);
    let d = MixtureEnv::default_env().sample(15, 0).unwrap();
    let w = rolling_windows(&d, 5, 2, 3, 5).unwrap();
    assert_eq!(w.len(), 2);
    assert_eq!(w[1].start, 5);
    assert_eq!(w[1].data.psi[0], d.psi[5]);
    assert!(rolling_windows(&d, 10, 5, 5, 1).is_err());
}

#[test]
fn price_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prices.csv");
    let panel = synthetic_panel(6, 2, 120, 3);
    panel.write_csv(&path).unwrap();
    let back = load_stock_panel(&path).unwrap();
    assert_eq!(back.dates, panel.dates);
    assert_eq!(back.assets, panel.assets);
    assert_eq!(back.indices, panel.indices);
    assert_eq!(back.closes, panel.closes);
    assert_eq!(back.volumes, panel.volumes);
    assert_eq!(back.index_levels, panel.index_levels);
    let a = make_returns(&panel, &StockConfig::default()).unwrap();
    let b = make_returns(&back, &StockConfig::default()).unwrap();
    assert_eq!(a, b);
}

/// Changing anything on or after day t leaves every covariate dated t
/// unchanged, and the covariates dated t+1 onward are the only ones allowed
/// to move.
#[test]
fn covariates_never_look_ahead() {
    let panel = synthetic_panel(4, 2, 200, 8);
    let base = make_returns(&panel, &StockConfig::default()).unwrap();
    for cut in [50usize, 120, 199] {
        let mut edited = panel.clone();
        for t in cut..edited.dates.len() {
            for a in 0..4 {
                edited.closes[t][a] *= 1.7;
                edited.volumes[t][a] *= 9.0;
            }
            for i in 0..2 {
                edited.index_levels[t][i] *= 0.6;
            }
        }
        let moved = make_returns(&edited, &StockConfig::default()).unwrap();
        for (row, date) in base.dates.iter().enumerate() {
            let t = panel.dates.iter().position(|d| d == date).unwrap();
            if t <= cut {
                assert_eq!(base.psi[row], moved.psi[row], "covariates on {date} saw day {cut}");
            }
            if t < cut {
                assert_eq!(base.xi[row], moved.xi[row]);
            }
        }
    }
}

#[test]
fn window_splits_are_chronological() {
    let panel = synthetic_panel(3, 1, 400, 2);
    let d = make_returns(&panel, &StockConfig::default()).unwrap();
    for w in rolling_windows(&d, 150, 50, 60, 40).unwrap() {
        let last = |s| w.data.subset(s).dates.last().cloned().unwrap();
        let first = |s| w.data.subset(s).dates.first().cloned().unwrap();
        assert!(last(Split::Train) < first(Split::Validation));
        assert!(last(Split::Validation) < first(Split::Test));
    }
}

#[test]
fn malformed_price_files_are_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "date,A_close,A_volume\n2020-01-02,abc,10\n").unwrap();
    assert_eq!(load_stock_panel(&path).unwrap_err().exit_code(), 2);
    assert_eq!(load_stock_panel(&dir.path().join("missing.csv")).unwrap_err().exit_code(), 2);
}

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Set `CROKIT_ACCEPTANCE_STRICT=1` to exit non-zero when any fails.

use std::time::Instant;

use crokit::baselines::{calibrate_conformal, conformal_set, fit_point_predictor, FitConfig, ShapeRule};
use crokit::coverage::theoretical_cc_loss;
use crokit::data::{
    load_stock_panel, make_returns, rolling_windows, synthetic_panel, MixtureEnv, Split, StockConfig,
};
use crokit::evaluation::{quantile, EvalReport};
use crokit::experiment::{default_train_config, run_synthetic_benchmark, Method, RunConfig};
use crokit::implicit::kkt_sensitivity;
use crokit::nn::{Activation, ParamVector, SetPredictor, SetPredictorConfig, SetPredictorGrad};
use crokit::risk::{cvar, cvar_subgradient};
use crokit::solver::{solve_cro, worst_case_objective, RobustProblem};
use crokit::training::{dual_loss, ecro_loss, initial_theta, train, LossSettings, TrainConfig, TrainMethod};
use crokit::uncertainty::Ellipsoid;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn iqr(v: &[f64]) -> f64 {
    quantile(v, 0.75) - quantile(v, 0.25)
}

fn method_reports(reports: &[EvalReport], m: Method) -> Vec<&EvalReport> {
    reports.iter().filter(|r| r.method == m.as_str()).collect()
}

fn mean_of(reports: &[EvalReport], m: Method, f: impl Fn(&EvalReport) -> f64) -> f64 {
    mean(&method_reports(reports, m).into_iter().map(f).collect::<Vec<_>>())
}

fn benchmark_trend(reports: &[EvalReport], seconds: f64) -> Outcome {
    let cv = |m| mean_of(reports, m, |r| r.cvar);
    let best_eto = cv(Method::EtoEs).min(cv(Method::EtoCs)).min(cv(Method::EtoCcs));
    let (ecro, dts) = (cv(Method::Ecro), cv(Method::Dts));
    let pass = ecro <= 0.9 * best_eto && dts <= 0.9 * best_eto && seconds <= 1800.0;
    outcome(
        pass,
        format!(
            "mean CVaR ecro {ecro:.4}, dts {dts:.4}, best ETO {best_eto:.4} (eto-es {:.4}, eto-cs {:.4}, eto-ccs {:.4}); {seconds:.0}s",
            cv(Method::EtoEs),
            cv(Method::EtoCs),
            cv(Method::EtoCcs)
        ),
    )
}

fn coverage_split(reports: &[EvalReport]) -> Outcome {
    let cov = |m| mean_of(reports, m, |r| r.marginal_coverage);
    let (dts, ecro, cs, ccs) = (cov(Method::Dts), cov(Method::Ecro), cov(Method::EtoCs), cov(Method::EtoCcs));
    let pass = (0.85..=0.96).contains(&dts) && ecro < 0.5 && (0.87..=0.95).contains(&cs) && (0.87..=0.95).contains(&ccs);
    outcome(pass, format!("coverage dts {dts:.3}, ecro {ecro:.3}, eto-cs {cs:.3}, eto-ccs {ccs:.3}"))
}

fn conditional_concentration(reports: &[EvalReport]) -> Outcome {
    let pooled = |m| -> Vec<f64> {
        method_reports(reports, m)
            .into_iter()
            .flat_map(|r| r.conditional_coverage.iter().copied())
            .collect()
    };
    let (dts, es) = (pooled(Method::Dts), pooled(Method::EtoEs));
    let med = quantile(&dts, 0.5);
    let (dts_iqr, es_iqr) = (iqr(&dts), iqr(&es));
    outcome(
        med >= 0.85 && es_iqr > dts_iqr,
        format!(
            "dts median {med:.3}, IQR {dts_iqr:.4}; eto-es median {:.3}, IQR {es_iqr:.4} ({} covariates each)",
            quantile(&es, 0.5),
            dts.len()
        ),
    )
}

fn coverage_loss_suite() -> Outcome {
    let mc = 20_000;
    let mut worst_oracle = 0.0f64;
    let mut weakest_detection = f64::INFINITY;
    for seed in 0..10u64 {
        let env = MixtureEnv::default_env().perturbed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi: Vec<DVector<f64>> = (0..20).map(|_| DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0))).collect();
        let loss = theoretical_cc_loss(|p| env.oracle_set(p, 0.1, mc, 3), Some(&env), &psi, 0.1, mc, 5).unwrap();
        worst_oracle = worst_oracle.max(loss);
        // one probe of a pair gets a set at the wrong level
        let pair = &psi[..2];
        for level in [0.6, 0.75, 0.995] {
            let family = |p: &DVector<f64>| {
                let eps = if p == &pair[0] { 1.0 - level } else { 0.1 };
                env.oracle_set(p, eps, mc, 3)
            };
            let dev = env.conditional_coverage_prob(&pair[0], &family(&pair[0]).unwrap(), mc, 5).unwrap() - 0.9;
            if dev.abs() >= 0.1 {
                let l = theoretical_cc_loss(family, Some(&env), pair, 0.1, mc, 5).unwrap();
                weakest_detection = weakest_detection.min(l);
            }
        }
    }
    outcome(
        worst_oracle <= 1e-3 && weakest_detection >= 0.005,
        format!("oracle sets: max loss {worst_oracle:.2e}; deviating probe: min loss {weakest_detection:.4}"),
    )
}

fn random_set(rng: &mut ChaCha8Rng, m: usize) -> Ellipsoid {
    let mu = DVector::from_fn(m, |_, _| rng.random_range(-0.5..0.5));
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.6..0.6));
    let sigma = &a * a.transpose() + DMatrix::identity(m, m) * 0.02;
    Ellipsoid::from_shape(mu, &sigma, rng.random_range(0.2..3.0)).unwrap()
}

fn robust_objective(set: &Ellipsoid, x: &DVector<f64>) -> f64 {
    -set.mu().dot(x) + x.dot(&(set.sigma() * x)).sqrt()
}

fn solver_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let problem = RobustProblem::portfolio(3);
    let mut grid_gap = 0.0f64;
    for _ in 0..100 {
        let set = random_set(&mut rng, 3);
        let sol = solve_cro(&problem, &set, &problem.uniform_point(), 200).unwrap();
        let n = 1000;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n - i {
                let x = DVector::from_vec(vec![i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64]);
                best = best.min(robust_objective(&set, &x));
            }
        }
        grid_gap = grid_gap.max((sol.objective - best).abs());
    }
    let mut violations = 0;
    let mut sample_gap = 0.0f64;
    for case in 0..10 {
        let m = 2 + case % 2;
        let set = random_set(&mut rng, m);
        let raw = DVector::from_fn(m, |_, _| rng.random::<f64>());
        let x = &raw / raw.sum();
        let (closed, _) = worst_case_objective(&set, &x).unwrap();
        let mut best = f64::NEG_INFINITY;
        for k in 0..10_000 {
            let u = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let scale = if k % 2 == 0 { 1.0 } else { rng.random::<f64>().powf(1.0 / m as f64) };
            let xi = set.mu() + (set.l() * (&u / u.norm())) * (scale * set.r().sqrt());
            let cost = -xi.dot(&x);
            if cost > closed + 1e-12 {
                violations += 1;
            }
            best = best.max(cost);
        }
        sample_gap = sample_gap.max(closed - best);
    }
    outcome(
        grid_gap <= 1e-4 && violations == 0 && sample_gap <= 1e-3,
        format!("grid gap {grid_gap:.2e} over 100 cases; sampled costs above closed form {violations}, closest gap {sample_gap:.2e}"),
    )
}

fn shifted(theta: &ParamVector, d: &[f64], h: f64) -> ParamVector {
    let mut t = theta.clone();
    for (v, dv) in t.values_mut().iter_mut().zip(d) {
        *v += h * dv;
    }
    t
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let acts = [Activation::Tanh, Activation::Sigmoid, Activation::Identity];
    let mut nn_err = 0.0f64;
    for case in 0..100 {
        let (p, m) = (rng.random_range(1..5), rng.random_range(1..5));
        let depth = rng.random_range(0..3);
        let predictor = SetPredictor::new(SetPredictorConfig {
            hidden: (0..depth).map(|_| rng.random_range(2..7)).collect(),
            activation: acts[case % 3],
            psi_dependent_radius: rng.random_bool(0.5),
            final_gain: 1.0,
            ..SetPredictorConfig::new(p, m)
        });
        let theta = predictor.init(&mut rng);
        let psi: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut seed = SetPredictorGrad::zeros(m);
        seed.mu.iter_mut().chain(seed.l_raw.iter_mut()).for_each(|v| *v = rng.random_range(-1.0..1.0));
        seed.r_raw = rng.random_range(-1.0..1.0);
        let f = |t: &ParamVector| {
            let o = predictor.forward(t, &psi).unwrap().0;
            let a: f64 = o.mu.iter().zip(&seed.mu).map(|(x, y)| x * y).sum();
            let b: f64 = o.l_raw.iter().zip(&seed.l_raw).map(|(x, y)| x * y).sum();
            a + b + o.r_raw * seed.r_raw
        };
        let (_, tape) = predictor.forward(&theta, &psi).unwrap();
        let mut grad = vec![0.0; theta.len()];
        predictor.backward_into(&tape, &seed, &mut grad).unwrap();
        let d: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fd = (f(&shifted(&theta, &d, 1e-6)) - f(&shifted(&theta, &d, -1e-6))) / 2e-6;
        let an: f64 = grad.iter().zip(&d).map(|(a, b)| a * b).sum();
        nn_err = nn_err.max(rel(an, fd, 1e-6));
    }

    let mut kkt_err = 0.0f64;
    let mut cases = 0;
    while cases < 50 {
        let m = rng.random_range(2..6);
        let problem = RobustProblem::portfolio(m);
        let mu = DVector::from_fn(m, |_, _| rng.random_range(0.0..0.3));
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.4..0.4));
        let sigma = &a * a.transpose() + DMatrix::identity(m, m) * 0.05;
        let set = Ellipsoid::from_shape(mu.clone(), &sigma, 1.0).unwrap();
        let point = solve_cro(&problem, &set, &problem.uniform_point(), 500).unwrap();
        if !point.x.iter().zip(point.lambda.iter()).all(|(&x, &l)| x > 1e-3 || l > 1e-3) {
            continue;
        }
        let sens = kkt_sensitivity(&problem, &set, &point).unwrap();
        if sens.degenerate {
            continue;
        }
        cases += 1;
        let dmu = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let dsig = (&b + b.transpose()) * 0.5;
        let solve = |s: f64| {
            let set = Ellipsoid::from_shape(&mu + &dmu * s, &(&sigma + &dsig * s), 1.0).unwrap();
            solve_cro(&problem, &set, &problem.uniform_point(), 500).unwrap().x
        };
        let fd = (solve(1e-6) - solve(-1e-6)) / 2e-6;
        let an = DVector::from_fn(m, |k, _| (sens.dx_dmu.row(k) * &dmu)[0] + sens.dx_dsigma[k].dot(&dsig));
        kkt_err = kkt_err.max((&an - &fd).norm() / an.norm().max(fd.norm()).max(1e-6));
    }

    let data = MixtureEnv::default_env().sample(40, 9).unwrap().subset(Split::Train);
    let cfg = TrainConfig { hidden: vec![8], gamma: 0.5, ..TrainConfig::default() };
    let predictor = SetPredictor::new(cfg.predictor_config(2, 2));
    let theta = initial_theta(&predictor, &data, &cfg).unwrap();
    let (psi, xi) = (data.psi[..8].to_vec(), data.xi[..8].to_vec());
    let mut settings = LossSettings::from_config(&cfg, 2, 10.0);
    settings.tro_steps = 200;
    let warm = vec![DVector::from_element(2, 0.5); 8];
    let eval = dual_loss(&predictor, &theta, &psi, &xi, &warm, &settings, None, None).unwrap();
    let mut dual_err = 0.0f64;
    for _ in 0..10 {
        let d: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |t: &ParamVector| dual_loss(&predictor, t, &psi, &xi, &warm, &settings, None, None).unwrap().value;
        let fd = (f(&shifted(&theta, &d, 1e-5)) - f(&shifted(&theta, &d, -1e-5))) / 2e-5;
        let an: f64 = eval.grad.iter().zip(&d).map(|(a, b)| a * b).sum();
        dual_err = dual_err.max(rel(an, fd, 1e-8));
    }
    outcome(
        nn_err <= 1e-4 && kkt_err <= 1e-3 && dual_err <= 1e-2,
        format!("max relative error: network {nn_err:.2e}, KKT {kkt_err:.2e}, dual loss {dual_err:.2e}"),
    )
}

/// Maximum of `υᵀy` over the capped simplex by vertex enumeration.
fn lp_cvar(y: &[f64], alpha: f64) -> f64 {
    let m = y.len();
    let cap = 1.0 / ((1.0 - alpha) * m as f64);
    let mut best = f64::NEG_INFINITY;
    for code in 0..3usize.pow(m as u32) {
        let (mut c, mut at_cap, mut free) = (code, Vec::new(), Vec::new());
        for i in 0..m {
            match c % 3 {
                1 => at_cap.push(i),
                2 => free.push(i),
                _ => {}
            }
            c /= 3;
        }
        let rest = 1.0 - cap * at_cap.len() as f64;
        let base: f64 = at_cap.iter().map(|&i| cap * y[i]).sum();
        let value = match free.as_slice() {
            [] if rest.abs() <= 1e-12 => base,
            [j] if (-1e-12..=cap + 1e-12).contains(&rest) => base + rest * y[*j],
            _ => continue,
        };
        best = best.max(value);
    }
    best
}

fn cvar_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let (mut value_err, mut comp_err) = (0.0f64, 0.0f64);
    let mut checked = 0;
    for m in 1..=6 {
        for _ in 0..500 {
            let ties = rng.random_bool(0.3);
            let y: Vec<f64> = (0..m)
                .map(|_| if ties { f64::from(rng.random_range(-1..3)) } else { rng.random_range(-5.0..5.0) })
                .collect();
            for alpha in [0.0, 0.25, 0.5, 0.9] {
                let v = cvar(&y, alpha).unwrap();
                value_err = value_err.max((v - lp_cvar(&y, alpha)).abs());
                let w = cvar_subgradient(&y, alpha).unwrap();
                let dot: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
                comp_err = comp_err.max((dot - v).abs());
                checked += 1;
            }
        }
    }
    outcome(
        value_err <= 1e-12 && comp_err <= 1e-12,
        format!("{checked} cases: max |cvar - LP| {value_err:.1e}, max |w.y - cvar| {comp_err:.1e}"),
    )
}

fn conformal_validity() -> Outcome {
    let env = MixtureEnv::default_env();
    let mut coverages = Vec::new();
    for k in 0..50u64 {
        let data = env.sample(2000, 5000 + k).unwrap();
        let (tr, cal, te) = (data.subset(Split::Train), data.subset(Split::Validation), data.subset(Split::Test));
        let pred = fit_point_predictor(&tr, &FitConfig { seed: k, ..FitConfig::default() }).unwrap();
        let c = calibrate_conformal(&pred, ShapeRule::Global, &tr, &cal, 0.1).unwrap();
        let hits = te
            .psi
            .iter()
            .zip(&te.xi)
            .filter(|(p, x)| conformal_set(&c, p).unwrap().contains(x).unwrap())
            .count();
        coverages.push(hits as f64 / te.len() as f64);
    }
    let m = mean(&coverages);
    outcome(
        (0.88..=0.94).contains(&m),
        format!("mean test coverage {m:.4} over 50 resamples (calibration size 400)"),
    )
}

fn warm_start_speedup() -> Outcome {
    let (mut t_warm, mut t_full) = (0.0, 0.0);
    let (mut loss_warm, mut loss_full) = (Vec::new(), Vec::new());
    for seed in 0..3u64 {
        let env = MixtureEnv::default_env().perturbed(seed);
        let data = env.sample(2000, seed).unwrap();
        let (tr, va) = (data.subset(Split::Train), data.subset(Split::Validation));
        let base = TrainConfig { max_epochs: 30, patience: 0, validate: false, seed, ..default_train_config() };
        for (steps, warm) in [(5, true), (200, false)] {
            let cfg = TrainConfig { tro_steps: steps, warm_start: warm, ..base.clone() };
            let predictor = SetPredictor::new(cfg.predictor_config(2, 2));
            let theta0 = initial_theta(&predictor, &tr, &cfg).unwrap();
            let t0 = Instant::now();
            let out = train(TrainMethod::Ecro, &predictor, theta0, &tr, &va, &cfg, None).unwrap();
            let secs = t0.elapsed().as_secs_f64();
            // both end points scored with converged solves on the whole split
            let mut s = LossSettings::from_config(&cfg, 2, cfg.beta_end);
            s.tro_steps = 200;
            let start = vec![DVector::from_element(2, 0.5); tr.len()];
            let value = ecro_loss(&predictor, &out.theta, &tr.psi, &tr.xi, &start, &s).unwrap().value;
            if warm {
                t_warm += secs;
                loss_warm.push(value);
            } else {
                t_full += secs;
                loss_full.push(value);
            }
        }
    }
    let gap = (mean(&loss_warm) - mean(&loss_full)).abs() / mean(&loss_full).abs();
    let ratio = t_warm / t_full;
    outcome(
        gap <= 0.02 && ratio <= 0.5,
        format!(
            "final loss {:.4} (5 warm steps) vs {:.4} (200 cold), gap {:.2}%; wall-clock ratio {ratio:.2}; 3 seeds",
            mean(&loss_warm),
            mean(&loss_full),
            100.0 * gap
        ),
    )
}

fn backtest_plumbing() -> Outcome {
    let dir = std::env::temp_dir().join(format!("crokit-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("prices.csv");
    let panel = synthetic_panel(8, 2, 300, 4);
    panel.write_csv(&path).unwrap();
    let back = load_stock_panel(&path).unwrap();
    let round_trip = back.closes == panel.closes && back.volumes == panel.volumes && back.dates == panel.dates;

    let base = make_returns(&panel, &StockConfig::default()).unwrap();
    let mut edited = panel.clone();
    let cut = 150;
    for t in cut..edited.dates.len() {
        edited.closes[t].iter_mut().for_each(|v| *v *= 1.5);
        edited.volumes[t].iter_mut().for_each(|v| *v *= 5.0);
        edited.index_levels[t].iter_mut().for_each(|v| *v *= 0.5);
    }
    let moved = make_returns(&edited, &StockConfig::default()).unwrap();
    // return row k is dated k + 2
    let no_lookahead = (0..=cut - 2).all(|k| base.psi[k] == moved.psi[k]);

    let small = MixtureEnv::default_env().sample(15, 0).unwrap();
    let one = rolling_windows(&small, 5, 2, 3, 10).unwrap();
    let two = rolling_windows(&small, 5, 2, 3, 5).unwrap();
    let arithmetic = one.len() == 1
        && one[0].data.psi[..] == small.psi[..10]
        && two.len() == 2
        && two[1].start == 5
        && two[1].data.psi[0] == small.psi[5]
        && rolling_windows(&small.subset(Split::Train), 5, 2, 3, 10).is_err();
    let ten = MixtureEnv::default_env().sample(10, 0).unwrap();
    let exact = rolling_windows(&ten, 5, 2, 3, 10).unwrap();
    let arithmetic = arithmetic
        && exact.len() == 1
        && exact[0].data.split_sizes() == (5, 2, 3)
        && exact[0].data.psi == ten.psi;
    let _ = std::fs::remove_dir_all(&dir);
    outcome(
        round_trip && no_lookahead && arithmetic,
        format!("CSV round trip {round_trip}, no lookahead {no_lookahead}, window arithmetic {arithmetic}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let t0 = Instant::now();
    let cfg = RunConfig::default().resolve().unwrap();
    let reports = run_synthetic_benchmark(&cfg, false).unwrap();
    let bench_secs = t0.elapsed().as_secs_f64();
    results.push((1, "synthetic CVaR trend", benchmark_trend(&reports, bench_secs)));
    results.push((2, "marginal coverage split", coverage_split(&reports)));
    results.push((3, "conditional coverage concentration", conditional_concentration(&reports)));
    results.push((4, "coverage loss property suite", coverage_loss_suite()));
    results.push((5, "solver correctness", solver_correctness()));
    results.push((6, "gradient suite", gradient_suite()));
    results.push((7, "CVaR suite", cvar_suite()));
    results.push((8, "conformal validity", conformal_validity()));
    results.push((9, "warm-start speedup", warm_start_speedup()));
    results.push((10, "backtest plumbing", backtest_plumbing()));
    let mut failed = 0;
    for (k, name, o) in &results {
        println!("criterion {k:>2} {:<4} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var("CROKIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

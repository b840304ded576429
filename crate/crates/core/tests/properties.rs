use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use snewt::covariance::WscAccumulator;
use snewt::experiment::parse_config_str;
use snewt::linalg::{max_abs_diff, min_eigenvalue};
use snewt::optimizer::{Regime, StepsizeSchedule};
use snewt::oracle::{c_star, lambda_matrix, lyapunov_residual, projection_expectation, xi_star};
use snewt::problems::{DesignCovSpec, DesignKind, Family, RegressionModel, Sample};
use snewt::sketch::{solve_newton_sketched, SketchDistribution, SketchSolveConfig, Tau};

fn vector(d: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-2.0..2.0f64, d).prop_map(DVector::from_vec)
}

fn spd(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, d * d).prop_map(move |v| {
        let a = DMatrix::from_vec(d, d, v);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.3
    })
}

fn model(family: Family, d: usize) -> RegressionModel {
    RegressionModel::with_default_x_star(family, DesignCovSpec::new(DesignKind::Toeplitz(0.4), d))
        .unwrap()
}

fn fd_grad(m: &RegressionModel, x: &DVector<f64>, s: &Sample) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_fn(x.len(), |i, _| {
        let mut up = x.clone();
        let mut down = x.clone();
        up[i] += h;
        down[i] -= h;
        (m.loss(&up, s) - m.loss(&down, s)) / (2.0 * h)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradients_match_finite_differences(x in vector(4), a in vector(4), label in any::<bool>(), resp in -3.0..3.0f64) {
        let lin = model(Family::Linear { sigma: 1.0 }, 4);
        let s = Sample { xi_a: a.clone(), xi_b: resp };
        prop_assert!((lin.sample_grad(&x, &s) - fd_grad(&lin, &x, &s)).amax() < 1e-5);

        let log = model(Family::Logistic, 4);
        let s = Sample { xi_a: a, xi_b: if label { 1.0 } else { -1.0 } };
        prop_assert!((log.sample_grad(&x, &s) - fd_grad(&log, &x, &s)).amax() < 1e-5);
    }

    #[test]
    fn hessians_match_finite_differences(x in vector(3), a in vector(3), label in any::<bool>()) {
        for m in [model(Family::Linear { sigma: 1.0 }, 3), model(Family::Logistic, 3)] {
            let s = Sample { xi_a: a.clone(), xi_b: if label { 1.0 } else { -1.0 } };
            let h = 1e-5;
            let fd = DMatrix::from_fn(3, 3, |i, j| {
                let mut up = x.clone();
                let mut down = x.clone();
                up[j] += h;
                down[j] -= h;
                (m.sample_grad(&up, &s)[i] - m.sample_grad(&down, &s)[i]) / (2.0 * h)
            });
            prop_assert!((m.sample_hess(&x, &s) - fd).amax() < 1e-6);
        }
    }

    #[test]
    fn sample_hessian_laws(x in vector(5), a in vector(5), label in any::<bool>()) {
        let s = Sample { xi_a: a.clone(), xi_b: if label { 1.0 } else { -1.0 } };
        let lin = model(Family::Linear { sigma: 1.0 }, 5).sample_hess(&x, &s);
        prop_assert!(min_eigenvalue(&lin) > -1e-12);
        prop_assert!(lin.rank(1e-9 * (1.0 + a.norm_squared())) <= 1);
        let log = model(Family::Logistic, 5).sample_hess(&x, &s);
        prop_assert!(min_eigenvalue(&log) > -1e-12);
        prop_assert!(log.trace() <= 0.25 * a.norm_squared() + 1e-12);
    }

    #[test]
    fn wsc_matches_two_pass(xs in prop::collection::vec(vector(3), 2..60), c_beta in 0.5..2.0f64, beta in 0.51..1.0f64) {
        let schedule = StepsizeSchedule::banded(c_beta, beta);
        let mut acc = WscAccumulator::new(3);
        let phis: Vec<f64> = (0..xs.len()).map(|t| schedule.phi_t(t)).collect();
        for (x, phi) in xs.iter().zip(&phis) {
            acc.update(x, *phi).unwrap();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().fold(DVector::zeros(3), |m, x| m + x) / n;
        let mut direct = DMatrix::zeros(3, 3);
        for (x, phi) in xs.iter().zip(&phis) {
            let c = x - &mean;
            direct += &c * c.transpose() / *phi;
        }
        direct /= n;
        prop_assert!(max_abs_diff(&acc.estimate().unwrap(), &direct) <= 1e-10 * (1.0 + direct.amax()));
    }

    #[test]
    fn sketched_direction_satisfies_sketched_system(b in spd(4), g in vector(4), tau in 1usize..20, seed in any::<u64>()) {
        let mut rng = snewt::rng::aux(seed);
        let dx = solve_newton_sketched(&b, &g, &SketchSolveConfig::kaczmarz(tau), &mut rng).unwrap();
        prop_assert!(dx.iter().all(|v| v.is_finite()));
        let exact = solve_newton_sketched(&b, &g, &SketchSolveConfig::exact(), &mut rng).unwrap();
        prop_assert!((&b * exact + &g).amax() < 1e-9 * (1.0 + g.amax()));
    }

    #[test]
    fn lyapunov_solution_is_consistent(b in spd(4), omega in spd(4), tau in 1usize..8, beta in 0.51..0.99f64) {
        let p = projection_expectation(&b, &SketchDistribution::UniformCoordinate, 0, 0).unwrap();
        let c = c_star(&p, Tau::Steps(tau));
        let lambda = lambda_matrix(&b, &omega, &SketchDistribution::UniformCoordinate, Tau::Steps(tau), 0, 0).unwrap();
        let regime = Regime { beta, c_beta: 1.0 };
        let xi = xi_star(&c, &lambda, regime).unwrap();
        prop_assert!(lyapunov_residual(&c, &xi, &lambda, regime) <= 1e-10 * lambda.norm());
        prop_assert!(min_eigenvalue(&xi) > -1e-10);
    }

    #[test]
    fn config_round_trips(
        family in prop::sample::select(vec!["linear", "logistic"]),
        d in 1usize..8,
        design in prop::sample::select(vec!["identity", "toeplitz", "equicorr"]),
        r in 0.05..0.95f64,
        tau in prop::option::of(1usize..50),
        beta in 0.51..1.0f64,
        c_beta in 0.6..3.0f64,
        n_iters in 1usize..1_000_000,
        n_reps in 1usize..500,
        seed in any::<u64>(),
        record_every in 1usize..5000,
        level in 0.5..0.999f64,
        prior in 0.0..5.0f64,
    ) {
        let tau = tau.map_or("exact".to_string(), |t| t.to_string());
        let text = format!(
            "[problem]\nfamily = {family}\nd = {d}\ndesign = {design}\nr = {r}\n\
             [method]\ntau = {tau}\nhessian_prior = {prior}\n\
             [schedule]\nbeta = {beta}\nc_beta = {c_beta}\n\
             [experiment]\nn_iters = {n_iters}\nn_reps = {n_reps}\nbase_seed = {seed}\n\
             record_every = {record_every}\nlevel = {level}\n"
        );
        let cfg = parse_config_str(&text).unwrap();
        let again = parse_config_str(&cfg.to_string()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}

#[test]
fn config_round_trip_covers_solver_variants() {
    for text in [
        "[problem]\nfamily = linear\nd = 4\n[method]\nsolver = sgd\n",
        "[problem]\nfamily = eqqp\nsigma2 = 1e-4\n[method]\ntau = 40\n",
        "[problem]\nfamily = hs7\n[method]\nsketch = gaussian\nsketch_size = 2\n",
    ] {
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(parse_config_str(&cfg.to_string()).unwrap(), cfg, "{text}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parsers_never_panic(text in "[\\[\\]a-z_=.,#\"0-9eE+\\- \n]{0,200}") {
        let _ = parse_config_str(&text);
        let _ = snewt::experiment::parse_aggregate_csv(&text);
        let _ = snewt::oracle::parse_named_matrices(&text);
        let _ = snewt::oracle::parse_matrix_text(&text);
    }
}

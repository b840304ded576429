//! Replication harness: runs seeded independent replications, scores each
//! at checkpoints against the oracle, and averages in replication order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::{
    plugin_estimate, BatchMeansAccumulator, PlugInAccumulator, RunningMean, WscSink,
};
use crate::inference::ci_from_variance;
use crate::linalg::quad_form;
use crate::optimizer::{HessianMode, NewtonConfig, Regime, SketchedNewton, TraceSink};
use crate::oracle::{rel_cov_err, rel_var_err, write_matrix_text, OracleCovariance};
use crate::problems::{DesignCovSpec, Family, RegressionModel};
use crate::rng::{replication_seed, RunRngs};
use crate::sketch::{SketchDistribution, SketchSolveConfig};
use crate::sqp::{self, EqConstrainedProblem, KktOracle, SqpConfig, SqpSolver};
use crate::Error;

use super::config::{
    Direction, Estimator, ExperimentConfig, ProblemFamily, SketchKind, Solver, XStarRule,
};
use super::tables::{write_aggregate_csv, write_summary_csv, AggregateRow, SummaryRow};
use super::ExperimentError;

const RCE_WSC: usize = 0;
const RCE_PLUGIN: usize = 1;
const RCE_BM: usize = 2;
const COV_WSC: usize = 3;
const COV_PLUGIN: usize = 4;
const COV_BM: usize = 5;
const COV_ORACLE: usize = 6;
const RVE_WSC: usize = 7;
const RVE_PLUGIN: usize = 8;

type Metrics = [Option<f64>; 9];

enum Problem {
    Regression(RegressionModel),
    Constrained(Box<dyn EqConstrainedProblem>),
}

impl Problem {
    fn dim(&self) -> usize {
        match self {
            Self::Regression(m) => m.dim(),
            Self::Constrained(p) => p.dim(),
        }
    }

    fn x_star(&self) -> DVector<f64> {
        match self {
            Self::Regression(m) => m.x_star().clone(),
            Self::Constrained(p) => p.x_star(),
        }
    }
}

fn setup_err(e: Error) -> ExperimentError {
    ExperimentError::Config {
        key: "config".into(),
        line: None,
        message: e.to_string(),
    }
}

fn build_problem(cfg: &ExperimentConfig) -> Result<Problem, ExperimentError> {
    let p = &cfg.problem;
    let family = match p.family {
        ProblemFamily::Linear => Family::Linear { sigma: p.sigma },
        ProblemFamily::Logistic => Family::Logistic,
        other => {
            return sqp::builtin(other.name())
                .map(Problem::Constrained)
                .map_err(setup_err)
        }
    };
    let x_star = match &p.x_star {
        XStarRule::Uniform => crate::problems::default_x_star(p.d),
        XStarRule::Values(v) => DVector::from_vec(v.clone()),
    };
    RegressionModel::new(family, x_star, DesignCovSpec::new(p.design_kind(), p.d))
        .map(Problem::Regression)
        .map_err(setup_err)
}

fn solve_config(cfg: &ExperimentConfig) -> SketchSolveConfig {
    let dist = match cfg.method.sketch {
        SketchKind::Uniform => SketchDistribution::UniformCoordinate,
        SketchKind::Gaussian => SketchDistribution::gaussian_identity(cfg.method.sketch_size),
    };
    SketchSolveConfig {
        dist,
        tau: cfg.method.tau,
        pinv_tol: cfg.method.pinv_tol,
    }
}

fn newton_config(cfg: &ExperimentConfig) -> NewtonConfig {
    match cfg.method.solver {
        Solver::Newton => {
            NewtonConfig::new(solve_config(cfg), cfg.schedule).with_hessian(HessianMode::Averaged {
                prior_weight: cfg.method.hessian_prior,
            })
        }
        Solver::Sgd => NewtonConfig::new(SketchSolveConfig::exact(), cfg.schedule)
            .with_hessian(HessianMode::Frozen),
    }
}

/// Everything a replication is scored against.
#[derive(Debug, Clone)]
pub struct OracleBundle {
    /// CI direction `w`.
    pub direction: DVector<f64>,
    pub x_star: DVector<f64>,
    /// Target of the covariance estimators: `Ξ⋆` for Newton runs (primal
    /// block for constrained problems), `Ω⋆` for averaged SGD.
    pub target: DMatrix<f64>,
    pub regime: Regime,
    /// Named matrices for display.
    pub named: Vec<(String, DMatrix<f64>)>,
}

fn direction_vector(
    cfg: &ExperimentConfig,
    problem: &Problem,
) -> Result<DVector<f64>, ExperimentError> {
    let d = problem.dim();
    match (&cfg.experiment.direction, problem) {
        (Direction::Mean, _) => Ok(DVector::from_element(d, 1.0 / d as f64)),
        (Direction::Values(v), _) => Ok(DVector::from_vec(v.clone())),
        (Direction::Inactive, Problem::Constrained(p)) => {
            sqp::inactive_direction(d, &sqp::inactive_set(p.as_ref())).map_err(setup_err)
        }
        (Direction::Inactive, Problem::Regression(_)) => Err(setup_err(Error::Parameter(
            "inactive direction needs a constrained problem".into(),
        ))),
    }
}

fn oracle_for(cfg: &ExperimentConfig, problem: &Problem) -> Result<OracleBundle, ExperimentError> {
    let regime = cfg.schedule.regime();
    let seed = cfg.experiment.base_seed;
    let mc = cfg.experiment.mc_samples;
    let direction = direction_vector(cfg, problem)?;
    let x_star = problem.x_star();
    let named_full = |o: &OracleCovariance| {
        let mut v = vec![
            ("b_star".to_string(), o.b_star.clone()),
            ("omega_star".to_string(), o.omega_star.clone()),
            ("c_star".to_string(), o.c_star.clone()),
            ("lambda".to_string(), o.lambda.clone()),
            ("xi_star".to_string(), o.xi_star.clone()),
        ];
        if let Some(se) = &o.b_star_se {
            v.push(("b_star_std_err".to_string(), se.clone()));
        }
        v
    };
    let bundle = match (problem, cfg.method.solver) {
        (Problem::Regression(model), Solver::Newton) => {
            let o = OracleCovariance::for_regression(model, &solve_config(cfg), regime, mc, seed)
                .map_err(setup_err)?;
            OracleBundle {
                direction,
                x_star,
                target: o.xi_star.clone(),
                regime,
                named: named_full(&o),
            }
        }
        (Problem::Regression(model), Solver::Sgd) => {
            let moments = crate::oracle::population_moments(model, mc, seed).map_err(setup_err)?;
            let omega = moments.omega().map_err(setup_err)?;
            let mut named = vec![
                ("b_star".to_string(), moments.hessian.clone()),
                ("omega_star".to_string(), omega.clone()),
            ];
            if let Some(se) = moments.hessian_se {
                named.push(("b_star_std_err".to_string(), se));
            }
            OracleBundle {
                direction,
                x_star,
                target: omega,
                regime,
                named,
            }
        }
        (Problem::Constrained(p), _) => {
            let o = KktOracle::new(
                p.as_ref(),
                cfg.problem.sigma2,
                &solve_config(cfg),
                regime,
                mc,
                seed,
            )
            .map_err(setup_err)?;
            let mut named = named_full(&o.full);
            named[0].0 = "kkt_star".to_string();
            let xi_x = o.xi_x();
            named.push(("xi_star_primal".to_string(), xi_x.clone()));
            OracleBundle {
                direction,
                x_star,
                target: xi_x,
                regime,
                named,
            }
        }
    };
    Ok(bundle)
}

/// Builds the problem named in `cfg` and its oracle.
pub fn build_oracle(cfg: &ExperimentConfig) -> Result<OracleBundle, ExperimentError> {
    let problem = build_problem(cfg)?;
    oracle_for(cfg, &problem)
}

/// Matrices printed by the `oracle` command.
pub fn oracle_matrices(
    cfg: &ExperimentConfig,
) -> Result<Vec<(String, DMatrix<f64>)>, ExperimentError> {
    Ok(build_oracle(cfg)?.named)
}

/// `# name` header followed by the matrix rows, per block.
pub fn format_named_matrices(blocks: &[(String, DMatrix<f64>)]) -> String {
    let mut out = String::new();
    for (name, m) in blocks {
        out.push_str("# ");
        out.push_str(name);
        out.push('\n');
        out.push_str(&write_matrix_text(m));
    }
    out
}

fn indicator(b: bool) -> Option<f64> {
    Some(if b { 1.0 } else { 0.0 })
}

/// Coverage indicator of `center ± z √(scale · wᵀΣw)` for `wᵀx⋆`.
fn covers(
    center: f64,
    scale: f64,
    cov: &DMatrix<f64>,
    oracle: &OracleBundle,
    q: f64,
) -> Option<f64> {
    let truth = oracle.direction.dot(&oracle.x_star);
    ci_from_variance(center, scale, quad_form(cov, &oracle.direction), q)
        .ok()
        .and_then(|ci| indicator(ci.contains(truth)))
}

struct NewtonSinks {
    wsc: Option<WscSink>,
    plugin: Option<PlugInAccumulator>,
}

impl NewtonSinks {
    fn new(cfg: &ExperimentConfig, d: usize) -> Self {
        let has = |e| cfg.experiment.estimators.contains(&e);
        Self {
            wsc: has(Estimator::Wsc).then(|| WscSink::new(d, cfg.schedule)),
            plugin: has(Estimator::Plugin).then(|| PlugInAccumulator::new(d)),
        }
    }

    fn record(&mut self, rec: &crate::optimizer::TraceRecord<'_>) {
        if let Some(s) = self.wsc.as_mut() {
            s.record(rec);
        }
        if let Some(s) = self.plugin.as_mut() {
            s.record(rec);
        }
    }

    fn metrics(
        &self,
        x: &DVector<f64>,
        alpha: f64,
        b: &DMatrix<f64>,
        oracle: &OracleBundle,
        q: f64,
    ) -> Metrics {
        let mut m: Metrics = [None; 9];
        let w = &oracle.direction;
        let center = w.dot(x);
        if let Some(est) = self.wsc.as_ref().and_then(|s| s.acc.estimate().ok()) {
            m[RCE_WSC] = Some(rel_cov_err(&est, &oracle.target));
            m[COV_WSC] = covers(center, alpha, &est, oracle, q);
            m[RVE_WSC] = Some(rel_var_err(&est, &oracle.target, w));
        }
        if let Some(est) = self
            .plugin
            .as_ref()
            .and_then(|s| plugin_estimate(s, b, oracle.regime).ok())
        {
            m[RCE_PLUGIN] = Some(rel_cov_err(&est, &oracle.target));
            m[COV_PLUGIN] = covers(center, alpha, &est, oracle, q);
            m[RVE_PLUGIN] = Some(rel_var_err(&est, &oracle.target, w));
        }
        m[COV_ORACLE] = covers(center, alpha, &oracle.target, oracle, q);
        m
    }
}

fn is_checkpoint(t: usize, cfg: &ExperimentConfig) -> bool {
    t.is_multiple_of(cfg.experiment.record_every) || t == cfg.experiment.n_iters
}

fn run_regression_newton(
    cfg: &ExperimentConfig,
    model: &RegressionModel,
    oracle: &OracleBundle,
    seed: u64,
) -> crate::Result<Vec<(usize, Metrics)>> {
    let d = model.dim();
    let q = 1.0 - cfg.experiment.level;
    let mut rngs = RunRngs::from_seed(seed);
    let mut driver = SketchedNewton::new(model, newton_config(cfg), DVector::zeros(d))?;
    let mut sinks = NewtonSinks::new(cfg, d);
    let mut out = Vec::new();
    for t in 1..=cfg.experiment.n_iters {
        let rec = driver.step(&mut rngs)?;
        sinks.record(&rec);
        if is_checkpoint(t, cfg) {
            let s = driver.state();
            out.push((t, sinks.metrics(&s.x, s.last_alpha, &s.b, oracle, q)));
        }
    }
    Ok(out)
}

fn run_regression_sgd(
    cfg: &ExperimentConfig,
    model: &RegressionModel,
    oracle: &OracleBundle,
    seed: u64,
) -> crate::Result<Vec<(usize, Metrics)>> {
    let d = model.dim();
    let q = 1.0 - cfg.experiment.level;
    let mut rngs = RunRngs::from_seed(seed);
    let mut driver = SketchedNewton::new(model, newton_config(cfg), DVector::zeros(d))?;
    let mut bm = cfg
        .experiment
        .estimators
        .contains(&Estimator::BatchMeans)
        .then(|| BatchMeansAccumulator::new(d, cfg.schedule.beta))
        .transpose()?;
    let mut avg = RunningMean::new(d);
    let mut out = Vec::new();
    for t in 1..=cfg.experiment.n_iters {
        let rec = driver.step(&mut rngs)?;
        avg.record(&rec);
        if let Some(b) = bm.as_mut() {
            b.record(&rec);
        }
        if is_checkpoint(t, cfg) {
            let mut m: Metrics = [None; 9];
            let center = oracle.direction.dot(&avg.mean);
            let scale = 1.0 / t as f64;
            if let Some(est) = bm.as_ref().and_then(|b| b.estimate().ok()) {
                m[RCE_BM] = Some(rel_cov_err(&est, &oracle.target));
                m[COV_BM] = covers(center, scale, &est, oracle, q);
            }
            m[COV_ORACLE] = covers(center, scale, &oracle.target, oracle, q);
            out.push((t, m));
        }
    }
    Ok(out)
}

fn run_constrained(
    cfg: &ExperimentConfig,
    problem: &dyn EqConstrainedProblem,
    oracle: &OracleBundle,
    seed: u64,
) -> crate::Result<Vec<(usize, Metrics)>> {
    let d = problem.dim();
    let q = 1.0 - cfg.experiment.level;
    let mut rngs = RunRngs::from_seed(seed);
    let mut sqp_cfg = SqpConfig::new(solve_config(cfg), cfg.schedule);
    sqp_cfg.hessian_prior = cfg.method.hessian_prior;
    let mut solver = SqpSolver::from_start(problem, cfg.problem.sigma2, sqp_cfg)?;
    let mut sinks = NewtonSinks::new(cfg, d);
    let mut out = Vec::new();
    for t in 1..=cfg.experiment.n_iters {
        let rec = solver.step(&mut rngs)?;
        sinks.record(&rec);
        if is_checkpoint(t, cfg) {
            let s = solver.state();
            out.push((t, sinks.metrics(&s.x, s.last_alpha, &s.b, oracle, q)));
        }
    }
    Ok(out)
}

/// Replication-averaged results.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub aggregate: Vec<AggregateRow>,
    pub summary: Vec<SummaryRow>,
    pub reps_ok: usize,
    pub reps_diverged: usize,
}

impl ExperimentReport {
    /// Fails when at least half of the replications diverged.
    pub fn check_divergence(&self) -> Result<(), ExperimentError> {
        let total = self.reps_ok + self.reps_diverged;
        if 2 * self.reps_diverged >= total {
            return Err(ExperimentError::Divergence {
                diverged: self.reps_diverged,
                total,
            });
        }
        Ok(())
    }

    pub fn summary_for(&self, estimator: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.estimator == estimator)
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .filter(|v| v.is_finite())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn aggregate(
    cfg: &ExperimentConfig,
    outcomes: &[crate::Result<Vec<(usize, Metrics)>>],
) -> ExperimentReport {
    let ok: Vec<&Vec<(usize, Metrics)>> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let reps_ok = ok.len();
    let reps_diverged = outcomes.len() - reps_ok;
    let n_rows = ok.first().map_or(0, |v| v.len());
    let aggregate: Vec<AggregateRow> = (0..n_rows)
        .map(|k| {
            let mut values = [None; 9];
            for (j, v) in values.iter_mut().enumerate() {
                *v = mean_of(ok.iter().map(|rep| rep[k].1[j]));
            }
            AggregateRow {
                t: ok[0][k].0,
                values,
            }
        })
        .collect();

    let column_summary = |name: &str, rce: Option<usize>, cov: usize, rve: Option<usize>| {
        let last = aggregate.last();
        SummaryRow {
            estimator: name.to_string(),
            final_coverage: last.and_then(|r| r.values[cov]),
            mean_trajectory_coverage: mean_of(aggregate.iter().map(|r| r.values[cov])),
            final_rel_cov_err: rce.and_then(|j| last.and_then(|r| r.values[j])),
            final_rel_var_err: rve.and_then(|j| last.and_then(|r| r.values[j])),
            reps_ok,
            reps_diverged,
        }
    };
    let mut summary = Vec::new();
    for e in &cfg.experiment.estimators {
        summary.push(match e {
            Estimator::Wsc => column_summary("wsc", Some(RCE_WSC), COV_WSC, Some(RVE_WSC)),
            Estimator::Plugin => {
                column_summary("plugin", Some(RCE_PLUGIN), COV_PLUGIN, Some(RVE_PLUGIN))
            }
            Estimator::BatchMeans => column_summary("batchmeans", Some(RCE_BM), COV_BM, None),
        });
    }
    summary.push(column_summary("oracle", None, COV_ORACLE, None));
    ExperimentReport {
        aggregate,
        summary,
        reps_ok,
        reps_diverged,
    }
}

/// Worker count from `SNEWT_THREADS`, if set to a positive integer.
fn env_threads() -> Option<usize> {
    std::env::var("SNEWT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs every replication with the worker count from `SNEWT_THREADS`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    run_experiment_with_threads(cfg, env_threads())
}

/// Runs every replication on `threads` workers (rayon's default when
/// `None`). Output does not depend on the worker count.
pub fn run_experiment_with_threads(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ExperimentReport, ExperimentError> {
    let problem = build_problem(cfg)?;
    let oracle = oracle_for(cfg, &problem)?;
    if let Problem::Constrained(p) = &problem {
        solve_config(cfg)
            .validate(p.dim() + p.n_constraints())
            .map_err(setup_err)?;
    } else if cfg.method.solver == Solver::Newton {
        solve_config(cfg)
            .validate(problem.dim())
            .map_err(setup_err)?;
    }
    let run_one = |rep: usize| {
        let seed = replication_seed(cfg.experiment.base_seed, rep as u64);
        let out = match (&problem, cfg.method.solver) {
            (Problem::Regression(m), Solver::Newton) => {
                run_regression_newton(cfg, m, &oracle, seed)
            }
            (Problem::Regression(m), Solver::Sgd) => run_regression_sgd(cfg, m, &oracle, seed),
            (Problem::Constrained(p), _) => run_constrained(cfg, p.as_ref(), &oracle, seed),
        };
        if let Err(e) = &out {
            log::warn!("replication {rep} failed: {e}");
        }
        out
    };
    let n = cfg.experiment.n_reps;
    let outcomes: Vec<_> = match threads {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| setup_err(Error::Parameter(e.to_string())))?;
            pool.install(|| (0..n).into_par_iter().map(run_one).collect())
        }
        None => (0..n).into_par_iter().map(run_one).collect(),
    };
    let report = aggregate(cfg, &outcomes);
    log::info!(
        "{} replications finished, {} diverged",
        report.reps_ok,
        report.reps_diverged
    );
    Ok(report)
}

/// Writes the aggregate and summary CSVs to the configured paths.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    report: &ExperimentReport,
) -> Result<(), ExperimentError> {
    let write = |path: &str, text: String| {
        std::fs::write(path, text).map_err(|e| ExperimentError::Io {
            path: path.to_string(),
            message: e.to_string(),
        })
    };
    write(
        &cfg.output.aggregate,
        write_aggregate_csv(&report.aggregate)?,
    )?;
    write(&cfg.output.summary, write_summary_csv(&report.summary)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::parse_config_str;

    fn small(extra: &str) -> ExperimentConfig {
        parse_config_str(&format!(
            "[problem]\nfamily = linear\nd = 3\n[method]\ntau = 2\n[experiment]\nn_iters = 100\nn_reps = 2\nrecord_every = 10\n{extra}"
        ))
        .unwrap()
    }

    #[test]
    fn row_count_matches_checkpoints() {
        let report = run_experiment_with_threads(&small(""), Some(1)).unwrap();
        assert_eq!(report.aggregate.len(), 10);
        assert_eq!(report.aggregate[9].t, 100);
        assert_eq!(report.reps_ok, 2);
        assert_eq!(
            write_aggregate_csv(&report.aggregate)
                .unwrap()
                .lines()
                .count(),
            11
        );
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = small("");
        let a = run_experiment_with_threads(&cfg, Some(1)).unwrap();
        let b = run_experiment_with_threads(&cfg, Some(3)).unwrap();
        assert_eq!(
            write_aggregate_csv(&a.aggregate).unwrap(),
            write_aggregate_csv(&b.aggregate).unwrap()
        );
        assert_eq!(a.summary, b.summary);
    }

    #[test]
    fn coverage_is_mean_of_indicators() {
        let cfg = small("");
        let problem = build_problem(&cfg).unwrap();
        let oracle = oracle_for(&cfg, &problem).unwrap();
        let Problem::Regression(model) = &problem else {
            unreachable!()
        };
        let per_rep: Vec<_> = (0..2)
            .map(|r| run_regression_newton(&cfg, model, &oracle, replication_seed(0, r)).unwrap())
            .collect();
        let report = run_experiment_with_threads(&cfg, Some(2)).unwrap();
        for (k, row) in report.aggregate.iter().enumerate() {
            let mean =
                (per_rep[0][k].1[COV_WSC].unwrap() + per_rep[1][k].1[COV_WSC].unwrap()) / 2.0;
            assert_eq!(row.values[COV_WSC], Some(mean));
        }
    }

    #[test]
    fn sgd_and_constrained_runs() {
        let sgd = parse_config_str(
            "[problem]\nfamily = linear\nd = 2\n[method]\nsolver = sgd\n[experiment]\nn_iters = 2000\nn_reps = 2\nrecord_every = 500\n",
        )
        .unwrap();
        let r = run_experiment_with_threads(&sgd, Some(1)).unwrap();
        assert!(r.aggregate.last().unwrap().get("rel_cov_err_bm").is_some());
        assert!(r.aggregate[0].get("rel_cov_err_wsc").is_none());

        let qp = parse_config_str(
            "[problem]\nfamily = eqqp\n[method]\ntau = 20\n[experiment]\nn_iters = 500\nn_reps = 2\nrecord_every = 100\n",
        )
        .unwrap();
        let r = run_experiment_with_threads(&qp, Some(1)).unwrap();
        assert_eq!(r.reps_ok, 2);
        assert!(r.summary_for("wsc").unwrap().final_coverage.is_some());
    }

    #[test]
    fn divergence_threshold() {
        let report = ExperimentReport {
            aggregate: vec![],
            summary: vec![],
            reps_ok: 1,
            reps_diverged: 1,
        };
        assert_eq!(report.check_divergence().unwrap_err().exit_code(), 3);
    }

    #[test]
    fn exact_linear_oracle_is_half_omega() {
        let cfg = parse_config_str(
            "[problem]\nfamily = linear\nd = 2\n[method]\ntau = exact\n[schedule]\nbeta = 0.7\n",
        )
        .unwrap();
        let o = build_oracle(&cfg).unwrap();
        assert!((o.target - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
        let text = format_named_matrices(&oracle_matrices(&cfg).unwrap());
        let parsed = crate::oracle::parse_named_matrices(&text).unwrap();
        assert_eq!(
            parsed.iter().find(|(n, _)| n == "xi_star").unwrap().1,
            DMatrix::identity(2, 2) * 0.5
        );
    }
}

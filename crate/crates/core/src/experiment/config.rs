//! Plain-text experiment configuration.
//!
//! ```text
//! # comment
//! [problem]
//! family = linear        # linear | logistic | eqqp | maratos | hs7
//! d = 5
//! design = equicorr      # identity | toeplitz | equicorr
//! r = 0.3
//!
//! [method]
//! solver = newton        # newton | sgd
//! tau = 2                # positive integer or `exact`
//!
//! [experiment]
//! n_reps = 200
//! estimators = wsc, plugin
//! ```
//!
//! Values may be wrapped in double quotes. Unknown sections and keys are
//! rejected, and every error names the offending `section.key` and line.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::optimizer::{StepsizeMode, StepsizeSchedule};
use crate::problems::DesignKind;
use crate::sketch::Tau;

use super::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemFamily {
    Linear,
    Logistic,
    EqQp,
    Maratos,
    Hs7,
}

impl ProblemFamily {
    pub fn is_constrained(self) -> bool {
        matches!(self, Self::EqQp | Self::Maratos | Self::Hs7)
    }

    /// Dimension of a constrained built-in problem.
    pub fn fixed_dim(self) -> Option<usize> {
        match self {
            Self::EqQp => Some(4),
            Self::Maratos | Self::Hs7 => Some(2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Logistic => "logistic",
            Self::EqQp => "eqqp",
            Self::Maratos => "maratos",
            Self::Hs7 => "hs7",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignName {
    Identity,
    Toeplitz,
    EquiCorr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum XStarRule {
    /// Every coordinate `1/d`.
    Uniform,
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub family: ProblemFamily,
    pub d: usize,
    pub design: DesignName,
    pub r: f64,
    /// Response noise standard deviation (linear regression).
    pub sigma: f64,
    /// Oracle noise variance (constrained problems).
    pub sigma2: f64,
    pub x_star: XStarRule,
}

impl ProblemConfig {
    pub fn design_kind(&self) -> DesignKind {
        match self.design {
            DesignName::Identity => DesignKind::Identity,
            DesignName::Toeplitz => DesignKind::Toeplitz(self.r),
            DesignName::EquiCorr => DesignKind::EquiCorr(self.r),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Newton,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchKind {
    Uniform,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub solver: Solver,
    pub tau: Tau,
    pub sketch: SketchKind,
    /// Columns per Gaussian sketch.
    pub sketch_size: usize,
    pub hessian_prior: f64,
    pub pinv_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Estimator {
    Wsc,
    Plugin,
    BatchMeans,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Wsc => "wsc",
            Self::Plugin => "plugin",
            Self::BatchMeans => "batchmeans",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    /// `w = 1/d`.
    Mean,
    /// `w = 1_I/|I|` over the inactive coordinates of a constrained problem.
    Inactive,
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_iters: usize,
    pub n_reps: usize,
    pub base_seed: u64,
    pub record_every: usize,
    pub estimators: Vec<Estimator>,
    pub level: f64,
    pub direction: Direction,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub aggregate: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub method: MethodConfig,
    pub schedule: StepsizeSchedule,
    pub experiment: RunConfig,
    pub output: OutputConfig,
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "problem",
        &["family", "d", "design", "r", "sigma", "sigma2", "x_star"],
    ),
    (
        "method",
        &[
            "solver",
            "tau",
            "sketch",
            "sketch_size",
            "hessian_prior",
            "pinv_tol",
        ],
    ),
    ("schedule", &["c_beta", "beta", "c_chi", "chi", "mode"]),
    (
        "experiment",
        &[
            "n_iters",
            "n_reps",
            "base_seed",
            "record_every",
            "estimators",
            "level",
            "direction",
            "mc_samples",
        ],
    ),
    ("output", &["aggregate", "summary"]),
];

fn err(key: &str, line: Option<usize>, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        key: key.to_string(),
        line,
        message: message.into(),
    }
}

/// Raw `section.key → (value, line)` table.
struct Table {
    entries: BTreeMap<String, (String, usize)>,
}

impl Table {
    fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut entries = BTreeMap::new();
        let mut section: Option<&str> = None;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, Some(lineno), "unterminated section header"))?
                    .trim();
                let known = SECTIONS
                    .iter()
                    .find(|(s, _)| *s == name)
                    .ok_or_else(|| err(name, Some(lineno), "unknown section"))?;
                section = Some(known.0);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(line, Some(lineno), "expected `key = value`"))?;
            let key = key.trim();
            let sec =
                section.ok_or_else(|| err(key, Some(lineno), "key outside of any section"))?;
            let allowed = SECTIONS
                .iter()
                .find(|(s, _)| *s == sec)
                .map(|(_, k)| *k)
                .unwrap_or(&[]);
            let full = format!("{sec}.{key}");
            if !allowed.contains(&key) {
                return Err(err(&full, Some(lineno), "unknown key"));
            }
            let value = unquote(value.trim()).map_err(|m| err(&full, Some(lineno), m))?;
            if let Some((_, first)) = entries.get(&full) {
                return Err(err(
                    &full,
                    Some(lineno),
                    format!("duplicate key (first set on line {first})"),
                ));
            }
            entries.insert(full, (value.to_string(), lineno));
        }
        Ok(Self { entries })
    }

    fn raw(&self, key: &str) -> Option<(&str, usize)> {
        self.entries.get(key).map(|(v, l)| (v.as_str(), *l))
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|(_, l)| *l)
    }

    fn get<T>(
        &self,
        key: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<Option<T>, ExperimentError> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => parse(v).map(Some).map_err(|m| err(key, Some(line), m)),
        }
    }

    fn number<T: FromStr>(&self, key: &str) -> Result<Option<T>, ExperimentError> {
        self.get(key, |v| {
            v.parse::<T>().map_err(|_| format!("invalid number {v:?}"))
        })
    }
}

/// Drops a trailing `# comment` that is not inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn unquote(v: &str) -> Result<&str, String> {
    match v.strip_prefix('"') {
        Some(rest) => rest
            .strip_suffix('"')
            .filter(|inner| !inner.contains('"'))
            .ok_or_else(|| "unbalanced quotes".to_string()),
        None if v.contains('"') => Err("unbalanced quotes".to_string()),
        None => Ok(v),
    }
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    let inner = v.trim();
    let inner = inner
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(inner);
    if inner.trim().is_empty() {
        return Err("empty list".into());
    }
    inner
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("invalid number {tok:?} in list"))
        })
        .collect()
}

fn parse_family(v: &str) -> Result<ProblemFamily, String> {
    Ok(match v {
        "linear" => ProblemFamily::Linear,
        "logistic" => ProblemFamily::Logistic,
        "eqqp" => ProblemFamily::EqQp,
        "maratos" => ProblemFamily::Maratos,
        "hs7" => ProblemFamily::Hs7,
        _ => {
            return Err(format!(
                "unknown family {v:?} (linear, logistic, eqqp, maratos, hs7)"
            ))
        }
    })
}

fn parse_design(v: &str) -> Result<DesignName, String> {
    Ok(match v {
        "identity" => DesignName::Identity,
        "toeplitz" => DesignName::Toeplitz,
        "equicorr" => DesignName::EquiCorr,
        _ => {
            return Err(format!(
                "unknown design {v:?} (identity, toeplitz, equicorr)"
            ))
        }
    })
}

fn parse_tau(v: &str) -> Result<Tau, String> {
    if v == "exact" {
        return Ok(Tau::Exact);
    }
    match v.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(Tau::Steps(k)),
        _ => Err(format!("expected a positive integer or `exact`, got {v:?}")),
    }
}

fn parse_estimators(v: &str) -> Result<Vec<Estimator>, String> {
    let mut out = Vec::new();
    for tok in v.split(',').map(str::trim) {
        let e = match tok {
            "wsc" => Estimator::Wsc,
            "plugin" => Estimator::Plugin,
            "batchmeans" | "bm" => Estimator::BatchMeans,
            _ => {
                return Err(format!(
                    "unknown estimator {tok:?} (wsc, plugin, batchmeans)"
                ))
            }
        };
        if out.contains(&e) {
            return Err(format!("estimator {tok:?} listed twice"));
        }
        out.push(e);
    }
    out.sort();
    Ok(out)
}

fn parse_direction(v: &str) -> Result<Direction, String> {
    match v {
        "mean" => Ok(Direction::Mean),
        "inactive" => Ok(Direction::Inactive),
        _ => parse_list(v).map(Direction::Values),
    }
}

fn parse_x_star(v: &str) -> Result<XStarRule, String> {
    match v {
        "uniform" => Ok(XStarRule::Uniform),
        _ => parse_list(v).map(XStarRule::Values),
    }
}

fn parse_mode(v: &str) -> Result<StepsizeMode, String> {
    match v {
        "uniform_band" => Ok(StepsizeMode::UniformBand),
        "deterministic" => Ok(StepsizeMode::Deterministic),
        _ => Err(format!("unknown mode {v:?} (uniform_band, deterministic)")),
    }
}

impl FromStr for ExperimentConfig {
    type Err = ExperimentError;

    fn from_str(text: &str) -> Result<Self, ExperimentError> {
        parse_config_str(text)
    }
}

/// Parses and validates a configuration, filling documented defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ExperimentError> {
    let t = Table::parse(text)?;

    let family = t
        .get("problem.family", parse_family)?
        .ok_or_else(|| err("problem.family", None, "missing required key"))?;
    let d = match (t.number::<usize>("problem.d")?, family.fixed_dim()) {
        (Some(d), Some(fixed)) if d != fixed => {
            return Err(err(
                "problem.d",
                t.line("problem.d"),
                format!("problem {} has dimension {fixed}", family.name()),
            ))
        }
        (Some(d), _) => d,
        (None, Some(fixed)) => fixed,
        (None, None) => return Err(err("problem.d", None, "missing required key")),
    };
    if d == 0 {
        return Err(err("problem.d", t.line("problem.d"), "must be at least 1"));
    }
    let design = t
        .get("problem.design", parse_design)?
        .unwrap_or(DesignName::Identity);
    let r = t.number::<f64>("problem.r")?.unwrap_or(0.5);
    if !(r > 0.0 && r < 1.0) {
        return Err(err(
            "problem.r",
            t.line("problem.r"),
            format!("must lie in (0, 1), got {r}"),
        ));
    }
    let sigma = t.number::<f64>("problem.sigma")?.unwrap_or(1.0);
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(err(
            "problem.sigma",
            t.line("problem.sigma"),
            "must be nonnegative",
        ));
    }
    let sigma2 = t.number::<f64>("problem.sigma2")?.unwrap_or(1e-2);
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(err(
            "problem.sigma2",
            t.line("problem.sigma2"),
            "must be nonnegative",
        ));
    }
    let x_star = t
        .get("problem.x_star", parse_x_star)?
        .unwrap_or(XStarRule::Uniform);
    if let XStarRule::Values(v) = &x_star {
        if family.is_constrained() {
            return Err(err(
                "problem.x_star",
                t.line("problem.x_star"),
                "constrained problems have a fixed solution",
            ));
        }
        if v.len() != d {
            return Err(err(
                "problem.x_star",
                t.line("problem.x_star"),
                format!("expected {d} entries, got {}", v.len()),
            ));
        }
    }

    let solver = t
        .get("method.solver", |v| match v {
            "newton" => Ok(Solver::Newton),
            "sgd" => Ok(Solver::Sgd),
            _ => Err(format!("unknown solver {v:?} (newton, sgd)")),
        })?
        .unwrap_or(Solver::Newton);
    if solver == Solver::Sgd && family.is_constrained() {
        return Err(err(
            "method.solver",
            t.line("method.solver"),
            "constrained problems require the newton solver",
        ));
    }
    let tau = t.get("method.tau", parse_tau)?.unwrap_or(Tau::Steps(10));
    let sketch = t
        .get("method.sketch", |v| match v {
            "uniform" => Ok(SketchKind::Uniform),
            "gaussian" => Ok(SketchKind::Gaussian),
            _ => Err(format!("unknown sketch {v:?} (uniform, gaussian)")),
        })?
        .unwrap_or(SketchKind::Uniform);
    let sketch_size = t.number::<usize>("method.sketch_size")?.unwrap_or(1);
    if sketch_size == 0 {
        return Err(err(
            "method.sketch_size",
            t.line("method.sketch_size"),
            "must be at least 1",
        ));
    }
    let hessian_prior = t.number::<f64>("method.hessian_prior")?.unwrap_or(0.0);
    if !(hessian_prior >= 0.0 && hessian_prior.is_finite()) {
        return Err(err(
            "method.hessian_prior",
            t.line("method.hessian_prior"),
            "must be nonnegative",
        ));
    }
    let pinv_tol = t
        .number::<f64>("method.pinv_tol")?
        .unwrap_or(crate::sketch::SketchSolveConfig::DEFAULT_PINV_TOL);
    if !(pinv_tol >= 0.0 && pinv_tol.is_finite()) {
        return Err(err(
            "method.pinv_tol",
            t.line("method.pinv_tol"),
            "must be nonnegative",
        ));
    }

    let beta = t.number::<f64>("schedule.beta")?.unwrap_or(0.505);
    let beta_ok = match solver {
        Solver::Newton => beta > 0.5 && beta <= 1.0,
        Solver::Sgd => beta > 0.5 && beta < 1.0,
    };
    if !beta_ok {
        let range = if solver == Solver::Sgd {
            "(0.5, 1)"
        } else {
            "(0.5, 1]"
        };
        return Err(err(
            "schedule.beta",
            t.line("schedule.beta"),
            format!("must lie in {range}, got {beta}"),
        ));
    }
    let defaults = match solver {
        Solver::Newton => {
            StepsizeSchedule::banded(t.number::<f64>("schedule.c_beta")?.unwrap_or(1.0), beta)
        }
        Solver::Sgd => StepsizeSchedule::sgd(beta),
    };
    let c_beta = t
        .number::<f64>("schedule.c_beta")?
        .unwrap_or(defaults.c_beta);
    if !(c_beta > 0.0 && c_beta.is_finite()) {
        return Err(err(
            "schedule.c_beta",
            t.line("schedule.c_beta"),
            "must be positive",
        ));
    }
    let c_chi = t.number::<f64>("schedule.c_chi")?.unwrap_or(defaults.c_chi);
    if !(c_chi >= 0.0 && c_chi.is_finite()) {
        return Err(err(
            "schedule.c_chi",
            t.line("schedule.c_chi"),
            "must be nonnegative",
        ));
    }
    let chi = t.number::<f64>("schedule.chi")?.unwrap_or(defaults.chi);
    if !(chi > beta && chi.is_finite()) {
        return Err(err(
            "schedule.chi",
            t.line("schedule.chi"),
            format!("must exceed beta = {beta}"),
        ));
    }
    let mode = t.get("schedule.mode", parse_mode)?.unwrap_or(defaults.mode);
    let schedule = StepsizeSchedule {
        c_beta,
        beta,
        c_chi,
        chi,
        mode,
    };
    if beta == 1.0 && solver == Solver::Newton && c_beta <= 0.5 {
        return Err(err(
            "schedule.c_beta",
            t.line("schedule.c_beta"),
            "beta = 1 requires c_beta > 0.5",
        ));
    }

    let n_iters = t.number::<usize>("experiment.n_iters")?.unwrap_or(100_000);
    if n_iters == 0 {
        return Err(err(
            "experiment.n_iters",
            t.line("experiment.n_iters"),
            "must be at least 1",
        ));
    }
    let n_reps = t.number::<usize>("experiment.n_reps")?.unwrap_or(200);
    if n_reps == 0 {
        return Err(err(
            "experiment.n_reps",
            t.line("experiment.n_reps"),
            "must be at least 1",
        ));
    }
    let base_seed = t.number::<u64>("experiment.base_seed")?.unwrap_or(0);
    let record_every = t
        .number::<usize>("experiment.record_every")?
        .unwrap_or(1000);
    if record_every == 0 {
        return Err(err(
            "experiment.record_every",
            t.line("experiment.record_every"),
            "must be at least 1",
        ));
    }
    let estimators = t
        .get("experiment.estimators", parse_estimators)?
        .unwrap_or(match solver {
            Solver::Newton if family.is_constrained() => vec![Estimator::Wsc],
            Solver::Newton => vec![Estimator::Wsc, Estimator::Plugin],
            Solver::Sgd => vec![Estimator::BatchMeans],
        });
    for e in &estimators {
        let ok = match (solver, e) {
            (Solver::Sgd, Estimator::BatchMeans) => true,
            (Solver::Newton, Estimator::Wsc) => true,
            (Solver::Newton, Estimator::Plugin) => !family.is_constrained(),
            _ => false,
        };
        if !ok {
            return Err(err(
                "experiment.estimators",
                t.line("experiment.estimators"),
                format!(
                    "estimator {} is not available for this problem and solver",
                    e.name()
                ),
            ));
        }
    }
    let level = t.number::<f64>("experiment.level")?.unwrap_or(0.95);
    if !(level > 0.0 && level < 1.0) {
        return Err(err(
            "experiment.level",
            t.line("experiment.level"),
            format!("must lie in (0, 1), got {level}"),
        ));
    }
    let direction =
        t.get("experiment.direction", parse_direction)?
            .unwrap_or(if family.is_constrained() {
                Direction::Inactive
            } else {
                Direction::Mean
            });
    match &direction {
        Direction::Inactive if !family.is_constrained() => {
            return Err(err(
                "experiment.direction",
                t.line("experiment.direction"),
                "`inactive` needs a constrained problem",
            ))
        }
        Direction::Values(v) if v.len() != d => {
            return Err(err(
                "experiment.direction",
                t.line("experiment.direction"),
                format!("expected {d} entries, got {}", v.len()),
            ))
        }
        Direction::Values(v) if v.iter().all(|x| *x == 0.0) => {
            return Err(err(
                "experiment.direction",
                t.line("experiment.direction"),
                "direction is zero",
            ))
        }
        _ => {}
    }
    let mc_samples = t
        .number::<usize>("experiment.mc_samples")?
        .unwrap_or(crate::oracle::DEFAULT_MC_SAMPLES);
    if mc_samples < 2 {
        return Err(err(
            "experiment.mc_samples",
            t.line("experiment.mc_samples"),
            "must be at least 2",
        ));
    }

    let path = |key: &str, default: &str| -> Result<String, ExperimentError> {
        let v = t
            .get(key, |v| Ok(v.to_string()))?
            .unwrap_or_else(|| default.to_string());
        if v.is_empty() {
            return Err(err(key, t.line(key), "path is empty"));
        }
        Ok(v)
    };
    let output = OutputConfig {
        aggregate: path("output.aggregate", "aggregate.csv")?,
        summary: path("output.summary", "summary.csv")?,
    };

    Ok(ExperimentConfig {
        problem: ProblemConfig {
            family,
            d,
            design,
            r,
            sigma,
            sigma2,
            x_star,
        },
        method: MethodConfig {
            solver,
            tau,
            sketch,
            sketch_size,
            hessian_prior,
            pinv_tol,
        },
        schedule,
        experiment: RunConfig {
            n_iters,
            n_reps,
            base_seed,
            record_every,
            estimators,
            level,
            direction,
            mc_samples,
        },
        output,
    })
}

/// Reads and parses a configuration file.
pub fn parse_config(path: &std::path::Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text)
}

fn list(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn quoted(s: &str) -> String {
    if s.contains(['#', '"', '=']) || s.trim() != s {
        // Such paths cannot be written losslessly; keep them quoted.
        format!("\"{s}\"")
    } else {
        s.to_string()
    }
}

impl fmt::Display for ExperimentConfig {
    /// Writes every field explicitly; parsing the output gives back `self`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.problem;
        let mut s = String::new();
        let _ = writeln!(s, "[problem]");
        let _ = writeln!(s, "family = {}", p.family.name());
        let _ = writeln!(s, "d = {}", p.d);
        let design = match p.design {
            DesignName::Identity => "identity",
            DesignName::Toeplitz => "toeplitz",
            DesignName::EquiCorr => "equicorr",
        };
        let _ = writeln!(s, "design = {design}");
        let _ = writeln!(s, "r = {}", p.r);
        let _ = writeln!(s, "sigma = {}", p.sigma);
        let _ = writeln!(s, "sigma2 = {}", p.sigma2);
        match &p.x_star {
            XStarRule::Uniform => {
                let _ = writeln!(s, "x_star = uniform");
            }
            XStarRule::Values(v) => {
                let _ = writeln!(s, "x_star = [{}]", list(v));
            }
        }

        let m = &self.method;
        let _ = writeln!(s, "\n[method]");
        let _ = writeln!(
            s,
            "solver = {}",
            if m.solver == Solver::Newton {
                "newton"
            } else {
                "sgd"
            }
        );
        match m.tau {
            Tau::Exact => {
                let _ = writeln!(s, "tau = exact");
            }
            Tau::Steps(k) => {
                let _ = writeln!(s, "tau = {k}");
            }
        }
        let _ = writeln!(
            s,
            "sketch = {}",
            if m.sketch == SketchKind::Uniform {
                "uniform"
            } else {
                "gaussian"
            }
        );
        let _ = writeln!(s, "sketch_size = {}", m.sketch_size);
        let _ = writeln!(s, "hessian_prior = {}", m.hessian_prior);
        let _ = writeln!(s, "pinv_tol = {}", m.pinv_tol);

        let sc = &self.schedule;
        let _ = writeln!(s, "\n[schedule]");
        let _ = writeln!(s, "c_beta = {}", sc.c_beta);
        let _ = writeln!(s, "beta = {}", sc.beta);
        let _ = writeln!(s, "c_chi = {}", sc.c_chi);
        let _ = writeln!(s, "chi = {}", sc.chi);
        let mode = match sc.mode {
            StepsizeMode::UniformBand => "uniform_band",
            StepsizeMode::Deterministic => "deterministic",
        };
        let _ = writeln!(s, "mode = {mode}");

        let e = &self.experiment;
        let _ = writeln!(s, "\n[experiment]");
        let _ = writeln!(s, "n_iters = {}", e.n_iters);
        let _ = writeln!(s, "n_reps = {}", e.n_reps);
        let _ = writeln!(s, "base_seed = {}", e.base_seed);
        let _ = writeln!(s, "record_every = {}", e.record_every);
        let names: Vec<&str> = e.estimators.iter().map(|x| x.name()).collect();
        let _ = writeln!(s, "estimators = {}", names.join(", "));
        let _ = writeln!(s, "level = {}", e.level);
        match &e.direction {
            Direction::Mean => {
                let _ = writeln!(s, "direction = mean");
            }
            Direction::Inactive => {
                let _ = writeln!(s, "direction = inactive");
            }
            Direction::Values(v) => {
                let _ = writeln!(s, "direction = [{}]", list(v));
            }
        }
        let _ = writeln!(s, "mc_samples = {}", e.mc_samples);

        let _ = writeln!(s, "\n[output]");
        let _ = writeln!(s, "aggregate = {}", quoted(&self.output.aggregate));
        let _ = writeln!(s, "summary = {}", quoted(&self.output.summary));
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: ExperimentError) -> (String, Option<usize>) {
        match e {
            ExperimentError::Config { key, line, .. } => (key, line),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str("[problem]\nfamily = linear\nd = 5\n").unwrap();
        assert_eq!(c.problem.design, DesignName::Identity);
        assert_eq!(c.problem.sigma, 1.0);
        assert_eq!(c.method.solver, Solver::Newton);
        assert_eq!(c.method.tau, Tau::Steps(10));
        assert_eq!(c.schedule, StepsizeSchedule::default());
        assert_eq!(c.experiment.n_iters, 100_000);
        assert_eq!(c.experiment.n_reps, 200);
        assert_eq!(c.experiment.record_every, 1000);
        assert_eq!(
            c.experiment.estimators,
            vec![Estimator::Wsc, Estimator::Plugin]
        );
        assert_eq!(c.experiment.level, 0.95);
        assert_eq!(c.experiment.direction, Direction::Mean);
        assert_eq!(c.output.aggregate, "aggregate.csv");
    }

    #[test]
    fn sgd_defaults() {
        let c = parse_config_str("[problem]\nfamily = linear\nd = 3\n[method]\nsolver = sgd\n")
            .unwrap();
        assert_eq!(c.schedule, StepsizeSchedule::sgd(0.505));
        assert_eq!(c.experiment.estimators, vec![Estimator::BatchMeans]);
    }

    #[test]
    fn constrained_defaults() {
        let c = parse_config_str("[problem]\nfamily = \"maratos\"\n").unwrap();
        assert_eq!(c.problem.d, 2);
        assert_eq!(c.experiment.direction, Direction::Inactive);
        assert_eq!(c.experiment.estimators, vec![Estimator::Wsc]);
        let e = parse_config_str("[problem]\nfamily = hs7\n[experiment]\nestimators = plugin\n")
            .unwrap_err();
        assert_eq!(key_of(e), ("experiment.estimators".into(), Some(4)));
    }

    #[test]
    fn beta_out_of_range_names_key() {
        let text = "[problem]\nfamily = linear\nd = 2\n[schedule]\nbeta = 1.5\n";
        assert_eq!(
            key_of(parse_config_str(text).unwrap_err()),
            ("schedule.beta".into(), Some(5))
        );
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let cases = [
            ("family = linear\n", "family", 1),
            (
                "[problem]\nfamily = linear\nd = 2\nbogus = 1\n",
                "problem.bogus",
                4,
            ),
            ("[problem]\nfamily = linear\nd = x\n", "problem.d", 3),
            ("[problem]\nfamily = linear\nd = 2\n[nope]\n", "nope", 4),
            (
                "[problem]\nfamily = linear\nfamily = logistic\n",
                "problem.family",
                3,
            ),
            ("[problem]\nfamily = linear\nd 2\n", "d 2", 3),
            ("[problem]\nfamily = \"linear\nd = 2\n", "problem.family", 2),
            ("[problem\n", "[problem", 1),
        ];
        for (text, key, line) in cases {
            assert_eq!(
                key_of(parse_config_str(text).unwrap_err()),
                (key.to_string(), Some(line)),
                "{text}"
            );
        }
        assert_eq!(
            key_of(parse_config_str("[problem]\nd = 2\n").unwrap_err()),
            ("problem.family".into(), None)
        );
    }

    #[test]
    fn comments_and_quotes() {
        let text = "# header\n[problem] # trailing\nfamily = linear # the model\nd = 3\n[output]\naggregate = \"a#b.csv\"\n";
        let c = parse_config_str(text).unwrap();
        assert_eq!(c.output.aggregate, "a#b.csv");
    }

    #[test]
    fn round_trip_full_config() {
        let text = "[problem]\nfamily = logistic\nd = 3\ndesign = toeplitz\nr = 0.25\nx_star = [0.5, -1, 2]\n\
                    [method]\ntau = exact\nhessian_prior = 1\n[experiment]\ndirection = 1, 0, 0\nbase_seed = 7\n";
        let c = parse_config_str(text).unwrap();
        assert_eq!(parse_config_str(&c.to_string()).unwrap(), c);
    }
}

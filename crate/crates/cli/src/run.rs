//! The four commands. Each builds its artifacts in memory; nothing touches
//! the filesystem until [`Artifacts::write_to`].

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use varembed_core::dynamics::{energy_1d, integrate_el, score_limit_comparison, trajectory_csv, LimitComparison};
use varembed_core::embedding::Family;
use varembed_core::objective::{
    estimate_objective, finiteness_report, FinitenessReport, IntegrationScheme, DEFAULT_FINITENESS_CEILING,
};
use varembed_core::optimizer::{optimize, OptimizeError, Status};
use varembed_core::pca::{closed_form_solution, compare_fit, PcaComparison, PcaError};
use varembed_core::variational::{
    angular_momentum_profile, el_residual, energy_conservation_report, ConservationTrace, Summary,
};
use varembed_core::{
    DensityModel, DensitySpec, EmbeddingModel, InjectivityReport, Matrix, OdeState, OptimizeConfig, OptimizeOutcome,
    PriorModel, PriorSpec,
};

use crate::config::{parse_config, DynamicsSection, ExperimentConfig, GeometryCheck};
use crate::error::{runtime, CliError};
use crate::presets;
use crate::svg;

/// Named output files, written together once a command has finished.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Artifacts {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.to_string(), bytes.into());
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> Vec<String> {
        self.files.keys().cloned().collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

/// Reads a config from a file path, or from a shipped preset when no such
/// file exists.
pub fn load_config(input: &str, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = match std::fs::read_to_string(input) {
        Ok(t) => t,
        Err(e) => match presets::preset(input) {
            Some(t) => t.to_string(),
            None => {
                return Err(CliError::Config(format!(
                    "cannot read `{input}` ({e}) and no preset has that name; presets: {}",
                    presets::names().collect::<Vec<_>>().join(", ")
                )))
            }
        },
    };
    let mut cfg = parse_config(&text, overrides).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{input}: {m}")),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.optimizer.seed = s;
    }
    Ok(cfg)
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value).map_err(runtime)?;
    out.push(b'\n');
    Ok(out)
}

// ---------------------------------------------------------------- fit

#[derive(Clone, Debug, Serialize)]
pub struct ObjectiveSummary {
    /// `J` in nats at the fitted parameters.
    pub value: f64,
    /// Quadrature: `|J(order) − J(refined order)|`; Monte Carlo: standard error.
    pub tolerance: f64,
    pub tolerance_method: String,
    pub node_count: usize,
    pub scheme: IntegrationScheme,
}

#[derive(Clone, Debug, Serialize)]
pub struct RestartSummary {
    pub restart: usize,
    pub status: Status,
    pub final_value: f64,
    pub final_penalty: f64,
    pub final_gradient_norm: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizerSummary {
    pub best_restart: usize,
    pub final_gradient_norm: f64,
    pub final_penalty: f64,
    pub converged: bool,
    pub restarts: Vec<RestartSummary>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergySummary {
    pub samples: usize,
    pub summary: Summary,
    pub relative_std: f64,
    /// `|mean(E) + J|`.
    pub mean_plus_objective: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AngularSummary {
    pub central_mass: f64,
    pub summary: Summary,
    pub coefficient_of_variation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConservationSummary {
    pub energy: Option<EnergySummary>,
    pub angular_momentum: Option<AngularSummary>,
    /// Why a summary could not be computed.
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GeometryReport {
    pub check: GeometryCheck,
    /// Largest deviation over the checked latent window.
    pub worst: f64,
    pub latent_window: (f64, f64),
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

/// Structured result of `fit`.
#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub command: String,
    pub config: ExperimentConfig,
    pub fitted: EmbeddingModel,
    pub objective: ObjectiveSummary,
    pub optimizer: OptimizerSummary,
    pub finiteness: FinitenessReport,
    pub conservation: ConservationSummary,
    pub injectivity: Option<InjectivityReport>,
    pub geometry: Option<GeometryReport>,
    pub files: Vec<String>,
    pub timing: Timing,
}

pub struct FitRun {
    pub result: RunResult,
    pub outcome: OptimizeOutcome,
    pub artifacts: Artifacts,
}

pub(crate) struct Instance {
    pub density: DensityModel,
    pub prior: PriorModel,
    pub scheme: IntegrationScheme,
    pub initial: EmbeddingModel,
}

pub(crate) fn instance(cfg: &ExperimentConfig) -> Result<Instance, CliError> {
    let density = cfg.density_model()?;
    let prior = cfg.prior_model()?;
    let emb = cfg.embedding_section()?;
    let offset = emb.offset.clone().unwrap_or_else(|| vec![0.0; density.dim()]);
    let initial = EmbeddingModel::random_with_slope(
        emb.family.clone(),
        emb.latent_dim,
        density.dim(),
        &offset,
        emb.init_slope,
        cfg.optimizer.seed,
    )
    .map_err(|e| CliError::Config(format!("[embedding]: {e}")))?;
    let scheme = cfg.scheme(&prior);
    Ok(Instance {
        density,
        prior,
        scheme,
        initial,
    })
}

fn refined(scheme: &IntegrationScheme) -> Option<IntegrationScheme> {
    match scheme {
        IntegrationScheme::Quadrature { order } => Some(IntegrationScheme::Quadrature {
            order: if *order < 64 { (2 * order).min(64) } else { 48 },
        }),
        IntegrationScheme::MonteCarlo { .. } => None,
    }
}

pub(crate) fn trace_csv(outcome: &OptimizeOutcome) -> String {
    let mut out = String::from(
        "restart,iteration,phase,objective_nats,penalty_nats,gradient_norm_per_param,step_param_units,accepted\n",
    );
    for t in &outcome.traces {
        for r in &t.rows {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{:e},{}\n",
                t.restart,
                r.iteration,
                match r.phase {
                    varembed_core::optimizer::Phase::Adam => "adam",
                    varembed_core::optimizer::Phase::Backtracking => "backtracking",
                },
                r.value,
                r.penalty,
                r.gradient_norm,
                r.step,
                u8::from(r.accepted)
            ));
        }
    }
    out
}

fn optimizer_summary(outcome: &OptimizeOutcome, converged_below: f64) -> OptimizerSummary {
    let best = outcome.best_trace();
    OptimizerSummary {
        best_restart: outcome.best_restart,
        final_gradient_norm: best.final_gradient_norm,
        final_penalty: best.final_penalty,
        converged: best.final_gradient_norm < converged_below,
        restarts: outcome
            .traces
            .iter()
            .map(|t| RestartSummary {
                restart: t.restart,
                status: t.status.clone(),
                final_value: t.final_value,
                final_penalty: t.final_penalty,
                final_gradient_norm: t.final_gradient_norm,
                iterations: t.rows.len(),
            })
            .collect(),
    }
}

pub(crate) fn objective_summary(fitted: &EmbeddingModel, inst: &Instance) -> Result<ObjectiveSummary, CliError> {
    let est = estimate_objective(fitted, &inst.prior, &inst.density, &inst.scheme, false).map_err(runtime)?;
    let (tolerance, method) = match (&est.stderr, refined(&inst.scheme)) {
        (Some(se), _) => (*se, "monte-carlo standard error".to_string()),
        (None, Some(r)) => match estimate_objective(fitted, &inst.prior, &inst.density, &r, false) {
            Ok(fine) => (
                (fine.value - est.value).abs(),
                format!("difference against quadrature {}", scheme_label(&r)),
            ),
            Err(e) => (f64::NAN, format!("refined rule failed: {e}")),
        },
        (None, None) => (f64::NAN, "unavailable".to_string()),
    };
    Ok(ObjectiveSummary {
        value: est.value,
        tolerance,
        tolerance_method: method,
        node_count: est.node_count,
        scheme: inst.scheme.clone(),
    })
}

fn scheme_label(s: &IntegrationScheme) -> String {
    match s {
        IntegrationScheme::Quadrature { order } => format!("order {order}"),
        IntegrationScheme::MonteCarlo { samples, seed } => format!("monte-carlo {samples} samples, seed {seed}"),
    }
}

/// Energy and angular-momentum summaries plus the raw conservation trace.
pub(crate) fn conservation(
    fitted: &EmbeddingModel,
    inst: &Instance,
    cfg: &ExperimentConfig,
    objective: f64,
) -> (ConservationSummary, Option<ConservationTrace>) {
    let diag = &cfg.diagnostics;
    let mut errors = Vec::new();
    let trace = match energy_conservation_report(
        fitted,
        &inst.prior,
        &inst.density,
        diag.energy_samples,
        diag.energy_seed,
    ) {
        Ok(t) => Some(t),
        Err(e) => {
            errors.push(format!("energy: {e}"));
            None
        }
    };
    let energy = trace.as_ref().map(|t| EnergySummary {
        samples: t.energy.len(),
        relative_std: t.energy_summary.relative_std(),
        mean_plus_objective: (t.energy_summary.mean + objective).abs(),
        summary: t.energy_summary.clone(),
    });
    let angular = if fitted.latent_dim() == 1 && fitted.ambient_dim() == 2 {
        match angular_momentum_profile(fitted, &inst.prior, diag.central_mass, 201) {
            Ok((_, _, s)) => Some(AngularSummary {
                central_mass: diag.central_mass,
                coefficient_of_variation: s.coefficient_of_variation(),
                summary: s,
            }),
            Err(e) => {
                errors.push(format!("angular momentum: {e}"));
                None
            }
        }
    } else {
        None
    };
    (
        ConservationSummary {
            energy,
            angular_momentum: angular,
            errors,
        },
        trace,
    )
}

/// Worst deviation of a fitted curve from the configured geometry.
pub fn geometry_report(
    fitted: &EmbeddingModel,
    prior: &PriorModel,
    check: &GeometryCheck,
) -> Result<GeometryReport, CliError> {
    if fitted.latent_dim() != 1 {
        return Err(CliError::Config(
            "geometry checks need a one-dimensional latent space".into(),
        ));
    }
    let mass = match check {
        GeometryCheck::Line { mass, .. } | GeometryCheck::Circle { mass, .. } | GeometryCheck::Cdf { mass, .. } => {
            *mass
        }
    };
    let (lo, hi) = prior.central_interval(mass).map_err(runtime)?;
    let n = 1001;
    let mut worst = 0.0f64;
    for k in 0..n {
        let z = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let x = fitted.eval(&[z]);
        let dev = match check {
            GeometryCheck::Line { point, direction, .. } => {
                let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rel: Vec<f64> = x.iter().zip(point).map(|(a, b)| a - b).collect();
                let along: f64 = rel.iter().zip(direction).map(|(a, u)| a * u / norm).sum();
                rel.iter()
                    .zip(direction)
                    .map(|(a, u)| (a - along * u / norm).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }
            GeometryCheck::Circle { center, radius, .. } => {
                let r = x.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                (r - radius).abs() / radius
            }
            GeometryCheck::Cdf { .. } => {
                if x.len() != 1 {
                    return Err(CliError::Config("the CDF check needs D = 1".into()));
                }
                (x[0] - prior.cdf(z).map_err(runtime)?).abs()
            }
        };
        worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
    }
    let tol = match check {
        GeometryCheck::Line { tolerance, .. }
        | GeometryCheck::Circle { tolerance, .. }
        | GeometryCheck::Cdf { tolerance, .. } => *tolerance,
    };
    Ok(GeometryReport {
        check: check.clone(),
        worst,
        latent_window: (lo, hi),
        pass: worst <= tol,
    })
}

/// Latent points at which to draw a planar curve.
fn curve_grid(prior: &PriorModel, n: usize) -> Result<Vec<f64>, CliError> {
    let (lo, hi) = match prior.spec() {
        PriorSpec::Uniform { lower, upper } => (lower[0], upper[0]),
        _ => prior.central_interval(0.99).map_err(runtime)?,
    };
    Ok((0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect())
}

/// Fits the configured embedding. Pure apart from timing.
pub fn fit(cfg: &ExperimentConfig) -> Result<FitRun, CliError> {
    let t0 = Instant::now();
    let inst = instance(cfg)?;
    // restarts reuse the configured initial slope
    let optimizer = OptimizeConfig {
        init_slope: cfg.embedding_section()?.init_slope,
        ..cfg.optimizer.clone()
    };
    let outcome = optimize(
        &inst.initial,
        &inst.prior,
        &inst.density,
        &inst.scheme,
        cfg.repulsion.clone(),
        &optimizer,
    )
    .map_err(|e| match e {
        OptimizeError::Config(m) => CliError::Config(format!("[optimizer]: {m}")),
        other => CliError::Optimization(other.to_string()),
    })?;
    let fitted = outcome.fitted.clone();
    let objective = objective_summary(&fitted, &inst)?;
    let finiteness =
        finiteness_report(&fitted, &inst.prior, &inst.scheme, DEFAULT_FINITENESS_CEILING).map_err(runtime)?;
    let (conservation, trace) = conservation(&fitted, &inst, cfg, objective.value);
    let injectivity = fitted
        .injectivity_probe(&inst.prior, cfg.diagnostics.injectivity_points, cfg.optimizer.seed)
        .ok();
    let geometry = match &cfg.diagnostics.geometry {
        Some(g) => Some(geometry_report(&fitted, &inst.prior, g)?),
        None => None,
    };

    let mut artifacts = Artifacts::default();
    artifacts.add("trace.csv", trace_csv(&outcome));
    if let Some(t) = &trace {
        artifacts.add("conservation.csv", t.to_csv());
    }
    if cfg.output.svg && fitted.latent_dim() == 1 && fitted.ambient_dim() == 2 {
        let zs = curve_grid(&inst.prior, cfg.output.curve_points)?;
        artifacts.add("fit.svg", svg::render_curve(&inst.density, &fitted, &zs, &cfg.output));
    }
    let mut files = artifacts.names();
    files.push("result.json".into());
    files.sort();
    let result = RunResult {
        command: "fit".into(),
        config: cfg.clone(),
        fitted,
        objective,
        optimizer: optimizer_summary(&outcome, cfg.diagnostics.converged_gradient),
        finiteness,
        conservation,
        injectivity,
        geometry,
        files,
        timing: Timing {
            wall_clock_seconds: t0.elapsed().as_secs_f64(),
        },
    };
    artifacts.add("result.json", to_json(&result)?);
    Ok(FitRun {
        result,
        outcome,
        artifacts,
    })
}

// ---------------------------------------------------------------- diagnose

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagnoseSummary {
    pub source: String,
    pub objective: f64,
    pub el_points: usize,
    pub el_relative_median: f64,
    pub el_absolute_median: f64,
    pub el_failures: Vec<String>,
    pub conservation: ConservationSummary,
    pub injectivity: Option<InjectivityReport>,
    pub geometry: Option<GeometryReport>,
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

pub struct DiagnoseRun {
    pub summary: DiagnoseSummary,
    pub artifacts: Artifacts,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Whether the density is invariant under rotations about the origin, so
/// that angular momentum is conserved.
pub fn rotation_invariant(spec: &DensitySpec) -> bool {
    let at_origin = |c: &[f64]| c.iter().all(|v| *v == 0.0);
    match spec {
        DensitySpec::Ring { center, .. } | DensitySpec::SmoothedBall { center, .. } => at_origin(center),
        DensitySpec::Gaussian { mean, covariance } => {
            let s = covariance[0][0];
            at_origin(mean)
                && covariance
                    .iter()
                    .enumerate()
                    .all(|(i, row)| row.iter().enumerate().all(|(j, v)| *v == if i == j { s } else { 0.0 }))
        }
        DensitySpec::Mixture { .. } => false,
    }
}

/// Latent points for the EL residual table.
fn el_points(prior: &PriorModel, cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>, CliError> {
    let n = cfg.diagnostics.el_points;
    if prior.dim() == 1 {
        let (lo, hi) = prior.central_interval(cfg.diagnostics.central_mass).map_err(runtime)?;
        Ok((0..n)
            .map(|k| vec![lo + (hi - lo) * k as f64 / (n - 1) as f64])
            .collect())
    } else {
        Ok(prior.sample_core(n, cfg.diagnostics.energy_seed))
    }
}

/// Reads either a `result.json` from `fit` or a config (the unfit initial
/// model is then diagnosed).
pub fn load_diagnose_input(
    input: &str,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<(ExperimentConfig, Option<EmbeddingModel>), CliError> {
    if input.ends_with(".json") {
        let text = std::fs::read_to_string(input)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{input}: {e}")))?;
        let fitted = v
            .get("fitted")
            .ok_or_else(|| CliError::Config(format!("{input}: no fitted model in result")))?;
        let fitted: EmbeddingModel =
            serde_json::from_value(fitted.clone()).map_err(|e| CliError::Config(format!("{input}: fitted: {e}")))?;
        let cfg_v = v
            .get("config")
            .ok_or_else(|| CliError::Config(format!("{input}: no config echo in result")))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_value(cfg_v.clone()).map_err(|e| CliError::Config(format!("{input}: config: {e}")))?;
        if !overrides.is_empty() {
            let text = toml::to_string(&cfg).map_err(runtime)?;
            cfg = parse_config(&text, overrides)?;
        }
        if let Some(s) = seed {
            cfg.optimizer.seed = s;
        }
        Ok((cfg, Some(fitted)))
    } else {
        Ok((load_config(input, overrides, seed)?, None))
    }
}

/// Conservation, EL residual and geometry diagnostics for `model` (the
/// config's unfit initialization when `None`).
pub fn diagnose(cfg: &ExperimentConfig, model: Option<EmbeddingModel>) -> Result<DiagnoseRun, CliError> {
    let inst = instance(cfg)?;
    let source = if model.is_some() {
        "fitted result"
    } else {
        "unfit initialization"
    };
    let model = model.unwrap_or_else(|| inst.initial.clone());
    if model.latent_dim() != inst.prior.dim() || model.ambient_dim() != inst.density.dim() {
        return Err(CliError::Config(
            "fitted model dimensions disagree with the config".into(),
        ));
    }
    let objective = estimate_objective(&model, &inst.prior, &inst.density, &inst.scheme, false)
        .map(|e| e.value)
        .unwrap_or(f64::NAN);
    let (conservation, trace) = conservation(&model, &inst, cfg, objective);
    let points = el_points(&inst.prior, cfg)?;
    let rows: Vec<Result<(f64, f64), String>> = points
        .par_iter()
        .map(|z| {
            el_residual(&model, &inst.prior, &inst.density, z, None)
                .map(|r| (r.absolute, r.relative))
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut csv = String::new();
    let d = inst.prior.dim();
    let header: Vec<String> = (0..d).map(|j| format!("z{j}_latent")).collect();
    csv.push_str(&header.join(","));
    csv.push_str(",residual_norm_score_units,relative_residual\n");
    let mut rel = Vec::new();
    let mut abs = Vec::new();
    let mut failures = Vec::new();
    for (z, r) in points.iter().zip(&rows) {
        let zs: Vec<String> = z.iter().map(|v| format!("{v:e}")).collect();
        match r {
            Ok((a, q)) => {
                csv.push_str(&format!("{},{a:e},{q:e}\n", zs.join(",")));
                abs.push(*a);
                rel.push(*q);
            }
            Err(e) => {
                csv.push_str(&format!("{},NaN,NaN\n", zs.join(",")));
                failures.push(format!("z = {z:?}: {e}"));
            }
        }
    }
    let el_relative_median = if failures.is_empty() {
        median(&mut rel)
    } else {
        f64::INFINITY
    };
    let el_absolute_median = if failures.is_empty() {
        median(&mut abs)
    } else {
        f64::INFINITY
    };
    let injectivity = model
        .injectivity_probe(&inst.prior, cfg.diagnostics.injectivity_points, cfg.optimizer.seed)
        .ok();
    let geometry = match &cfg.diagnostics.geometry {
        Some(g) => Some(geometry_report(&model, &inst.prior, g)?),
        None => None,
    };

    let diag = &cfg.diagnostics;
    let mut checks = Vec::new();
    match &conservation.energy {
        Some(e) => {
            checks.push(Check::at_most(
                "energy_relative_std",
                e.relative_std,
                diag.max_energy_relative_std,
            ));
            checks.push(Check::at_most(
                "energy_mean_plus_objective",
                e.mean_plus_objective,
                diag.max_energy_objective_gap,
            ));
        }
        None => checks.push(Check::at_most(
            "energy_relative_std",
            f64::INFINITY,
            diag.max_energy_relative_std,
        )),
    }
    checks.push(Check::at_most(
        "el_relative_median",
        el_relative_median,
        diag.max_el_relative_median,
    ));
    if model.latent_dim() == 1 && model.ambient_dim() == 2 && rotation_invariant(&cfg.density) {
        let cv = conservation
            .angular_momentum
            .as_ref()
            .map_or(f64::INFINITY, |a| a.coefficient_of_variation);
        checks.push(Check::at_most("angular_momentum_cv", cv, diag.max_angular_cv));
    }
    if let Some(inj) = &injectivity {
        checks.push(Check::at_most("injectivity_flags", inj.flagged.len() as f64, 0.0));
    }
    if let Some(g) = &geometry {
        let tol = match &g.check {
            GeometryCheck::Line { tolerance, .. }
            | GeometryCheck::Circle { tolerance, .. }
            | GeometryCheck::Cdf { tolerance, .. } => *tolerance,
        };
        checks.push(Check::at_most("geometry_worst_deviation", g.worst, tol));
    }
    let all_pass = checks.iter().all(|c| c.pass);
    let summary = DiagnoseSummary {
        source: source.into(),
        objective,
        el_points: points.len(),
        el_relative_median,
        el_absolute_median,
        el_failures: failures,
        conservation,
        injectivity,
        geometry,
        checks,
        all_pass,
    };
    let mut artifacts = Artifacts::default();
    if let Some(t) = trace {
        artifacts.add("conservation.csv", t.to_csv());
    }
    artifacts.add("el_residual.csv", csv);
    artifacts.add("diagnose.json", to_json(&summary)?);
    Ok(DiagnoseRun { summary, artifacts })
}

// ---------------------------------------------------------------- dynamics

#[derive(Clone, Debug, Serialize)]
pub struct OrderCheck {
    /// `‖φ_N − φ_2N‖` and `‖φ_2N − φ_4N‖` at the endpoint.
    pub shift_coarse: f64,
    pub shift_fine: f64,
    /// `shift_coarse / shift_fine`, about 16 for a fourth-order method;
    /// absent when both shifts sit at rounding level.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LimitSummary {
    pub gamma: f64,
    pub post_transient_start_z: Option<f64>,
    pub max_post_transient_momentum_gap: f64,
    pub sup_post_transient_position_gap: f64,
    pub threshold: f64,
    pub pass: bool,
    pub flow_halt: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DynamicsSummary {
    pub mode: String,
    pub steps_taken: usize,
    pub halt: Option<String>,
    pub final_state: OdeState,
    /// Max minus min of the one-dimensional energy along the trajectory.
    pub energy_variation: Option<f64>,
    pub order_check: Option<OrderCheck>,
    pub limit: Option<LimitSummary>,
}

pub struct DynamicsRun {
    pub summary: DynamicsSummary,
    pub comparison: Option<LimitComparison>,
    pub artifacts: Artifacts,
}

fn energy_variation(states: &[OdeState], prior: &PriorModel, density: &DensityModel) -> Option<f64> {
    let es: Option<Vec<f64>> = states.iter().map(|s| energy_1d(s, prior, density).ok()).collect();
    let es = es?;
    let hi = es.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = es.iter().copied().fold(f64::INFINITY, f64::min);
    Some(hi - lo)
}

pub fn dynamics(cfg: &ExperimentConfig) -> Result<DynamicsRun, CliError> {
    let density = cfg.density_model()?;
    let section = cfg
        .dynamics
        .as_ref()
        .ok_or_else(|| CliError::Config("missing [dynamics] section".into()))?;
    let mut artifacts = Artifacts::default();
    match section {
        DynamicsSection::El {
            phi0,
            p0,
            z_span,
            steps,
            order_check,
        } => {
            let prior = cfg.prior_model()?;
            let init = OdeState {
                z: z_span[0],
                phi: phi0.clone(),
                p: p0.clone(),
            };
            let span = (z_span[0], z_span[1]);
            let traj = integrate_el(&init, span, *steps, &prior, &density).map_err(runtime)?;
            let order = if *order_check {
                let end = |n: usize| -> Result<Vec<f64>, CliError> {
                    let t = integrate_el(&init, span, n, &prior, &density).map_err(runtime)?;
                    if t.halt.is_some() {
                        return Err(CliError::Runtime("order check trajectory halted early".into()));
                    }
                    Ok(t.last().phi.clone())
                };
                let (a, b, c) = (end(*steps)?, end(2 * steps)?, end(4 * steps)?);
                let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
                let (coarse, fine) = (dist(&a, &b), dist(&b, &c));
                let scale = 1.0 + c.iter().map(|v| v.abs()).fold(0.0, f64::max);
                Some(OrderCheck {
                    shift_coarse: coarse,
                    shift_fine: fine,
                    ratio: (fine > 1e-13 * scale).then(|| coarse / fine),
                })
            } else {
                None
            };
            artifacts.add("trajectory.csv", trajectory_csv(&traj, &prior, &density));
            let summary = DynamicsSummary {
                mode: "el".into(),
                steps_taken: traj.states.len() - 1,
                halt: traj.halt.clone(),
                final_state: traj.last().clone(),
                energy_variation: energy_variation(&traj.states, &prior, &density),
                order_check: order,
                limit: None,
            };
            artifacts.add("dynamics.json", to_json(&summary)?);
            Ok(DynamicsRun {
                summary,
                comparison: None,
                artifacts,
            })
        }
        DynamicsSection::ScoreLimit {
            gamma,
            phi0,
            z_span,
            steps,
            max_momentum_gap,
        } => {
            let s = density.score(phi0).map_err(runtime)?;
            let init = OdeState {
                z: z_span[0],
                phi: phi0.clone(),
                p: s.iter().map(|v| v / gamma).collect(),
            };
            let (traj, _flow, cmp) =
                score_limit_comparison(&init, *gamma, (z_span[0], z_span[1]), *steps, &density).map_err(runtime)?;
            let prior = PriorModel::exponential(*gamma).map_err(runtime)?;
            artifacts.add("trajectory.csv", trajectory_csv(&traj, &prior, &density));
            artifacts.add("limit_comparison.csv", cmp.to_csv());
            let gap = cmp.max_post_transient_momentum_gap;
            let summary = DynamicsSummary {
                mode: "score-limit".into(),
                steps_taken: traj.states.len() - 1,
                halt: traj.halt.clone(),
                final_state: traj.last().clone(),
                energy_variation: energy_variation(&traj.states, &prior, &density),
                order_check: None,
                limit: Some(LimitSummary {
                    gamma: *gamma,
                    post_transient_start_z: cmp.z.get(cmp.post_transient_start).copied(),
                    max_post_transient_momentum_gap: gap,
                    sup_post_transient_position_gap: cmp.sup_post_transient_position_gap,
                    threshold: *max_momentum_gap,
                    pass: gap < *max_momentum_gap,
                    flow_halt: cmp.flow_halt.clone(),
                }),
            };
            artifacts.add("dynamics.json", to_json(&summary)?);
            Ok(DynamicsRun {
                summary,
                comparison: Some(cmp),
                artifacts,
            })
        }
    }
}

// ---------------------------------------------------------------- pca-check

#[derive(Clone, Debug, Serialize)]
pub struct PcaVerdict {
    pub fitted_objective: f64,
    pub closed_form_objective: f64,
    pub formula_objective: f64,
    /// `|fitted − closed form|`.
    pub objective_gap: f64,
    /// `max(|fitted − formula|, |closed form − formula|)`.
    pub formula_gap: f64,
    pub comparison: Option<PcaComparison>,
    /// Largest higher-order coefficient norm over the linear one (basis
    /// families only).
    pub higher_order_ratio: Option<f64>,
    pub eigenvalues: Vec<f64>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub struct PcaRun {
    pub verdict: PcaVerdict,
    pub fit: FitRun,
    pub artifacts: Artifacts,
}

pub fn pca_check(cfg: &ExperimentConfig) -> Result<PcaRun, CliError> {
    let (mean, cov) = match &cfg.density {
        DensitySpec::Gaussian { mean, covariance } => (mean.clone(), covariance.clone()),
        _ => return Err(CliError::Config("pca-check needs a gaussian [density]".into())),
    };
    let prior = cfg.prior_model()?;
    let sigma0 = prior
        .gaussian_sigma()
        .ok_or_else(|| CliError::Config("pca-check needs a gaussian [prior]".into()))?;
    let sigma = Matrix::from_rows(&cov).map_err(|e| CliError::Config(e.to_string()))?;
    let d = cfg.embedding_section()?.latent_dim;
    let solution = closed_form_solution(&sigma, d, sigma0, None).map_err(|e| match e {
        PcaError::Degenerate { .. } => CliError::Degenerate(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    let fit_run = fit(cfg)?;
    let inst = instance(cfg)?;
    let closed = EmbeddingModel::linear(&solution.a, &mean).map_err(runtime)?;
    let closed_j = estimate_objective(&closed, &inst.prior, &inst.density, &inst.scheme, false)
        .map_err(runtime)?
        .value;
    let fitted_j = fit_run.result.objective.value;
    let formula = solution.optimal_objective();
    let fitted = &fit_run.result.fitted;
    let mut checks = vec![
        Check::at_most("objective_gap", (fitted_j - closed_j).abs(), 1e-3),
        Check::at_most(
            "formula_gap",
            (fitted_j - formula).abs().max((closed_j - formula).abs()),
            1e-3,
        ),
    ];
    let (comparison, ratio) = match fitted.family() {
        Family::Linear => {
            let (a, _) = fitted.linear_parts().expect("linear family");
            let cmp = compare_fit(&a, &solution, &sigma).map_err(runtime)?;
            checks.push(Check::at_most("max_principal_angle", cmp.max_principal_angle, 0.02));
            checks.push(Check::at_most(
                "singular_value_rel_error",
                cmp.singular_value_rel_errors.iter().copied().fold(0.0, f64::max),
                1e-2,
            ));
            checks.push(Check::at_most("fixed_point_residual", cmp.fixed_point_residual, 1e-3));
            (Some(cmp), None)
        }
        Family::Basis1d { .. } => {
            let c = fitted.basis_coefficients().expect("basis family");
            let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let linear = c.get(1).map_or(0.0, norm);
            let higher = c.iter().skip(2).map(norm).fold(0.0, f64::max);
            let ratio = if linear > 0.0 { higher / linear } else { f64::INFINITY };
            checks.push(Check::at_most("higher_order_ratio", ratio, 1e-2));
            let cmp = match c.get(1) {
                Some(c1) => Some(compare_fit(&Matrix::column(c1), &solution, &sigma).map_err(runtime)?),
                None => None,
            };
            if let Some(cmp) = &cmp {
                checks.push(Check::at_most("max_principal_angle", cmp.max_principal_angle, 0.02));
            }
            (cmp, Some(ratio))
        }
        Family::Perceptron { .. } => {
            return Err(CliError::Config(
                "pca-check needs a linear or basis1d [embedding].family".into(),
            ))
        }
    };
    let pass = checks.iter().all(|c| c.pass);
    let verdict = PcaVerdict {
        fitted_objective: fitted_j,
        closed_form_objective: closed_j,
        formula_objective: formula,
        objective_gap: (fitted_j - closed_j).abs(),
        formula_gap: (fitted_j - formula).abs().max((closed_j - formula).abs()),
        comparison,
        higher_order_ratio: ratio,
        eigenvalues: solution.eigenvalues.clone(),
        checks,
        pass,
    };
    let mut artifacts = Artifacts::default();
    artifacts.add("trace.csv", trace_csv(&fit_run.outcome));
    artifacts.add("pca_check.json", to_json(&verdict)?);
    Ok(PcaRun {
        verdict,
        fit: fit_run,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use varembed_core::models::normal_cdf;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn cdf_geometry_of_the_exact_map_is_zero() {
        // φ = Φ is not representable exactly; a nearly linear CDF proxy
        // checks the plumbing instead
        let prior = PriorModel::gaussian(1, 1.0).unwrap();
        let m = EmbeddingModel::linear(&Matrix::column(&[0.0]), &[0.5]).unwrap();
        let r = geometry_report(
            &m,
            &prior,
            &GeometryCheck::Cdf {
                tolerance: 0.5,
                mass: 0.5,
            },
        )
        .unwrap();
        let (lo, hi) = r.latent_window;
        assert!((r.worst - (normal_cdf(hi) - 0.5)).abs() < 1e-12 && lo < 0.0);
        assert!(r.pass);
    }
}

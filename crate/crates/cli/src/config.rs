//! Strict TOML experiment configuration.

use serde::{Deserialize, Serialize};
use varembed_core::embedding::Family;
use varembed_core::models::{DensitySpec, PriorSpec};
use varembed_core::objective::IntegrationScheme;
use varembed_core::{DensityModel, OptimizeConfig, PriorModel, Repulsion};

use crate::error::CliError;

/// Quadrature order used when `[integration]` is absent and the prior has a
/// Gauss rule.
pub const DEFAULT_QUADRATURE_ORDER: usize = 32;
/// Sample count used when `[integration]` is absent and the prior has no
/// Gauss rule.
pub const DEFAULT_MONTE_CARLO_SAMPLES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Free-form label copied into results.
    #[serde(default)]
    pub name: Option<String>,
    pub density: DensitySpec,
    #[serde(default)]
    pub prior: Option<PriorSpec>,
    #[serde(default)]
    pub embedding: Option<EmbeddingSection>,
    #[serde(default)]
    pub integration: Option<IntegrationScheme>,
    #[serde(default)]
    pub optimizer: OptimizeConfig,
    #[serde(default)]
    pub repulsion: Option<Repulsion>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub dynamics: Option<DynamicsSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    pub latent_dim: usize,
    pub family: Family,
    /// `φ(0)` at initialization; zeros when absent.
    #[serde(default)]
    pub offset: Option<Vec<f64>>,
    /// Scale of the initial linear path.
    #[serde(default = "one")]
    pub init_slope: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Prior samples for the energy summary.
    pub energy_samples: usize,
    pub energy_seed: u64,
    /// Grid points (d = 1) or core samples (d > 1) for the EL residual.
    pub el_points: usize,
    /// Central prior mass covered by latent grids.
    pub central_mass: f64,
    /// Grid size per axis for the injectivity probe.
    pub injectivity_points: usize,
    pub max_energy_relative_std: f64,
    pub max_energy_objective_gap: f64,
    pub max_el_relative_median: f64,
    pub max_angular_cv: f64,
    /// Gradient norm below which a fit counts as converged.
    pub converged_gradient: f64,
    pub geometry: Option<GeometryCheck>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            energy_samples: 256,
            energy_seed: 0,
            el_points: 32,
            central_mass: 0.9,
            injectivity_points: 200,
            max_energy_relative_std: 1e-2,
            max_energy_objective_gap: 2e-2,
            max_el_relative_median: 5e-2,
            max_angular_cv: 5e-2,
            converged_gradient: 1e-4,
            geometry: None,
        }
    }
}

/// Geometric post-check of a fitted curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeometryCheck {
    /// Perpendicular distance to the line through `point` along `direction`.
    Line {
        point: Vec<f64>,
        direction: Vec<f64>,
        tolerance: f64,
        mass: f64,
    },
    /// Relative deviation of `‖φ − center‖` from `radius`.
    Circle {
        center: Vec<f64>,
        radius: f64,
        tolerance: f64,
        mass: f64,
    },
    /// `|φ(z) − Q(z)|` with `Q` the prior CDF (d = D = 1).
    Cdf { tolerance: f64, mass: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Emit an SVG overlay for planar curves.
    pub svg: bool,
    /// Density grid resolution per axis for contours.
    pub contour_grid: usize,
    pub contour_levels: usize,
    /// Samples along the fitted curve.
    pub curve_points: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            svg: true,
            contour_grid: 120,
            contour_levels: 6,
            curve_points: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DynamicsSection {
    /// Curve dynamics under `[prior]` from an explicit initial state.
    El {
        phi0: Vec<f64>,
        p0: Vec<f64>,
        z_span: [f64; 2],
        steps: usize,
        #[serde(default)]
        order_check: bool,
    },
    /// Exponential prior `γe^{γz}` against the reduced score-following
    /// flow; the initial momentum is `s(φ0)/γ`.
    ScoreLimit {
        gamma: f64,
        phi0: Vec<f64>,
        z_span: [f64; 2],
        steps: usize,
        #[serde(default = "default_gap_threshold")]
        max_momentum_gap: f64,
    },
}

fn default_gap_threshold() -> f64 {
    0.05
}

/// Parses a config document, applying `key=value` overrides first.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
    } else {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
        toml::from_str(&merged).map_err(|e| CliError::Config(format!("after overrides: {e}")))?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is read as a TOML literal, or as a bare string
/// if it does not parse.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key `{path}` is malformed")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override key `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn density_model(&self) -> Result<DensityModel, CliError> {
        DensityModel::from_spec(self.density.clone()).map_err(|e| CliError::Config(format!("[density]: {e}")))
    }

    pub fn prior_model(&self) -> Result<PriorModel, CliError> {
        let spec = self
            .prior
            .clone()
            .ok_or_else(|| CliError::Config("missing [prior] section".into()))?;
        PriorModel::from_spec(spec).map_err(|e| CliError::Config(format!("[prior]: {e}")))
    }

    pub fn embedding_section(&self) -> Result<&EmbeddingSection, CliError> {
        self.embedding
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [embedding] section".into()))
    }

    /// The configured scheme, or the default for the prior.
    pub fn scheme(&self, prior: &PriorModel) -> IntegrationScheme {
        self.integration.clone().unwrap_or_else(|| {
            if prior.quadrature(2).is_ok() {
                IntegrationScheme::Quadrature {
                    order: DEFAULT_QUADRATURE_ORDER,
                }
            } else {
                IntegrationScheme::MonteCarlo {
                    samples: DEFAULT_MONTE_CARLO_SAMPLES,
                    seed: self.optimizer.seed,
                }
            }
        })
    }

    /// Cross-section consistency checks that need no computation.
    pub fn validate(&self) -> Result<(), CliError> {
        let density = self.density_model()?;
        let big_d = density.dim();
        if self.prior.is_some() {
            let prior = self.prior_model()?;
            if let Some(e) = &self.embedding {
                if e.latent_dim != prior.dim() {
                    return Err(CliError::Config(format!(
                        "[embedding].latent_dim = {} but [prior] has dimension {}",
                        e.latent_dim,
                        prior.dim()
                    )));
                }
            }
        }
        if let Some(e) = &self.embedding {
            if e.latent_dim == 0 || e.latent_dim > big_d {
                return Err(CliError::Config(format!(
                    "[embedding].latent_dim = {} must lie in 1..={big_d}",
                    e.latent_dim
                )));
            }
            if let Some(off) = &e.offset {
                if off.len() != big_d {
                    return Err(CliError::Config(format!(
                        "[embedding].offset has length {}, [density] has dimension {big_d}",
                        off.len()
                    )));
                }
            }
            if !(e.init_slope > 0.0 && e.init_slope.is_finite()) {
                return Err(CliError::Config("[embedding].init_slope must be positive".into()));
            }
        }
        if self.optimizer.init_slope != 1.0 {
            return Err(CliError::Config(
                "[optimizer].init_slope is not used; set [embedding].init_slope instead".into(),
            ));
        }
        self.optimizer
            .validate()
            .map_err(|e| CliError::Config(format!("[optimizer]: {e}")))?;
        if let Some(r) = &self.repulsion {
            if !(r.weight >= 0.0 && r.length > 0.0 && r.latent_gap >= 0.0) {
                return Err(CliError::Config(
                    "[repulsion] needs weight >= 0, length > 0 and latent_gap >= 0".into(),
                ));
            }
        }
        let d = &self.diagnostics;
        if !(d.central_mass > 0.0 && d.central_mass < 1.0) {
            return Err(CliError::Config("[diagnostics].central_mass must lie in (0, 1)".into()));
        }
        if d.energy_samples < 2 || d.el_points < 2 {
            return Err(CliError::Config(
                "[diagnostics] needs at least 2 energy samples and EL points".into(),
            ));
        }
        if let Some(g) = &d.geometry {
            let (tol, mass) = match g {
                GeometryCheck::Line {
                    point,
                    direction,
                    tolerance,
                    mass,
                } => {
                    if point.len() != big_d || direction.len() != big_d {
                        return Err(CliError::Config(
                            "[diagnostics.geometry] line dimensions mismatch".into(),
                        ));
                    }
                    (*tolerance, *mass)
                }
                GeometryCheck::Circle {
                    center,
                    tolerance,
                    mass,
                    ..
                } => {
                    if center.len() != big_d {
                        return Err(CliError::Config(
                            "[diagnostics.geometry] center dimension mismatch".into(),
                        ));
                    }
                    (*tolerance, *mass)
                }
                GeometryCheck::Cdf { tolerance, mass } => (*tolerance, *mass),
            };
            if !(tol > 0.0 && mass > 0.0 && mass < 1.0) {
                return Err(CliError::Config(
                    "[diagnostics.geometry] needs tolerance > 0 and mass in (0, 1)".into(),
                ));
            }
        }
        let o = &self.output;
        if o.contour_grid < 2 || o.curve_points < 2 {
            return Err(CliError::Config("[output] grids need at least 2 points".into()));
        }
        if let Some(dy) = &self.dynamics {
            let (phi0, span, steps) = match dy {
                DynamicsSection::El {
                    phi0,
                    p0,
                    z_span,
                    steps,
                    ..
                } => {
                    if p0.len() != big_d {
                        return Err(CliError::Config("[dynamics].p0 dimension mismatch".into()));
                    }
                    (phi0, z_span, *steps)
                }
                DynamicsSection::ScoreLimit {
                    gamma,
                    phi0,
                    z_span,
                    steps,
                    ..
                } => {
                    if !(*gamma > 0.0) {
                        return Err(CliError::Config("[dynamics].gamma must be positive".into()));
                    }
                    if z_span[1] > 0.0 {
                        return Err(CliError::Config(
                            "[dynamics].z_span must stay in the exponential prior's support z <= 0".into(),
                        ));
                    }
                    (phi0, z_span, *steps)
                }
            };
            if phi0.len() != big_d {
                return Err(CliError::Config("[dynamics].phi0 dimension mismatch".into()));
            }
            if !(span[1] > span[0]) || steps == 0 {
                return Err(CliError::Config(
                    "[dynamics] needs z_span[1] > z_span[0] and steps > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

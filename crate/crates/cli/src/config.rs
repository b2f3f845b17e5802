//! Strict TOML run configuration.
//!
//! Keys are dotted (`mesh.n_elements = 512` or a `[mesh]` table); unknown keys
//! and type mismatches are rejected with the offending line.

use std::fmt;

use serde::Deserialize;
use stochwave::harness::{InitialData, MonteCarlo, Profile, ReferenceKind, StepRule};
use stochwave::scheme::LevelSpec;
use stochwave::{
    CovarianceSpec, Drift, ExperimentConfig, ProjectionMode, RationalMethod, RegularityParams,
    TestFunction,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "config line {line}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn missing(key: &str) -> ConfigError {
    ConfigError {
        line: None,
        message: format!("missing required key `{key}`"),
    }
}

fn invalid(message: String) -> ConfigError {
    ConfigError {
        line: None,
        message,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub mesh: Option<MeshSection>,
    pub time: Option<TimeSection>,
    pub noise: Option<NoiseSection>,
    pub drift: Option<DriftSection>,
    pub scheme: Option<SchemeSection>,
    pub mc: Option<McSection>,
    pub levels: Option<Vec<String>>,
    pub reference: Option<ReferenceSection>,
    pub initial: Option<InitialSection>,
    pub params: Option<ParamsSection>,
    pub output: Option<OutputSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub n_elements: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub dt: Option<f64>,
    #[serde(rename = "T")]
    pub t_final: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    White,
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub model: NoiseModel,
    pub kernel: Option<KernelSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelName {
    ScaledExponential,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub name: Option<KernelName>,
    pub rate: Option<f64>,
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftName {
    Cos,
    Sin,
    Zero,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    pub f: DriftName,
    pub linear_coeff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub method: Option<RationalMethod>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub h: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Zero,
    Hat,
    LeftIndicator,
    FirstMode,
}

impl ProfileName {
    fn profile(self) -> Profile {
        match self {
            ProfileName::Zero => Profile::Zero,
            ProfileName::Hat => Profile::Hat,
            ProfileName::LeftIndicator => Profile::LeftIndicator,
            ProfileName::FirstMode => Profile::Sine {
                mode: 1,
                amplitude: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub u0: Option<ProfileName>,
    pub v0: Option<ProfileName>,
    pub projection: Option<ProjectionMode>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub beta: Option<f64>,
    pub delta: Option<f64>,
    pub theta: Option<f64>,
    pub eta: Option<f64>,
    pub nu: Option<f64>,
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<std::path::PathBuf>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())]
        .bytes()
        .filter(|b| *b == b'\n')
        .count()
        + 1
}

pub fn parse_config(text: &str) -> Result<CliConfig, ConfigError> {
    toml::from_str(text).map_err(|e: toml::de::Error| ConfigError {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_owned(),
    })
}

/// Everything needed for one `simulate` path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub n_elements: usize,
    pub dt: f64,
    pub t_final: f64,
    pub noise: Option<CovarianceSpec>,
    pub drift: Drift,
    pub method: RationalMethod,
    pub initial: InitialData,
    pub seed: u64,
}

impl CliConfig {
    pub fn method(&self) -> RationalMethod {
        self.scheme
            .as_ref()
            .and_then(|s| s.method)
            .unwrap_or(RationalMethod::CrankNicolson)
    }

    pub fn noise_spec(&self) -> Result<Option<CovarianceSpec>, ConfigError> {
        let Some(noise) = &self.noise else {
            return Ok(None);
        };
        Ok(Some(match noise.model {
            NoiseModel::White => {
                if noise.kernel.is_some() {
                    return Err(invalid(
                        "`noise.kernel` is only valid with noise.model = \"kernel\"".into(),
                    ));
                }
                CovarianceSpec::White
            }
            NoiseModel::Kernel => {
                let k = noise.kernel.clone().unwrap_or(KernelSection {
                    name: None,
                    rate: None,
                    scale: None,
                });
                let CovarianceSpec::ScaledExponential { rate, scale } =
                    CovarianceSpec::exponential_default()
                else {
                    unreachable!()
                };
                CovarianceSpec::ScaledExponential {
                    rate: k.rate.unwrap_or(rate),
                    scale: k.scale.unwrap_or(scale),
                }
            }
        }))
    }

    pub fn drift(&self) -> Result<Drift, ConfigError> {
        let Some(d) = &self.drift else {
            return Ok(Drift::Zero);
        };
        if d.linear_coeff.is_some() && d.f != DriftName::Linear {
            return Err(invalid(
                "`drift.linear_coeff` requires drift.f = \"linear\"".into(),
            ));
        }
        Ok(match d.f {
            DriftName::Cos => Drift::Cos,
            DriftName::Sin => Drift::Sin,
            DriftName::Zero => Drift::Zero,
            DriftName::Linear => Drift::Linear {
                coeff: d
                    .linear_coeff
                    .ok_or_else(|| missing("drift.linear_coeff"))?,
            },
        })
    }

    pub fn initial(&self) -> InitialData {
        let mut init = InitialData::zero();
        if let Some(s) = &self.initial {
            if let Some(u) = s.u0 {
                init.u0 = u.profile();
            }
            if let Some(v) = s.v0 {
                init.v0 = v.profile();
            }
            if let Some(p) = s.projection {
                init.projection = p;
            }
        }
        init
    }

    pub fn t_final(&self) -> Result<f64, ConfigError> {
        self.time
            .as_ref()
            .and_then(|t| t.t_final)
            .ok_or_else(|| missing("time.T"))
    }

    pub fn seed(&self) -> Option<u64> {
        self.mc.as_ref().and_then(|m| m.seed)
    }

    pub fn workers(&self) -> Option<usize> {
        self.mc.as_ref().and_then(|m| m.workers)
    }

    pub fn output_dir(&self) -> Option<&std::path::Path> {
        self.output.as_ref().and_then(|o| o.dir.as_deref())
    }

    /// Regularity parameters, with `κ = 2` (P1 elements) and `ρ` from the
    /// scheme; `eta` defaults to ∞ (time-independent data).
    pub fn params(&self) -> Result<Option<RegularityParams>, ConfigError> {
        let Some(p) = &self.params else {
            return Ok(None);
        };
        let get = |v: Option<f64>, key: &str| v.ok_or_else(|| missing(key));
        let params = RegularityParams {
            beta: get(p.beta, "params.beta")?,
            delta: get(p.delta, "params.delta")?,
            theta: get(p.theta, "params.theta")?,
            eta: p.eta.unwrap_or(f64::INFINITY),
            nu: get(p.nu, "params.nu")?,
            mu: get(p.mu, "params.mu")?,
            kappa: 2,
            rho: self.method().order(),
        };
        Ok(Some(params))
    }

    pub fn simulation(&self) -> Result<SimulationSpec, ConfigError> {
        let n_elements = self
            .mesh
            .as_ref()
            .ok_or_else(|| missing("mesh.n_elements"))?
            .n_elements;
        let dt = self
            .time
            .as_ref()
            .and_then(|t| t.dt)
            .ok_or_else(|| missing("time.dt"))?;
        Ok(SimulationSpec {
            n_elements,
            dt,
            t_final: self.t_final()?,
            noise: self.noise_spec()?,
            drift: self.drift()?,
            method: self.method(),
            initial: self.initial(),
            seed: self.seed().unwrap_or(0),
        })
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, ConfigError> {
        let raw = self.levels.as_ref().ok_or_else(|| missing("levels"))?;
        let levels = raw
            .iter()
            .map(|s| parse_level(s))
            .collect::<Result<Vec<_>, _>>()?;
        if levels.is_empty() {
            return Err(invalid("`levels` must not be empty".into()));
        }
        let r = self
            .reference
            .as_ref()
            .ok_or_else(|| missing("reference.h"))?;
        let reference = LevelSpec::new(r.h, r.dt);
        let step_rule = [StepRule::DtEqualsH, StepRule::DtEqualsHSquared]
            .into_iter()
            .find(|rule| {
                levels
                    .iter()
                    .chain(std::iter::once(&reference))
                    .all(|l| (l.dt - l.h.powf(rule.dt_power())).abs() <= 1e-9 * l.dt)
            })
            .ok_or_else(|| {
                invalid(
                    "levels and reference must all satisfy dt = h or all satisfy dt = h^2".into(),
                )
            })?;
        let mc = self.mc.as_ref().ok_or_else(|| missing("mc.samples"))?;
        let params = self.params()?;
        Ok(ExperimentConfig {
            name: "config".into(),
            levels,
            reference,
            step_rule,
            reference_kind: ReferenceKind::Fem,
            mc: MonteCarlo {
                n_samples: mc.samples.ok_or_else(|| missing("mc.samples"))?,
                master_seed: mc.seed.unwrap_or(0),
                workers: mc.workers.unwrap_or(1),
            },
            noise: self.noise_spec()?,
            drift: self.drift()?,
            method: self.method(),
            initial: self.initial(),
            t_final: self.t_final()?,
            test_functions: vec![TestFunction::SquaredL2Norm],
            negnorm_nu: params.map(|p| p.nu),
            params,
        })
    }
}

fn parse_level(s: &str) -> Result<LevelSpec, ConfigError> {
    let bad = || invalid(format!("level `{s}` is not an \"h,dt\" pair"));
    let (h, dt) = s.split_once(',').ok_or_else(bad)?;
    let h: f64 = h.trim().parse().map_err(|_| bad())?;
    let dt: f64 = dt.trim().parse().map_err(|_| bad())?;
    Ok(LevelSpec::new(h, dt))
}

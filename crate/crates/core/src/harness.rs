//! Monte Carlo convergence experiments.
//!
//! Every sample drives all levels and the reference through one Wiener path
//! (see [`CoupledPaths`]); per-level contributions are aggregated in sample
//! order, so results do not depend on the worker count.

use std::f64::consts::SQRT_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    negative_norm_sq, predict_rates, squared_distance_to_modal, strong_from_squares,
    weak_from_differences, ErrorColumn, ErrorRow, ErrorTable, Estimate, ModalOracle, ModalState,
    RateFit, RatePrediction, RegularityParams, TestFunction, WeakEstimate,
};
use crate::error::{Error, Result};
use crate::fem::{
    project_initial_data, FemFunction, FemOperators, ModalProjector, ProjectionMode, SpectralBasis,
};
use crate::noise::{build_noise_factor, derive_stream, CovarianceSpec, NoiseFactor, StreamSpec};
use crate::scheme::{level_name, CoupledPaths, Drift, LevelSpec, RationalMethod, State};

/// Scalar initial profiles on (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum Profile {
    Zero,
    /// `x χ_(0,1/2) + (1 − x) χ_[1/2,1)`
    Hat,
    /// `χ_(0,1/2)`
    LeftIndicator,
    /// `amplitude · sin(mode π x)`
    Sine {
        mode: u32,
        amplitude: f64,
    },
}

impl Profile {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Profile::Zero => 0.0,
            Profile::Hat => {
                if x < 0.5 {
                    x
                } else {
                    1.0 - x
                }
            }
            Profile::LeftIndicator => {
                if x < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            Profile::Sine { mode, amplitude } => {
                amplitude * (mode as f64 * std::f64::consts::PI * x).sin()
            }
        }
    }

    /// Exact eigenbasis coefficients, when the profile has finitely many.
    pub fn exact_modal(&self, modes: usize) -> Option<Vec<f64>> {
        let mut out = vec![0.0; modes];
        match *self {
            Profile::Zero => Some(out),
            Profile::Sine { mode, amplitude } if (1..=modes).contains(&(mode as usize)) => {
                out[mode as usize - 1] = amplitude / SQRT_2;
                Some(out)
            }
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Profile::Zero => "zero",
            Profile::Hat => "hat",
            Profile::LeftIndicator => "left_indicator",
            Profile::Sine { .. } => "sine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialData {
    pub u0: Profile,
    pub v0: Profile,
    pub projection: ProjectionMode,
}

impl InitialData {
    pub fn zero() -> Self {
        InitialData {
            u0: Profile::Zero,
            v0: Profile::Zero,
            projection: ProjectionMode::L2,
        }
    }

    pub fn project(&self, ops: &FemOperators) -> Result<State> {
        let u = project_initial_data(ops, |x| self.u0.value(x), self.projection)?;
        let v = project_initial_data(ops, |x| self.v0.value(x), self.projection)?;
        State::from_functions(&u, &v)
    }
}

/// How `dt` is tied to `h` across levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    DtEqualsH,
    DtEqualsHSquared,
}

impl StepRule {
    pub fn dt_power(self) -> f64 {
        match self {
            StepRule::DtEqualsH => 1.0,
            StepRule::DtEqualsHSquared => 2.0,
        }
    }

    pub fn level(self, h: f64) -> LevelSpec {
        LevelSpec::new(h, h.powf(self.dt_power()))
    }

    fn accepts(self, level: LevelSpec) -> bool {
        let want = level.h.powf(self.dt_power());
        (level.dt - want).abs() <= 1e-9 * want
    }
}

/// What the coarse levels are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceKind {
    /// A fine FEM discretization.
    Fem,
    /// A fine FEM discretization plus the exact modal solution, both driven
    /// by white noise truncated to the first `modes` eigenfunctions.
    FemWithModalOracle { modes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarlo {
    pub n_samples: usize,
    pub master_seed: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Coarse levels, coarsest first.
    pub levels: Vec<LevelSpec>,
    pub reference: LevelSpec,
    pub step_rule: StepRule,
    pub reference_kind: ReferenceKind,
    pub mc: MonteCarlo,
    /// `None` runs noise-free paths.
    pub noise: Option<CovarianceSpec>,
    pub drift: Drift,
    pub method: RationalMethod,
    pub initial: InitialData,
    pub t_final: f64,
    /// The first one fills the weak column of the error table.
    pub test_functions: Vec<TestFunction>,
    pub params: Option<RegularityParams>,
    pub negnorm_nu: Option<f64>,
}

const DEFAULT_SEED: u64 = 20_190_611;

fn dyadic(k: i32) -> f64 {
    2f64.powi(-k)
}

pub const BUILTIN_NAMES: [&str; 4] = [
    "white_noise_1d",
    "trace_class_1d",
    "deterministic_eigenmode",
    "linear_modal_validation",
];

pub fn builtin_experiment(name: &str) -> Result<ExperimentConfig> {
    let mc = |n_samples| MonteCarlo {
        n_samples,
        master_seed: DEFAULT_SEED,
        workers: 1,
    };
    let config = match name {
        "white_noise_1d" => ExperimentConfig {
            name: name.into(),
            levels: (1..=6)
                .map(|k| StepRule::DtEqualsH.level(dyadic(k)))
                .collect(),
            reference: StepRule::DtEqualsH.level(dyadic(8)),
            step_rule: StepRule::DtEqualsH,
            reference_kind: ReferenceKind::Fem,
            mc: mc(2000),
            noise: Some(CovarianceSpec::White),
            drift: Drift::Cos,
            method: RationalMethod::CrankNicolson,
            initial: InitialData {
                u0: Profile::Hat,
                v0: Profile::LeftIndicator,
                projection: ProjectionMode::L2,
            },
            t_final: 1.0,
            test_functions: vec![TestFunction::SquaredL2Norm],
            params: Some(RegularityParams::white_noise_1d()),
            negnorm_nu: Some(0.5),
        },
        "trace_class_1d" => ExperimentConfig {
            name: name.into(),
            levels: (1..=5)
                .map(|k| StepRule::DtEqualsHSquared.level(dyadic(k)))
                .collect(),
            reference: StepRule::DtEqualsHSquared.level(dyadic(6)),
            step_rule: StepRule::DtEqualsHSquared,
            reference_kind: ReferenceKind::Fem,
            mc: mc(500),
            noise: Some(CovarianceSpec::exponential_default()),
            drift: Drift::Sin,
            method: RationalMethod::CrankNicolson,
            initial: InitialData::zero(),
            t_final: 1.0,
            test_functions: vec![TestFunction::SquaredL2Norm],
            params: Some(RegularityParams::trace_class_1d()),
            negnorm_nu: Some(1.0),
        },
        "deterministic_eigenmode" => ExperimentConfig {
            name: name.into(),
            levels: (3..=7)
                .map(|k| StepRule::DtEqualsH.level(dyadic(k)))
                .collect(),
            reference: StepRule::DtEqualsH.level(dyadic(10)),
            step_rule: StepRule::DtEqualsH,
            reference_kind: ReferenceKind::Fem,
            mc: mc(2),
            noise: None,
            drift: Drift::Zero,
            method: RationalMethod::CrankNicolson,
            initial: InitialData {
                u0: Profile::Sine {
                    mode: 1,
                    amplitude: 1.0,
                },
                v0: Profile::Zero,
                projection: ProjectionMode::Nodal,
            },
            t_final: 1.0,
            test_functions: vec![TestFunction::SquaredL2Norm],
            params: None,
            negnorm_nu: None,
        },
        "linear_modal_validation" => ExperimentConfig {
            name: name.into(),
            levels: (2..=4)
                .map(|k| StepRule::DtEqualsH.level(dyadic(k)))
                .collect(),
            reference: StepRule::DtEqualsH.level(dyadic(8)),
            step_rule: StepRule::DtEqualsH,
            reference_kind: ReferenceKind::FemWithModalOracle { modes: 32 },
            mc: mc(500),
            noise: Some(CovarianceSpec::White),
            drift: Drift::Zero,
            method: RationalMethod::CrankNicolson,
            initial: InitialData::zero(),
            t_final: 1.0,
            test_functions: vec![TestFunction::SquaredL2Norm],
            params: None,
            negnorm_nu: None,
        },
        other => return Err(Error::UnknownExperiment(other.to_owned())),
    };
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.levels.is_empty() {
            return bad("experiment has no levels".into());
        }
        if self.mc.n_samples < 2 {
            return bad(format!(
                "need at least 2 samples, got {}",
                self.mc.n_samples
            ));
        }
        if self.mc.workers == 0 {
            return bad("worker count must be at least 1".into());
        }
        if self.test_functions.is_empty() {
            return bad("at least one test function is required".into());
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return bad(format!("final time must be positive, got {}", self.t_final));
        }
        for (i, pair) in self.levels.windows(2).enumerate() {
            if !(pair[1].h < pair[0].h) {
                return bad(format!(
                    "level h must strictly decrease (levels {i} and {})",
                    i + 1
                ));
            }
        }
        for (i, level) in self.levels.iter().enumerate() {
            if !self.step_rule.accepts(*level) {
                return bad(format!(
                    "level {i}: dt = {} violates the {:?} rule for h = {}",
                    level.dt, self.step_rule, level.h
                ));
            }
            if level.h < self.reference.h || level.dt < self.reference.dt {
                return bad(format!("level {i} is finer than the reference"));
            }
        }
        if !self.step_rule.accepts(self.reference) {
            return bad(format!(
                "reference dt = {} violates the {:?} rule for h = {}",
                self.reference.dt, self.step_rule, self.reference.h
            ));
        }
        if let Some(p) = &self.params {
            p.validate()?;
        }
        if let Some(nu) = self.negnorm_nu {
            if !(0.0..=1.0).contains(&nu) {
                return Err(Error::UnsupportedExponent(-nu));
            }
        }
        if let ReferenceKind::FemWithModalOracle { modes } = self.reference_kind {
            if modes == 0 {
                return bad("the modal oracle needs at least one mode".into());
            }
            if self.noise != Some(CovarianceSpec::White) {
                return Err(Error::UnsupportedConfiguration(
                    "the modal oracle supports white noise only".into(),
                ));
            }
            if !self.drift.is_zero() {
                return Err(Error::UnsupportedConfiguration(
                    "the modal oracle requires a zero drift".into(),
                ));
            }
            if self.initial.u0.exact_modal(modes).is_none()
                || self.initial.v0.exact_modal(modes).is_none()
            {
                return Err(Error::UnsupportedConfiguration(
                    "the modal oracle needs initial data with a finite sine expansion".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Strong errors of one level against the modal oracle and the FEM reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub level: String,
    pub h: f64,
    pub dt: f64,
    pub vs_oracle: Estimate,
    /// `None` for the reference row itself.
    pub vs_reference: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakSeries {
    pub test_function: String,
    pub estimates: Vec<WeakEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub quantity: ErrorColumn,
    pub fit: Option<RateFit>,
    pub predicted_slope: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTiming {
    pub level: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub setup_seconds: f64,
    pub sampling_seconds: f64,
    pub total_seconds: f64,
    /// Summed over samples (CPU time across workers).
    pub per_level: Vec<LevelTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub table: ErrorTable,
    pub negnorm_nu: Option<f64>,
    pub fits: Vec<FitSummary>,
    pub predicted: Option<RatePrediction>,
    pub weak_series: Vec<WeakSeries>,
    pub oracle: Option<Vec<OracleRow>>,
    pub timings: Timings,
}

impl ExperimentReport {
    pub fn fit(&self, quantity: ErrorColumn) -> Option<&RateFit> {
        self.fits
            .iter()
            .find(|f| f.quantity == quantity)
            .and_then(|f| f.fit.as_ref())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Shared, read-only per-experiment setup.
struct Setup {
    paths: CoupledPaths,
    ref_ops: Arc<FemOperators>,
    noise: Option<NoiseFactor>,
    negnorm: Option<(f64, ModalProjector)>,
    oracle: Option<(ModalOracle, ModalState, ModalProjector)>,
}

struct SampleResult {
    strong_sq: Vec<f64>,
    negnorm_sq: Vec<f64>,
    /// `[test function][level]`
    weak: Vec<Vec<f64>>,
    /// levels, then the reference
    oracle_sq: Vec<f64>,
    timings: Vec<Duration>,
}

fn build_setup(config: &ExperimentConfig) -> Result<Setup> {
    let initial = config.initial;
    let drift = (!config.drift.is_zero()).then_some(config.drift);
    let paths = CoupledPaths::new(
        config.method,
        config.reference,
        &config.levels,
        config.t_final,
        drift,
        |ops| initial.project(ops),
    )?;
    let ref_ops = paths.reference().ops().clone();
    let ref_mesh = ref_ops.mesh().clone();
    for phi in &config.test_functions {
        if let TestFunction::LinearFunctional { weight } = phi {
            if weight.n_elements() != ref_mesh.n_elements() {
                return Err(Error::invalid(
                    "linear functional weight must live on the reference mesh",
                ));
            }
        }
    }
    let mut noise = None;
    let mut oracle = None;
    match (config.reference_kind, config.noise) {
        (ReferenceKind::FemWithModalOracle { modes }, _) => {
            let basis = SpectralBasis::new(modes)?;
            let m = ModalOracle::new(basis, config.reference.dt, Some(&ref_mesh))?;
            let start = ModalState {
                u: config.initial.u0.exact_modal(modes).expect("validated"),
                v: config.initial.v0.exact_modal(modes).expect("validated"),
                time: 0.0,
            };
            oracle = Some((m, start, ModalProjector::new(ref_mesh.n_elements(), basis)));
        }
        (ReferenceKind::Fem, Some(spec)) => {
            noise = Some(build_noise_factor(&ref_mesh, &ref_ops, spec)?);
        }
        (ReferenceKind::Fem, None) => {}
    }
    let negnorm = config.negnorm_nu.map(|nu| {
        let basis = SpectralBasis::for_elements(ref_mesh.n_elements());
        (nu, ModalProjector::new(ref_mesh.n_elements(), basis))
    });
    Ok(Setup {
        paths,
        ref_ops,
        noise,
        negnorm,
        oracle,
    })
}

fn run_sample(config: &ExperimentConfig, setup: &Setup, sample: usize) -> Result<SampleResult> {
    let mut rng = derive_stream(StreamSpec::new(config.mc.master_seed, sample as u64, 0));
    let n_levels = config.levels.len();
    let mut timings = vec![Duration::ZERO; n_levels + 1];
    let dt = config.reference.dt;
    let mut oracle_state = None;
    let outcome = match (&setup.oracle, &setup.noise) {
        (Some((oracle, start, _)), _) => {
            let mut state = start.clone();
            let mut increments = vec![0.0; oracle.modes()];
            let result = {
                let mut next = |out: &mut [f64]| {
                    oracle.step(&mut state, &mut rng, &mut increments, Some(out));
                    Ok(())
                };
                setup.paths.run_timed(Some(&mut next), Some(&mut timings))
            };
            oracle_state = Some(state);
            result
        }
        (None, Some(factor)) => {
            let mut z = vec![0.0; factor.dof()];
            let mut next =
                |out: &mut [f64]| factor.sample_load_increment_into(dt, &mut rng, &mut z, out);
            setup.paths.run_timed(Some(&mut next), Some(&mut timings))
        }
        (None, None) => setup.paths.run_timed(None, Some(&mut timings)),
    };
    let states = outcome.map_err(|(tag, e)| Error::SampleFailure {
        sample,
        level: level_name(tag),
        source: Box::new(e),
    })?;

    let ops = &*setup.ref_ops;
    let mass = ops.mass();
    let reference = &states[0];
    let ref_fn = FemFunction::new(ops.mesh(), reference.u.clone())?;
    let mut modal = vec![0.0; setup.negnorm.as_ref().map_or(0, |(_, p)| p.modes())];
    let mut oracle_scratch = vec![0.0; setup.oracle.as_ref().map_or(0, |(o, _, _)| o.modes())];
    let mut out = SampleResult {
        strong_sq: Vec::with_capacity(n_levels),
        negnorm_sq: Vec::new(),
        weak: vec![Vec::with_capacity(n_levels); config.test_functions.len()],
        oracle_sq: Vec::new(),
        timings,
    };
    let phi_ref = config
        .test_functions
        .iter()
        .map(|phi| phi.evaluate(&ref_fn, ops))
        .collect::<Result<Vec<f64>>>()?;
    for k in 0..n_levels {
        let fine = setup.paths.level_prolongation(k).mul_vec(&states[k + 1].u);
        let diff: Vec<f64> = fine.iter().zip(&reference.u).map(|(a, b)| a - b).collect();
        out.strong_sq.push(mass.quad_form(&diff));
        if let Some((nu, projector)) = &setup.negnorm {
            out.negnorm_sq
                .push(negative_norm_sq(projector, *nu, &diff, &mut modal));
        }
        if let (Some((_, _, projector)), Some(exact)) = (&setup.oracle, &oracle_state) {
            out.oracle_sq.push(squared_distance_to_modal(
                &fine,
                ops,
                projector,
                exact,
                &mut oracle_scratch,
            ));
        }
        let fine_fn = FemFunction::new(ops.mesh(), fine)?;
        for (t, phi) in config.test_functions.iter().enumerate() {
            out.weak[t].push(phi.evaluate(&fine_fn, ops)? - phi_ref[t]);
        }
    }
    if let (Some((_, _, projector)), Some(exact)) = (&setup.oracle, &oracle_state) {
        out.oracle_sq.push(squared_distance_to_modal(
            &reference.u,
            ops,
            projector,
            exact,
            &mut oracle_scratch,
        ));
    }
    Ok(out)
}

fn column<T: Copy>(samples: &[SampleResult], pick: impl Fn(&SampleResult) -> T) -> Vec<T> {
    samples.iter().map(pick).collect()
}

/// Runs every sample (in parallel over `mc.workers` threads) and aggregates
/// the error table, rate fits and predicted rates.
pub fn run_convergence_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let setup = build_setup(config)?;
    let setup_seconds = started.elapsed().as_secs_f64();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.mc.workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let failed = AtomicBool::new(false);
    let sampling = Instant::now();
    let results: Vec<Option<Result<SampleResult>>> = pool.install(|| {
        (0..config.mc.n_samples)
            .into_par_iter()
            .map(|i| {
                if failed.load(Ordering::Relaxed) {
                    return None;
                }
                let r = run_sample(config, &setup, i);
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                Some(r)
            })
            .collect()
    });
    let sampling_seconds = sampling.elapsed().as_secs_f64();
    // lowest-index failure wins
    let mut samples = Vec::with_capacity(results.len());
    let mut failure = None;
    for r in results {
        match r {
            Some(Ok(s)) => samples.push(s),
            Some(Err(e)) => {
                failure.get_or_insert(e);
            }
            None => {}
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }

    let n = samples.len();
    let mut rows = Vec::with_capacity(config.levels.len());
    let mut weak_series: Vec<WeakSeries> = config
        .test_functions
        .iter()
        .map(|phi| WeakSeries {
            test_function: phi.name().to_owned(),
            estimates: Vec::new(),
        })
        .collect();
    for (k, level) in config.levels.iter().enumerate() {
        let strong = strong_from_squares(&column(&samples, |s| s.strong_sq[k]))?;
        for (t, series) in weak_series.iter_mut().enumerate() {
            series
                .estimates
                .push(weak_from_differences(&column(&samples, |s| s.weak[t][k]))?);
        }
        let weak = weak_series[0].estimates[k];
        let negnorm = match setup.negnorm {
            Some(_) => Some(strong_from_squares(&column(&samples, |s| s.negnorm_sq[k]))?),
            None => None,
        };
        rows.push(ErrorRow {
            level: k,
            h: level.h,
            dt: level.dt,
            n_samples: n,
            strong_error: strong.value,
            strong_se: strong.se,
            weak_error: weak.value,
            weak_se: weak.se,
            negnorm_error: negnorm.map(|e| e.value),
            negnorm_se: negnorm.map(|e| e.se),
            noise_floor_flag: weak.noise_floor,
        });
    }
    let table = ErrorTable { rows };

    let oracle = match setup.oracle {
        Some(_) => {
            let mut out = Vec::with_capacity(config.levels.len() + 1);
            for (k, level) in config.levels.iter().enumerate() {
                let row = &table.rows[k];
                out.push(OracleRow {
                    level: k.to_string(),
                    h: level.h,
                    dt: level.dt,
                    vs_oracle: strong_from_squares(&column(&samples, |s| s.oracle_sq[k]))?,
                    vs_reference: Some(Estimate {
                        value: row.strong_error,
                        se: row.strong_se,
                    }),
                });
            }
            let k = config.levels.len();
            out.push(OracleRow {
                level: level_name(0),
                h: config.reference.h,
                dt: config.reference.dt,
                vs_oracle: strong_from_squares(&column(&samples, |s| s.oracle_sq[k]))?,
                vs_reference: None,
            });
            Some(out)
        }
        None => None,
    };

    let predicted = config.params.as_ref().map(predict_rates).transpose()?;
    let mut quantities = vec![ErrorColumn::Strong, ErrorColumn::Weak];
    if config.negnorm_nu.is_some() {
        quantities.push(ErrorColumn::Negnorm);
    }
    let fits = quantities
        .into_iter()
        .map(|q| {
            let predicted_slope = predicted.map(|p| p.slope_vs_h(q, config.step_rule.dt_power()));
            match crate::analysis::fit_rates(&table, q) {
                Ok(fit) => FitSummary {
                    quantity: q,
                    fit: Some(fit),
                    predicted_slope,
                    failure: None,
                },
                Err(e) => FitSummary {
                    quantity: q,
                    fit: None,
                    predicted_slope,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut per_level = vec![Duration::ZERO; config.levels.len() + 1];
    for s in &samples {
        for (acc, t) in per_level.iter_mut().zip(&s.timings) {
            *acc += *t;
        }
    }
    let per_level = per_level
        .iter()
        .enumerate()
        .map(|(tag, d)| LevelTiming {
            level: level_name(tag),
            seconds: d.as_secs_f64(),
        })
        .collect();

    Ok(ExperimentReport {
        config: config.clone(),
        table,
        negnorm_nu: config.negnorm_nu,
        fits,
        predicted,
        weak_series,
        oracle,
        timings: Timings {
            setup_seconds,
            sampling_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
            per_level,
        },
    })
}

#[derive(Serialize)]
struct RatesRow<'a> {
    quantity: &'a str,
    slope: Option<f64>,
    intercept: Option<f64>,
    r_squared: Option<f64>,
    predicted_slope: Option<f64>,
    points_used: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_owned(),
        source,
    }
}

/// Paths of the files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub errors_csv: PathBuf,
    pub rates_csv: PathBuf,
    pub config_json: PathBuf,
    pub report_json: PathBuf,
    pub summary_txt: PathBuf,
}

/// Writes errors.csv, rates.csv, config.json, report.json and summary.txt
/// into `dir` (created if missing).
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = ReportFiles {
        errors_csv: dir.join("errors.csv"),
        rates_csv: dir.join("rates.csv"),
        config_json: dir.join("config.json"),
        report_json: dir.join("report.json"),
        summary_txt: dir.join("summary.txt"),
    };

    let f = fs::File::create(&files.errors_csv).map_err(io_err(&files.errors_csv))?;
    report
        .table
        .write_csv(f)
        .map_err(csv_err(&files.errors_csv))?;

    let f = fs::File::create(&files.rates_csv).map_err(io_err(&files.rates_csv))?;
    let mut w = csv::Writer::from_writer(f);
    for s in &report.fits {
        w.serialize(RatesRow {
            quantity: s.quantity.name(),
            slope: s.fit.as_ref().map(|f| f.slope),
            intercept: s.fit.as_ref().map(|f| f.intercept),
            r_squared: s.fit.as_ref().map(|f| f.r_squared),
            predicted_slope: s.predicted_slope,
            points_used: s.fit.as_ref().map_or(0, |f| f.used_rows.len()),
        })
        .map_err(csv_err(&files.rates_csv))?;
    }
    w.flush().map_err(io_err(&files.rates_csv))?;

    let write = |path: &Path, text: String| fs::write(path, text).map_err(io_err(path));
    write(
        &files.config_json,
        serde_json::to_string_pretty(&report.config)?,
    )?;
    write(&files.report_json, report.to_json()?)?;
    write(&files.summary_txt, summary(report))?;
    Ok(files)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"))
}

/// Plain-text summary: the error table and fitted vs predicted slopes.
pub fn summary(report: &ExperimentReport) -> String {
    use std::fmt::Write;
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(s, "experiment      {}", c.name);
    let _ = writeln!(
        s,
        "method          {}   drift {}   noise {}",
        c.method.name(),
        c.drift.name(),
        c.noise.map_or("none", |n| n.name())
    );
    let _ = writeln!(
        s,
        "reference       h = {:e}, dt = {:e}   samples {}   seed {}",
        c.reference.h, c.reference.dt, c.mc.n_samples, c.mc.master_seed
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:>5} {:>11} {:>11} {:>12} {:>11} {:>12} {:>11} {:>12} {:>5}",
        "level", "h", "dt", "strong", "se", "weak", "se", "negnorm", "floor"
    );
    for r in &report.table.rows {
        let _ = writeln!(
            s,
            "{:>5} {:>11.4e} {:>11.4e} {:>12.5e} {:>11.3e} {:>12.5e} {:>11.3e} {:>12} {:>5}",
            r.level,
            r.h,
            r.dt,
            r.strong_error,
            r.strong_se,
            r.weak_error,
            r.weak_se,
            r.negnorm_error
                .map_or_else(|| "-".into(), |v| format!("{v:.5e}")),
            if r.noise_floor_flag { "yes" } else { "no" }
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<9} {:>9} {:>9} {:>9} {:>7}",
        "quantity", "fitted", "predicted", "r^2", "points"
    );
    for f in &report.fits {
        match &f.fit {
            Some(fit) => {
                let _ = writeln!(
                    s,
                    "{:<9} {:>9.4} {:>9} {:>9.4} {:>7}",
                    f.quantity.name(),
                    fit.slope,
                    fmt_opt(f.predicted_slope),
                    fit.r_squared,
                    fit.used_rows.len()
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    "{:<9} {:>9} {:>9}   no fit: {}",
                    f.quantity.name(),
                    "-",
                    fmt_opt(f.predicted_slope),
                    f.failure.as_deref().unwrap_or("")
                );
            }
        }
    }
    if let Some(rows) = &report.oracle {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:>9} {:>11} {:>12} {:>11} {:>12} {:>11}",
            "level", "h", "vs oracle", "se", "vs ref", "se"
        );
        for r in rows {
            let _ = writeln!(
                s,
                "{:>9} {:>11.4e} {:>12.5e} {:>11.3e} {:>12} {:>11}",
                r.level,
                r.h,
                r.vs_oracle.value,
                r.vs_oracle.se,
                r.vs_reference
                    .map_or_else(|| "-".into(), |e| format!("{:.5e}", e.value)),
                r.vs_reference
                    .map_or_else(|| "-".into(), |e| format!("{:.3e}", e.se)),
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "wall clock      {:.2} s", report.timings.total_seconds);
    s
}

//! Error estimators, rate prediction and fitting, and an exact modal oracle
//! for the linear white-noise problem.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{prolong, FemFunction, FemOperators, Mesh1D, ModalProjector, SpectralBasis};
use crate::noise::CovarianceSpec;
use crate::scheme::{step_count, Drift, State};

/// Discrete energy `vᵀ M v + uᵀ K u`.
pub fn energy(state: &State, ops: &FemOperators) -> f64 {
    ops.mass().quad_form(&state.v) + ops.stiffness().quad_form(&state.u)
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

/// Sample mean and standard error of the mean (unbiased variance).
pub fn mean_and_se(samples: &[f64]) -> Result<Estimate> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Estimate {
        value: mean,
        se: (var / n).sqrt(),
    })
}

/// RMS estimate from per-sample squared errors; SE by the delta method
/// `se(√m) = se(m) / (2√m)`.
pub fn strong_from_squares(squares: &[f64]) -> Result<Estimate> {
    let m = mean_and_se(squares)?;
    let value = m.value.max(0.0).sqrt();
    let se = if value > 0.0 {
        m.se / (2.0 * value)
    } else {
        0.0
    };
    Ok(Estimate { value, se })
}

/// Signed weak estimate; `noise_floor` is set when `|value| ≤ 2·se`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakEstimate {
    pub value: f64,
    pub se: f64,
    pub noise_floor: bool,
}

pub fn weak_from_differences(diffs: &[f64]) -> Result<WeakEstimate> {
    let m = mean_and_se(diffs)?;
    Ok(WeakEstimate {
        value: m.value,
        se: m.se,
        noise_floor: m.value.abs() <= 2.0 * m.se,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorNorm {
    L2,
    /// Continuous `Ḣ^{-ν}` norm through the exact eigenbasis.
    NegativeSobolev {
        nu: f64,
        basis: SpectralBasis,
    },
}

fn difference_on(approx: &FemFunction, reference: &FemFunction, mesh: &Mesh1D) -> Result<Vec<f64>> {
    if reference.n_elements() != mesh.n_elements() {
        return Err(Error::invalid(
            "reference function is not on the reference mesh",
        ));
    }
    let a = prolong(approx, mesh)?;
    Ok(a.coeffs()
        .iter()
        .zip(reference.coeffs())
        .map(|(x, y)| x - y)
        .collect())
}

pub(crate) fn negative_norm_sq(
    projector: &ModalProjector,
    nu: f64,
    coeffs: &[f64],
    modal: &mut [f64],
) -> f64 {
    projector.coefficients_into(coeffs, modal);
    modal
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let lam = ((j + 1) as f64 * PI).powi(2);
            lam.powf(-nu) * a * a
        })
        .sum()
}

/// `(E_N ‖u − u_ref‖²)^{1/2}` over pairs of u-components; the approximation
/// is prolonged to the reference mesh before differencing.
pub fn strong_error_estimate(
    pairs: &[(FemFunction, FemFunction)],
    ref_ops: &FemOperators,
    norm: ErrorNorm,
) -> Result<Estimate> {
    if pairs.is_empty() {
        return Err(Error::invalid("no sample pairs"));
    }
    let mesh = ref_ops.mesh();
    let projector = match norm {
        ErrorNorm::L2 => None,
        ErrorNorm::NegativeSobolev { nu, basis } => {
            if !(0.0..=1.0).contains(&nu) {
                return Err(Error::UnsupportedExponent(-nu));
            }
            Some((nu, ModalProjector::new(mesh.n_elements(), basis)))
        }
    };
    let mut modal = vec![0.0; projector.as_ref().map_or(0, |(_, p)| p.modes())];
    let squares = pairs
        .iter()
        .map(|(a, r)| {
            let d = difference_on(a, r, mesh)?;
            Ok(match &projector {
                None => ref_ops.mass().quad_form(&d),
                Some((nu, p)) => negative_norm_sq(p, *nu, &d, &mut modal),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    strong_from_squares(&squares)
}

/// Smooth test functional of the u-component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `φ(u) = ‖u‖²_{L²}`
    SquaredL2Norm,
    /// `φ(u) = ⟨u, w⟩`
    LinearFunctional { weight: FemFunction },
}

impl TestFunction {
    pub fn evaluate(&self, u: &FemFunction, ops: &FemOperators) -> Result<f64> {
        if u.n_elements() != ops.mesh().n_elements() {
            return Err(Error::invalid(
                "function and operators live on different meshes",
            ));
        }
        match self {
            TestFunction::SquaredL2Norm => Ok(ops.mass().quad_form(u.coeffs())),
            TestFunction::LinearFunctional { weight } => {
                if weight.n_elements() != u.n_elements() {
                    return Err(Error::invalid("weight lives on a different mesh"));
                }
                Ok(ops.mass().bilinear(u.coeffs(), weight.coeffs()))
            }
        }
    }

    /// `φ'(u)` as a load vector.
    pub fn derivative_load(&self, u: &FemFunction, ops: &FemOperators) -> Vec<f64> {
        match self {
            TestFunction::SquaredL2Norm => ops
                .mass()
                .mul_vec(u.coeffs())
                .iter()
                .map(|x| 2.0 * x)
                .collect(),
            TestFunction::LinearFunctional { weight } => ops.mass().mul_vec(weight.coeffs()),
        }
    }

    /// Whether `φ''` commutes with `Λ^{-1/2}` (true for both variants: the
    /// second derivative is `2I` or `0`).
    pub fn second_derivative_commutes(&self) -> bool {
        true
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::SquaredL2Norm => "squared_l2_norm",
            TestFunction::LinearFunctional { .. } => "linear_functional",
        }
    }
}

/// `E_N[φ(u) − φ(u_ref)]` with both functions mapped to the reference mesh.
pub fn weak_error_estimate(
    pairs: &[(FemFunction, FemFunction)],
    ref_ops: &FemOperators,
    phi: &TestFunction,
) -> Result<WeakEstimate> {
    if pairs.is_empty() {
        return Err(Error::invalid("no sample pairs"));
    }
    let mesh = ref_ops.mesh();
    let diffs = pairs
        .iter()
        .map(|(a, r)| {
            let a = prolong(a, mesh)?;
            Ok(phi.evaluate(&a, ref_ops)? - phi.evaluate(r, ref_ops)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    weak_from_differences(&diffs)
}

/// Regularity parameters feeding the predicted convergence bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityParams {
    pub beta: f64,
    pub delta: f64,
    pub theta: f64,
    #[serde(with = "crate::serde_ext::extended_f64")]
    pub eta: f64,
    pub nu: f64,
    pub mu: f64,
    pub kappa: u32,
    pub rho: u32,
}

const PARAM_TOL: f64 = 1e-12;

impl RegularityParams {
    /// White-noise setting in the ε → 0 limit.
    pub fn white_noise_1d() -> Self {
        RegularityParams {
            beta: 0.5,
            delta: 1.0,
            theta: 0.4,
            eta: f64::INFINITY,
            nu: 0.5,
            mu: 0.5,
            kappa: 2,
            rho: 2,
        }
    }

    /// Trace-class setting in the ε → 0 limit.
    pub fn trace_class_1d() -> Self {
        RegularityParams {
            beta: 1.0,
            delta: 2.0,
            theta: 1.0,
            eta: f64::INFINITY,
            nu: 1.0,
            mu: 1.0,
            kappa: 2,
            rho: 2,
        }
    }

    /// `r = min(β, δ, 1 + θ)`
    pub fn r(&self) -> f64 {
        self.beta.min(self.delta).min(1.0 + self.theta)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |what: String| Err(Error::invalid(what));
        for (name, v) in [
            ("beta", self.beta),
            ("delta", self.delta),
            ("theta", self.theta),
            ("nu", self.nu),
            ("mu", self.mu),
        ] {
            if !v.is_finite() {
                return fail(format!("{name} must be finite, got {v}"));
            }
        }
        if self.beta < 0.0 || self.delta < 0.0 {
            return fail(format!(
                "beta, delta >= 0 violated (beta {}, delta {})",
                self.beta, self.delta
            ));
        }
        if !(self.eta >= 0.0) {
            return fail(format!("eta >= 0 violated (eta {})", self.eta));
        }
        let theta_max = self.beta.min(self.delta).min(1.0);
        if self.theta > theta_max + PARAM_TOL {
            return fail(format!(
                "theta <= min(beta, delta, 1) violated ({} > {theta_max})",
                self.theta
            ));
        }
        if self.mu < -PARAM_TOL || self.mu > 2.0 + PARAM_TOL {
            return fail(format!("mu in [0, 2] violated (mu {})", self.mu));
        }
        let nu_lo = (self.mu - 1.0).max(0.0);
        let nu_hi = self.r().min(1.0);
        if self.nu < nu_lo - PARAM_TOL || self.nu > nu_hi + PARAM_TOL {
            return fail(format!(
                "nu in [max(mu - 1, 0), min(r, 1)] = [{nu_lo}, {nu_hi}] violated (nu {})",
                self.nu
            ));
        }
        if !matches!(self.kappa, 2 | 3) {
            return fail(format!("kappa in {{2, 3}} violated (kappa {})", self.kappa));
        }
        if !matches!(self.rho, 1 | 2) {
            return fail(format!("rho in {{1, 2}} violated (rho {})", self.rho));
        }
        Ok(())
    }
}

/// Exponents of `h` and `Δt` in the strong, negative-norm and weak bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePrediction {
    pub r: f64,
    pub r_prime_strong: f64,
    pub r_prime_weak: f64,
    pub strong_h_exp: f64,
    pub strong_dt_exp: f64,
    pub negnorm_h_exp: f64,
    pub negnorm_dt_exp: f64,
    pub weak_h_exp: f64,
    pub weak_dt_exp: f64,
    /// `1 − μ` when `μ > 1` (multiplies the Δt term of the weak bound), else 0.
    pub h_penalty_exp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorColumn {
    Strong,
    Weak,
    Negnorm,
}

impl ErrorColumn {
    pub fn name(self) -> &'static str {
        match self {
            ErrorColumn::Strong => "strong",
            ErrorColumn::Weak => "weak",
            ErrorColumn::Negnorm => "negnorm",
        }
    }
}

impl RatePrediction {
    /// Expected slope against `h` when `Δt = h^{dt_power}`.
    pub fn slope_vs_h(&self, column: ErrorColumn, dt_power: f64) -> f64 {
        match column {
            ErrorColumn::Strong => self.strong_h_exp.min(dt_power * self.strong_dt_exp),
            ErrorColumn::Negnorm => self.negnorm_h_exp.min(dt_power * self.negnorm_dt_exp),
            ErrorColumn::Weak => self
                .weak_h_exp
                .min(self.h_penalty_exp + dt_power * self.weak_dt_exp),
        }
    }
}

pub fn predict_rates(params: &RegularityParams) -> Result<RatePrediction> {
    params.validate()?;
    let p = params;
    let space = p.kappa as f64 / (p.kappa as f64 + 1.0);
    let time = p.rho as f64 / (p.rho as f64 + 1.0);
    let dt_exp = |r: f64| (r * time).min(p.eta).min(1.0);
    let r = p.r();
    let two_nu = 2.0 * p.nu;
    let r_prime_strong = two_nu
        .max(p.beta)
        .min(two_nu.max(1.0 + p.theta))
        .min(p.delta);
    let r_prime_weak = two_nu.max(p.beta).min(1.0 + p.theta).min(p.delta);
    let h_penalty_exp = if p.mu > 1.0 { 1.0 - p.mu } else { 0.0 };
    Ok(RatePrediction {
        r,
        r_prime_strong,
        r_prime_weak,
        strong_h_exp: r * space,
        strong_dt_exp: dt_exp(r),
        negnorm_h_exp: r_prime_strong * space,
        negnorm_dt_exp: dt_exp(r_prime_strong),
        weak_h_exp: r_prime_weak * space + h_penalty_exp,
        weak_dt_exp: dt_exp(r_prime_weak),
        h_penalty_exp,
    })
}

/// One row of errors.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub level: usize,
    pub h: f64,
    pub dt: f64,
    pub n_samples: usize,
    pub strong_error: f64,
    pub strong_se: f64,
    /// Signed Monte Carlo estimate; `|·|` is taken at fit time.
    pub weak_error: f64,
    pub weak_se: f64,
    pub negnorm_error: Option<f64>,
    pub negnorm_se: Option<f64>,
    pub noise_floor_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        // header is emitted with the first row; keep it for empty tables too
        if self.rows.is_empty() {
            w.write_record(ERRORS_CSV_HEADER)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> std::result::Result<Self, csv::Error> {
        let mut r = csv::Reader::from_reader(reader);
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ErrorRow>, _>>()?;
        Ok(ErrorTable { rows })
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::read_csv(file).map_err(|source| Error::Csv {
            path: path.to_owned(),
            source,
        })
    }

    fn value(row: &ErrorRow, column: ErrorColumn) -> Option<f64> {
        match column {
            ErrorColumn::Strong => Some(row.strong_error),
            ErrorColumn::Weak => (!row.noise_floor_flag).then_some(row.weak_error.abs()),
            ErrorColumn::Negnorm => row.negnorm_error,
        }
        .filter(|v| v.is_finite() && *v > 0.0)
        .filter(|_| row.h > 0.0)
    }
}

pub const ERRORS_CSV_HEADER: [&str; 11] = [
    "level",
    "h",
    "dt",
    "n_samples",
    "strong_error",
    "strong_se",
    "weak_error",
    "weak_se",
    "negnorm_error",
    "negnorm_se",
    "noise_floor_flag",
];

/// Least-squares fit of `log₂ error = intercept + slope · log₂ h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub quantity: ErrorColumn,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub used_rows: Vec<usize>,
    pub excluded_rows: Vec<usize>,
}

/// Weak fits skip noise-floor rows; every fit skips rows without a positive
/// finite error.
pub fn fit_rates(table: &ErrorTable, column: ErrorColumn) -> Result<RateFit> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    for (i, row) in table.rows.iter().enumerate() {
        match ErrorTable::value(row, column) {
            Some(v) => {
                xs.push(row.h.log2());
                ys.push(v.log2());
                used.push(i);
            }
            None => excluded.push(i),
        }
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData {
            usable: xs.len(),
            required: 3,
            flagged: excluded,
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("all usable rows share the same h"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    Ok(RateFit {
        quantity: column,
        slope,
        intercept,
        r_squared,
        residuals,
        used_rows: used,
        excluded_rows: excluded,
    })
}

/// Modal amplitudes `(u_j, v_j)_{j ≤ J}` of an exact solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub time: f64,
}

impl ModalState {
    pub fn zeros(modes: usize) -> Self {
        ModalState {
            u: vec![0.0; modes],
            v: vec![0.0; modes],
            time: 0.0,
        }
    }

    pub fn modes(&self) -> usize {
        self.u.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct ModeUpdate {
    cos: f64,
    sin_over_omega: f64,
    omega_sin: f64,
    // lower Cholesky factor of Cov(Δβ, ∫ sin(ω(dt−s))/ω dβ, ∫ cos(ω(dt−s)) dβ)
    chol: [[f64; 3]; 3],
}

/// Exact one-step law of the truncated linear white-noise problem
/// `du_j = v_j dt`, `dv_j = −λ_j u_j dt + dβ_j`, `j ≤ J`.
///
/// Each step draws the Brownian increment `Δβ_j` jointly with the two
/// stochastic-convolution increments, so FEM paths can be driven by the same
/// Wiener path through the loads `⟨ΔW, φ_i⟩ = Σ_j Δβ_j ⟨e_j, φ_i⟩`.
#[derive(Debug, Clone)]
pub struct ModalOracle {
    dt: f64,
    modes: Vec<ModeUpdate>,
    projector: Option<ModalProjector>,
}

fn cholesky3(c: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let mut s = c[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                l[i][i] = s.max(0.0).sqrt();
            } else {
                l[i][j] = if l[j][j] > 0.0 { s / l[j][j] } else { 0.0 };
            }
        }
    }
    l
}

impl ModalOracle {
    /// `load_mesh` selects the mesh on which FEM loads are emitted.
    pub fn new(basis: SpectralBasis, dt: f64, load_mesh: Option<&Mesh1D>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!(
                "time step must be positive, got {dt}"
            )));
        }
        let modes = (1..=basis.modes())
            .map(|j| {
                let w = j as f64 * PI;
                let x = w * dt;
                let (s, c) = x.sin_cos();
                let s2 = (2.0 * x).sin();
                let c00 = dt;
                let c0u = (1.0 - c) / (w * w);
                let c0v = s / w;
                let cuu = (dt / 2.0 - s2 / (4.0 * w)) / (w * w);
                let cvv = dt / 2.0 + s2 / (4.0 * w);
                let cuv = s * s / (2.0 * w * w);
                ModeUpdate {
                    cos: c,
                    sin_over_omega: s / w,
                    omega_sin: w * s,
                    chol: cholesky3([[c00, c0u, c0v], [c0u, cuu, cuv], [c0v, cuv, cvv]]),
                }
            })
            .collect();
        Ok(ModalOracle {
            dt,
            modes,
            projector: load_mesh.map(|m| ModalProjector::new(m.n_elements(), basis)),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn modes(&self) -> usize {
        self.modes.len()
    }

    pub fn load_dof(&self) -> Option<usize> {
        self.projector.as_ref().map(|p| p.n_elements() - 1)
    }

    /// Advances `state` by one step; writes the FEM loads of the Brownian
    /// increment into `loads` when a load mesh was configured.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut ModalState,
        rng: &mut R,
        increments: &mut [f64],
        loads: Option<&mut [f64]>,
    ) {
        for (j, m) in self.modes.iter().enumerate() {
            let z: [f64; 3] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let l = &m.chol;
            let db = l[0][0] * z[0];
            let iu = l[1][0] * z[0] + l[1][1] * z[1];
            let iv = l[2][0] * z[0] + l[2][1] * z[1] + l[2][2] * z[2];
            let (u, v) = (state.u[j], state.v[j]);
            state.u[j] = m.cos * u + m.sin_over_omega * v + iu;
            state.v[j] = -m.omega_sin * u + m.cos * v + iv;
            increments[j] = db;
        }
        state.time += self.dt;
        if let (Some(p), Some(out)) = (&self.projector, loads) {
            p.synthesize_load_into(increments, out);
        }
    }

    /// Deterministic update only (the mean of the step).
    pub fn propagate(&self, state: &mut ModalState) {
        for (j, m) in self.modes.iter().enumerate() {
            let (u, v) = (state.u[j], state.v[j]);
            state.u[j] = m.cos * u + m.sin_over_omega * v;
            state.v[j] = -m.omega_sin * u + m.cos * v;
        }
        state.time += self.dt;
    }
}

/// Runs the oracle over `[0, t_final]` and returns the final modal state and
/// the per-step FEM loads on `load_mesh`.
#[allow(clippy::too_many_arguments)]
pub fn modal_oracle_path<R: Rng + ?Sized>(
    basis: SpectralBasis,
    dt: f64,
    t_final: f64,
    covariance: CovarianceSpec,
    drift: Option<&Drift>,
    initial: ModalState,
    load_mesh: &Mesh1D,
    rng: &mut R,
) -> Result<(ModalState, Vec<Vec<f64>>)> {
    if covariance != CovarianceSpec::White {
        return Err(Error::UnsupportedConfiguration(
            "the modal oracle supports white noise only".into(),
        ));
    }
    if drift.is_some_and(|d| !d.is_zero()) {
        return Err(Error::UnsupportedConfiguration(
            "the modal oracle requires a zero drift".into(),
        ));
    }
    if initial.modes() != basis.modes() {
        return Err(Error::invalid(
            "initial modal state has the wrong number of modes",
        ));
    }
    let n = step_count(t_final, dt)?;
    let oracle = ModalOracle::new(basis, dt, Some(load_mesh))?;
    let mut state = initial;
    let mut increments = vec![0.0; basis.modes()];
    let mut loads = Vec::with_capacity(n);
    for _ in 0..n {
        let mut load = vec![0.0; load_mesh.interior_dof()];
        oracle.step(&mut state, rng, &mut increments, Some(&mut load));
        loads.push(load);
    }
    Ok((state, loads))
}

/// `‖u_h − Σ_j u_j e_j‖²_{L²}`, exact given the modal pairings of `u_h`.
pub fn squared_distance_to_modal(
    u: &[f64],
    ops: &FemOperators,
    projector: &ModalProjector,
    oracle: &ModalState,
    scratch: &mut [f64],
) -> f64 {
    projector.coefficients_into(u, scratch);
    let cross: f64 = scratch.iter().zip(&oracle.u).map(|(a, b)| a * b).sum();
    let oracle_sq: f64 = oracle.u.iter().map(|b| b * b).sum();
    (ops.mass().quad_form(u) - 2.0 * cross + oracle_sq).max(0.0)
}

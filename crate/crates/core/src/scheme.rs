//! Rational time stepping for the P1 wave system.
//!
//! With `X = [u, v]ᵀ` and `A_h = [[0, -I], [Λ_h, 0]]`, one step is
//!
//! ```text
//! X^j = R(Δt A_h) (X^{j-1} + B (Δt F(u^{j-1}) + ΔW^j)),   B = [0, I]ᵀ
//! ```
//!
//! where drift and noise enter as load vectors added to `M v`. For both
//! supported `R` the Schur complement of the block solve is
//! `S = M + c² Δt² K` (`c = 1` backward Euler, `c = 1/2` Crank–Nicolson), so
//! a step costs one solve with `S` and one with `M`, both tridiagonal.

use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::fem::{
    assemble_load_into, assemble_operators, element_values, prolongation_matrix, FemFunction,
    FemOperators, Mesh1D, GAUSS3,
};
use crate::linalg::{CsrMatrix, TridiagCholesky};
use crate::noise::{restrict_load, LoadBuffer, NoiseFactor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationalMethod {
    /// `R(z) = 1 / (1 + z)`
    BackwardEuler,
    /// `R(z) = (1 - z/2) / (1 + z/2)`
    CrankNicolson,
}

impl RationalMethod {
    pub fn order(self) -> u32 {
        match self {
            RationalMethod::BackwardEuler => 1,
            RationalMethod::CrankNicolson => 2,
        }
    }

    pub fn eval(self, z: Complex64) -> Complex64 {
        let one = Complex64::new(1.0, 0.0);
        match self {
            RationalMethod::BackwardEuler => one / (one + z),
            RationalMethod::CrankNicolson => (one - z * 0.5) / (one + z * 0.5),
        }
    }

    /// Coefficient `c` in the Schur complement `M + c² Δt² K`.
    fn schur_coefficient(self) -> f64 {
        match self {
            RationalMethod::BackwardEuler => 1.0,
            RationalMethod::CrankNicolson => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RationalMethod::BackwardEuler => "backward_euler",
            RationalMethod::CrankNicolson => "crank_nicolson",
        }
    }
}

/// Scalar nonlinearity `f` of the Nemytskij drift `F(u)(x) = f(u(x))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "f", rename_all = "snake_case")]
pub enum Drift {
    Zero,
    Cos,
    Sin,
    Linear { coeff: f64 },
}

impl Drift {
    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            Drift::Zero => 0.0,
            Drift::Cos => x.cos(),
            Drift::Sin => x.sin(),
            Drift::Linear { coeff } => coeff * x,
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Drift::Zero => 0.0,
            Drift::Cos => -x.sin(),
            Drift::Sin => x.cos(),
            Drift::Linear { coeff } => coeff,
        }
    }

    pub fn lipschitz_const(&self) -> f64 {
        match *self {
            Drift::Zero => 0.0,
            Drift::Cos | Drift::Sin => 1.0,
            Drift::Linear { coeff } => coeff.abs(),
        }
    }

    /// Bound on `|f''|`, when one exists.
    pub fn second_derivative_bound(&self) -> Option<f64> {
        match self {
            Drift::Zero | Drift::Linear { .. } => Some(0.0),
            Drift::Cos | Drift::Sin => Some(1.0),
        }
    }

    pub fn vanishes_at_zero(&self) -> bool {
        self.value(0.0) == 0.0
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Drift::Zero) || matches!(self, Drift::Linear { coeff } if *coeff == 0.0)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Drift::Zero => "zero",
            Drift::Cos => "cos",
            Drift::Sin => "sin",
            Drift::Linear { .. } => "linear",
        }
    }
}

/// How the drift load `∫ f(u_h) φ_i` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftQuadrature {
    /// 3-point Gauss per element with `u_h` evaluated exactly.
    #[default]
    Gauss3,
    /// `M (f(u_i))_i`: load of the nodal interpolant of `f(u_h)`. Faster,
    /// not L²-consistent; never used by the experiments.
    NodalInterpolation,
}

pub fn drift_load(drift: &Drift, u: &FemFunction, ops: &FemOperators) -> Result<Vec<f64>> {
    if u.n_elements() != ops.mesh().n_elements() {
        return Err(Error::invalid(
            "function and operators live on different meshes",
        ));
    }
    let mut out = vec![0.0; ops.dof()];
    drift_load_into(drift, u.coeffs(), ops, DriftQuadrature::Gauss3, &mut out)?;
    Ok(out)
}

pub(crate) fn drift_load_into(
    drift: &Drift,
    coeffs: &[f64],
    ops: &FemOperators,
    quadrature: DriftQuadrature,
    out: &mut [f64],
) -> Result<()> {
    match quadrature {
        DriftQuadrature::Gauss3 => assemble_load_into(
            ops.mesh(),
            GAUSS3,
            &mut |e, xi, _x| {
                let (l, r) = element_values(coeffs, e);
                drift.value(l * (1.0 - xi) + r * xi)
            },
            out,
        ),
        DriftQuadrature::NodalInterpolation => {
            let nodal: Vec<f64> = coeffs.iter().map(|&c| drift.value(c)).collect();
            check_finite(&nodal, "nodal drift values")?;
            ops.mass().mul_vec_into(&nodal, out);
            // f(0) at the boundary nodes contributes through the boundary hats
            let f0 = drift.value(0.0);
            if f0 != 0.0 {
                let h = ops.mesh().h();
                let last = out.len() - 1;
                out[0] += f0 * h / 6.0;
                out[last] += f0 * h / 6.0;
            }
            Ok(())
        }
    }
}

/// FEM state `(u, v)` at time `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub time: f64,
}

impl State {
    pub fn zeros(dof: usize) -> Self {
        State {
            u: vec![0.0; dof],
            v: vec![0.0; dof],
            time: 0.0,
        }
    }

    pub fn from_functions(u: &FemFunction, v: &FemFunction) -> Result<Self> {
        if u.n_elements() != v.n_elements() {
            return Err(Error::invalid("u and v live on different meshes"));
        }
        Ok(State {
            u: u.coeffs().to_vec(),
            v: v.coeffs().to_vec(),
            time: 0.0,
        })
    }

    pub fn dof(&self) -> usize {
        self.u.len()
    }

    pub fn u_function(&self) -> FemFunction {
        let mesh = crate::fem::build_uniform_mesh(self.u.len() + 1).expect("dof ≥ 1");
        FemFunction::new(&mesh, self.u.clone()).expect("matching length")
    }
}

/// Scratch vectors reused across steps.
#[derive(Debug, Clone)]
pub struct StepScratch {
    load: Vec<f64>,
    rhs: Vec<f64>,
    tmp: Vec<f64>,
}

impl StepScratch {
    pub fn new(dof: usize) -> Self {
        StepScratch {
            load: vec![0.0; dof],
            rhs: vec![0.0; dof],
            tmp: vec![0.0; dof],
        }
    }
}

/// One-step map `R(Δt A_h)` for a fixed mesh and step size.
#[derive(Debug, Clone)]
pub struct Stepper {
    method: RationalMethod,
    dt: f64,
    ops: Arc<FemOperators>,
    schur: TridiagCholesky,
    quadrature: DriftQuadrature,
}

pub fn build_stepper(method: RationalMethod, ops: Arc<FemOperators>, dt: f64) -> Result<Stepper> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let c = method.schur_coefficient() * dt;
    let s = ops.mass().linear_combination(1.0, ops.stiffness(), c * c);
    let schur = s.cholesky()?;
    Ok(Stepper {
        method,
        dt,
        ops,
        schur,
        quadrature: DriftQuadrature::Gauss3,
    })
}

impl Stepper {
    pub fn with_drift_quadrature(mut self, quadrature: DriftQuadrature) -> Self {
        self.quadrature = quadrature;
        self
    }

    pub fn method(&self) -> RationalMethod {
        self.method
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn ops(&self) -> &Arc<FemOperators> {
        &self.ops
    }

    pub fn dof(&self) -> usize {
        self.ops.dof()
    }

    /// Advances `state` by one step. `noise_load` is `(⟨ΔW, φ_i⟩)_i` for this
    /// step.
    pub fn step_in_place(
        &self,
        drift: Option<&Drift>,
        noise_load: Option<&[f64]>,
        state: &mut State,
        scratch: &mut StepScratch,
    ) -> Result<()> {
        let dof = self.dof();
        if state.u.len() != dof || state.v.len() != dof {
            return Err(Error::invalid(format!(
                "state has {} dof, stepper expects {dof}",
                state.u.len()
            )));
        }
        let dt = self.dt;
        let mass = self.ops.mass();
        let stiff = self.ops.stiffness();

        // load = Δt F(u) + ΔW, both in load space
        let load = &mut scratch.load;
        let mut has_load = false;
        match drift {
            Some(d) if !d.is_zero() => {
                drift_load_into(d, &state.u, &self.ops, self.quadrature, load)?;
                load.iter_mut().for_each(|b| *b *= dt);
                has_load = true;
            }
            _ => load.iter_mut().for_each(|b| *b = 0.0),
        }
        if let Some(noise) = noise_load {
            if noise.len() != dof {
                return Err(Error::invalid(
                    "noise load length does not match the stepper",
                ));
            }
            load.iter_mut().zip(noise).for_each(|(b, w)| *b += w);
            has_load = true;
        }

        // M b = M v + load
        let mb = &mut scratch.tmp;
        mass.mul_vec_into(&state.v, mb);
        if has_load {
            mb.iter_mut().zip(load.iter()).for_each(|(m, l)| *m += l);
        }

        let rhs = &mut scratch.rhs;
        mass.mul_vec_into(&state.u, rhs);
        match self.method {
            RationalMethod::BackwardEuler => {
                // (M + Δt² K) u' = M a + Δt M b;  v' = M⁻¹(M b - Δt K u')
                rhs.iter_mut()
                    .zip(mb.iter())
                    .for_each(|(r, m)| *r += dt * m);
                self.schur.solve_in_place(rhs);
                stiff.mul_add_into(-dt, rhs, mb);
            }
            RationalMethod::CrankNicolson => {
                // (M + Δt²/4 K) u' = M a + Δt M b - Δt²/4 K a
                // v' = M⁻¹(M b - Δt/2 K (a + u'))
                rhs.iter_mut()
                    .zip(mb.iter())
                    .for_each(|(r, m)| *r += dt * m);
                stiff.mul_add_into(-0.25 * dt * dt, &state.u, rhs);
                self.schur.solve_in_place(rhs);
                state
                    .u
                    .iter_mut()
                    .zip(rhs.iter())
                    .for_each(|(a, un)| *a += un);
                stiff.mul_add_into(-0.5 * dt, &state.u, mb);
            }
        }
        self.ops.mass_factor().solve_in_place(mb);
        std::mem::swap(&mut state.u, rhs);
        std::mem::swap(&mut state.v, mb);
        state.time += dt;
        check_finite(&state.u, "state u")?;
        check_finite(&state.v, "state v")?;
        Ok(())
    }

    pub fn step(
        &self,
        drift: Option<&Drift>,
        noise_load: Option<&[f64]>,
        state: &State,
    ) -> Result<State> {
        let mut next = state.clone();
        let mut scratch = StepScratch::new(self.dof());
        self.step_in_place(drift, noise_load, &mut next, &mut scratch)?;
        Ok(next)
    }

    /// `vᵀ M v + uᵀ K u`
    pub fn energy(&self, state: &State) -> f64 {
        self.ops.mass().quad_form(&state.v) + self.ops.stiffness().quad_form(&state.u)
    }
}

/// Number of steps of size `dt` in `[0, t_final]`; errors unless integral.
pub fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final > 0.0) || !(dt > 0.0) {
        return Err(Error::invalid(format!(
            "final time and step must be positive (T = {t_final}, dt = {dt})"
        )));
    }
    let ratio = t_final / dt;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * n {
        return Err(Error::invalid(format!(
            "T / dt = {ratio} is not an integer (T = {t_final}, dt = {dt})"
        )));
    }
    Ok(n as usize)
}

/// Where a path gets its per-step noise loads from.
pub enum PathNoise<'a, R: Rng + ?Sized> {
    None,
    Sampled {
        factor: &'a NoiseFactor,
        rng: &'a mut R,
    },
    Loads(&'a [Vec<f64>]),
}

/// Runs `step_count(t_final, dt)` steps from `initial`. `on_snapshot` is
/// called with the state at each requested time (the initial state included
/// when 0 is requested).
pub fn run_path<R: Rng + ?Sized>(
    stepper: &Stepper,
    drift: Option<&Drift>,
    initial: State,
    t_final: f64,
    noise: PathNoise<'_, R>,
    snapshot_times: &[f64],
    mut on_snapshot: impl FnMut(&State),
) -> Result<State> {
    let n_steps = step_count(t_final, stepper.dt())?;
    let dt = stepper.dt();
    let mut snapshot_steps = Vec::with_capacity(snapshot_times.len());
    for &t in snapshot_times {
        let k = (t / dt).round();
        if !(0.0..=n_steps as f64).contains(&k) || (t / dt - k).abs() > 1e-9 * k.max(1.0) {
            return Err(Error::invalid(format!(
                "snapshot time {t} is not on the time grid"
            )));
        }
        snapshot_steps.push(k as usize);
    }
    let mut state = initial;
    let t0 = state.time;
    let mut scratch = StepScratch::new(stepper.dof());
    let mut z = vec![0.0; stepper.dof()];
    let mut sampled = vec![0.0; stepper.dof()];
    if snapshot_steps.contains(&0) {
        on_snapshot(&state);
    }
    let mut noise = noise;
    for j in 1..=n_steps {
        let load: Option<&[f64]> = match &mut noise {
            PathNoise::None => None,
            PathNoise::Sampled { factor, rng } => {
                factor.sample_load_increment_into(dt, *rng, &mut z, &mut sampled)?;
                Some(&sampled)
            }
            PathNoise::Loads(loads) => {
                let l = loads.get(j - 1).ok_or_else(|| {
                    Error::invalid(format!(
                        "{} loads supplied for {n_steps} steps",
                        loads.len()
                    ))
                })?;
                Some(l.as_slice())
            }
        };
        stepper.step_in_place(drift, load, &mut state, &mut scratch)?;
        // keep grid times exact
        state.time = t0 + j as f64 * dt;
        if snapshot_steps.contains(&j) {
            on_snapshot(&state);
        }
    }
    Ok(state)
}

/// Mesh width and time step of one discretization level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub h: f64,
    pub dt: f64,
}

impl LevelSpec {
    pub fn new(h: f64, dt: f64) -> Self {
        LevelSpec { h, dt }
    }
}

/// A coarse level driven by restricted reference noise.
#[derive(Debug, Clone)]
struct CoupledLevel {
    stepper: Stepper,
    prolongation: CsrMatrix,
    step_ratio: usize,
    initial: State,
}

/// A reference discretization and coarser nested levels sharing one Wiener
/// path: reference loads are generated once per reference step and each
/// coarse level consumes `Pᵀ` of their sums over its own step.
#[derive(Debug, Clone)]
pub struct CoupledPaths {
    reference: Stepper,
    reference_initial: State,
    levels: Vec<CoupledLevel>,
    drift: Option<Drift>,
    n_steps: usize,
}

/// Per-level final states; index 0 is the reference.
pub type CoupledStates = Vec<State>;

impl CoupledPaths {
    /// `initial` maps operators to the projected initial state on that mesh.
    pub fn new(
        method: RationalMethod,
        reference: LevelSpec,
        levels: &[LevelSpec],
        t_final: f64,
        drift: Option<Drift>,
        mut initial: impl FnMut(&FemOperators) -> Result<State>,
    ) -> Result<CoupledPaths> {
        let ref_mesh = Mesh1D::from_width(reference.h)?;
        let ref_ops = Arc::new(assemble_operators(&ref_mesh)?);
        let ref_stepper = build_stepper(method, ref_ops.clone(), reference.dt)?;
        let n_steps = step_count(t_final, reference.dt)?;
        let reference_initial = initial(&ref_ops)?;
        let mut out = Vec::with_capacity(levels.len());
        for (idx, level) in levels.iter().enumerate() {
            let mesh = Mesh1D::from_width(level.h)?;
            let prolongation = prolongation_matrix(&mesh, &ref_mesh).map_err(|e| {
                Error::invalid(format!(
                    "level {idx} (h = {}) is not nested in the reference: {e}",
                    level.h
                ))
            })?;
            let ratio = level.dt / reference.dt;
            let step_ratio = ratio.round();
            if step_ratio < 1.0 || (ratio - step_ratio).abs() > 1e-9 * step_ratio {
                return Err(Error::invalid(format!(
                    "level {idx}: dt = {} is not an integer multiple of the reference dt = {}",
                    level.dt, reference.dt
                )));
            }
            step_count(t_final, level.dt)?;
            let ops = Arc::new(assemble_operators(&mesh)?);
            let stepper = build_stepper(method, ops.clone(), level.dt)?;
            let initial = initial(&ops)?;
            out.push(CoupledLevel {
                stepper,
                prolongation,
                step_ratio: step_ratio as usize,
                initial,
            });
        }
        Ok(CoupledPaths {
            reference: ref_stepper,
            reference_initial,
            levels: out,
            drift,
            n_steps,
        })
    }

    pub fn reference(&self) -> &Stepper {
        &self.reference
    }

    pub fn level_stepper(&self, idx: usize) -> &Stepper {
        &self.levels[idx].stepper
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn reference_steps(&self) -> usize {
        self.n_steps
    }

    pub fn level_prolongation(&self, idx: usize) -> &CsrMatrix {
        &self.levels[idx].prolongation
    }

    /// Runs all levels. `next_load` fills the reference load for each
    /// reference step (`None` source means a noise-free run).
    pub fn run(
        &self,
        next_load: Option<&mut dyn FnMut(&mut [f64]) -> Result<()>>,
    ) -> std::result::Result<CoupledStates, (usize, Error)> {
        self.run_timed(next_load, None)
    }

    /// As [`run`](Self::run), accumulating wall-clock time per level tag
    /// (0 = reference including noise generation) into `timings`.
    pub fn run_timed(
        &self,
        mut next_load: Option<&mut dyn FnMut(&mut [f64]) -> Result<()>>,
        mut timings: Option<&mut [Duration]>,
    ) -> std::result::Result<CoupledStates, (usize, Error)> {
        if let Some(t) = timings.as_deref() {
            assert_eq!(t.len(), self.levels.len() + 1, "one timing slot per level");
        }
        let ref_dof = self.reference.dof();
        let drift = self.drift.as_ref();
        let mut ref_state = self.reference_initial.clone();
        let mut ref_scratch = StepScratch::new(ref_dof);
        let mut states: Vec<State> = self.levels.iter().map(|l| l.initial.clone()).collect();
        let mut scratches: Vec<StepScratch> = self
            .levels
            .iter()
            .map(|l| StepScratch::new(l.stepper.dof()))
            .collect();
        let mut buffers: Vec<LoadBuffer> = self
            .levels
            .iter()
            .map(|l| LoadBuffer::new(ref_dof, l.stepper.dof()))
            .collect();
        let mut load = vec![0.0; ref_dof];
        // level tag: 0 = reference, k = coarse level k - 1
        for _ in 0..self.n_steps {
            let clock = timings.is_some().then(Instant::now);
            let noisy = match next_load.as_mut() {
                Some(f) => {
                    f(&mut load).map_err(|e| (0, e))?;
                    true
                }
                None => false,
            };
            let ref_load = noisy.then_some(load.as_slice());
            self.reference
                .step_in_place(drift, ref_load, &mut ref_state, &mut ref_scratch)
                .map_err(|e| (0, e))?;
            let mut clock = clock.map(|start| {
                let now = Instant::now();
                if let Some(t) = timings.as_deref_mut() {
                    t[0] += now - start;
                }
                now
            });
            for (k, level) in self.levels.iter().enumerate() {
                let coarse_load = if noisy {
                    match restrict_load(
                        &load,
                        &level.prolongation,
                        level.step_ratio,
                        &mut buffers[k],
                    )
                    .map_err(|e| (k + 1, e))?
                    {
                        Some(c) => Some(c),
                        None => continue,
                    }
                } else {
                    buffers[k].count_step(level.step_ratio);
                    if buffers[k].pending() != 0 {
                        continue;
                    }
                    None
                };
                level
                    .stepper
                    .step_in_place(drift, coarse_load, &mut states[k], &mut scratches[k])
                    .map_err(|e| (k + 1, e))?;
                if let (Some(start), Some(t)) = (clock.as_mut(), timings.as_deref_mut()) {
                    let now = Instant::now();
                    t[k + 1] += now - *start;
                    *start = now;
                }
            }
        }
        let mut out = Vec::with_capacity(states.len() + 1);
        out.push(ref_state);
        out.extend(states);
        Ok(out)
    }
}

/// Runs the reference and every coarse level on one sampled Wiener path.
pub fn run_coupled_paths<R: Rng + ?Sized>(
    paths: &CoupledPaths,
    noise: Option<&NoiseFactor>,
    rng: &mut R,
) -> Result<CoupledStates> {
    let dt = paths.reference().dt();
    let result = match noise {
        Some(factor) => {
            if factor.dof() != paths.reference().dof() {
                return Err(Error::invalid("noise factor is not on the reference mesh"));
            }
            let mut z = vec![0.0; factor.dof()];
            let mut sample =
                |out: &mut [f64]| factor.sample_load_increment_into(dt, rng, &mut z, out);
            paths.run(Some(&mut sample))
        }
        None => paths.run(None),
    };
    result.map_err(|(level, e)| Error::SampleFailure {
        sample: 0,
        level: level_name(level),
        source: Box::new(e),
    })
}

pub(crate) fn level_name(tag: usize) -> String {
    if tag == 0 {
        "reference".to_owned()
    } else {
        format!("{}", tag - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::build_uniform_mesh;
    use crate::noise::{build_noise_factor, derive_stream, CovarianceSpec, StreamSpec};
    use nalgebra::{DMatrix, DVector};
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::PI;

    fn ops(n: usize) -> Arc<FemOperators> {
        Arc::new(assemble_operators(&build_uniform_mesh(n).unwrap()).unwrap())
    }

    fn random_state(dof: usize, seed: u64) -> State {
        let mut rng = derive_stream(StreamSpec::new(seed, 0, 0));
        State {
            u: (0..dof).map(|_| rng.random::<f64>() - 0.5).collect(),
            v: (0..dof).map(|_| rng.random::<f64>() - 0.5).collect(),
            time: 0.0,
        }
    }

    /// Dense oracle: `R(Δt A_h)` from `A_h = [[0, -I], [M⁻¹K, 0]]`.
    fn dense_rational(method: RationalMethod, ops: &FemOperators, dt: f64) -> DMatrix<f64> {
        let n = ops.dof();
        let m = ops.mass().to_dense();
        let k = ops.stiffness().to_dense();
        let lam = m.clone().lu().solve(&k).unwrap();
        let mut a = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            a[(i, n + i)] = -1.0;
        }
        a.view_mut((n, 0), (n, n)).copy_from(&lam);
        let id = DMatrix::<f64>::identity(2 * n, 2 * n);
        match method {
            RationalMethod::BackwardEuler => (&id + &a * dt).try_inverse().unwrap(),
            RationalMethod::CrankNicolson => {
                (&id + &a * (dt / 2.0)).try_inverse().unwrap() * (&id - &a * (dt / 2.0))
            }
        }
    }

    fn stack(s: &State) -> DVector<f64> {
        DVector::from_iterator(2 * s.dof(), s.u.iter().chain(&s.v).copied())
    }

    #[test]
    fn scalar_maps() {
        let z = Complex64::new(0.0, 3.0);
        assert!((RationalMethod::CrankNicolson.eval(z).norm() - 1.0).abs() < 1e-15);
        assert!(RationalMethod::BackwardEuler.eval(z).norm() < 1.0);
        for y in [-1e3, -7.0, -0.1, 0.0, 0.4, 12.0, 1e3] {
            for m in [RationalMethod::BackwardEuler, RationalMethod::CrankNicolson] {
                assert!(m.eval(Complex64::new(0.0, y)).norm() <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn stepper_matches_dense_oracle() {
        let ops = ops(4);
        let dt = 0.17;
        for method in [RationalMethod::BackwardEuler, RationalMethod::CrankNicolson] {
            let stepper = build_stepper(method, ops.clone(), dt).unwrap();
            let r = dense_rational(method, &ops, dt);
            for seed in 0..5 {
                let s = random_state(3, seed);
                let next = stepper.step(None, None, &s).unwrap();
                let expected = &r * stack(&s);
                assert!((stack(&next) - expected).amax() < 1e-10, "{method:?}");
            }
        }
    }

    #[test]
    fn loads_enter_the_velocity_slot_before_the_propagator() {
        let ops = ops(4);
        let dt = 0.1;
        let drift = Drift::Sin;
        for method in [RationalMethod::BackwardEuler, RationalMethod::CrankNicolson] {
            let stepper = build_stepper(method, ops.clone(), dt).unwrap();
            let r = dense_rational(method, &ops, dt);
            let s = random_state(3, 17);
            let noise = [0.03, -0.02, 0.05];
            let next = stepper.step(Some(&drift), Some(&noise), &s).unwrap();
            let dl = drift_load(&drift, &s.u_function(), &ops).unwrap();
            let load: Vec<f64> = dl.iter().zip(&noise).map(|(d, w)| dt * d + w).collect();
            let shift = ops.mass_factor().solve(&load);
            let mut y = s.clone();
            y.v.iter_mut().zip(&shift).for_each(|(v, c)| *v += c);
            let expected = &r * stack(&y);
            assert!((stack(&next) - expected).amax() < 1e-10, "{method:?}");
        }
    }

    #[test]
    fn zero_state_stays_zero() {
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops(8), 0.1).unwrap();
        let s = State::zeros(7);
        let next = stepper.step(None, None, &s).unwrap();
        assert!(next.u.iter().chain(&next.v).all(|&x| x == 0.0));
        assert!((next.time - 0.1).abs() < 1e-15);
    }

    #[test]
    fn backward_euler_spectral_radius() {
        let ops = ops(8);
        for method in [RationalMethod::BackwardEuler, RationalMethod::CrankNicolson] {
            let r = dense_rational(method, &ops, 0.05);
            let eigs = r.complex_eigenvalues();
            let rmax = eigs.iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(rmax <= 1.0 + 1e-10, "{method:?}: {rmax}");
        }
    }

    #[test]
    fn scalar_limit_without_stiffness() {
        // no stiffness: u' = v, v' = 0; CN and BE give u + dt v exactly
        let mesh = build_uniform_mesh(2).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        // emulate Λ = 0 through the dense map on a 2×2 block
        let dt: f64 = 0.3;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        let id = DMatrix::<f64>::identity(2, 2);
        let cn = (&id + &a * (dt / 2.0)).try_inverse().unwrap() * (&id - &a * (dt / 2.0));
        assert!((cn - DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0])).amax() < 1e-15);
        assert_eq!(ops.dof(), 1);
    }

    #[test]
    fn eigenmode_returns_after_one_period() {
        let n = 64;
        let ops = ops(n);
        let dt = 1.0 / 64.0;
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops.clone(), dt).unwrap();
        let u0 = FemFunction::interpolate(ops.mesh(), |x| (PI * x).sin());
        let init = State::from_functions(&u0, &FemFunction::zeros(ops.mesh())).unwrap();
        let fin = run_path::<ChaCha20Rng>(
            &stepper,
            None,
            init.clone(),
            2.0,
            PathNoise::None,
            &[],
            |_| {},
        )
        .unwrap();
        let d: Vec<f64> = fin.u.iter().zip(&init.u).map(|(a, b)| a - b).collect();
        let dist = ops.mass().quad_form(&d).sqrt();
        let h = 1.0 / n as f64;
        assert!(dist < 10.0 * (h * h + dt * dt), "{dist}");
        assert!((fin.time - 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_step_path_equals_step() {
        let ops = ops(8);
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops, 0.25).unwrap();
        let s = random_state(7, 3);
        let via_path = run_path::<ChaCha20Rng>(
            &stepper,
            Some(&Drift::Cos),
            s.clone(),
            0.25,
            PathNoise::None,
            &[],
            |_| {},
        )
        .unwrap();
        let via_step = stepper.step(Some(&Drift::Cos), None, &s).unwrap();
        assert_eq!(via_path, via_step);
    }

    #[test]
    fn non_integral_horizon_rejected() {
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops(4), 0.3).unwrap();
        let r = run_path::<ChaCha20Rng>(
            &stepper,
            None,
            State::zeros(3),
            1.0,
            PathNoise::None,
            &[],
            |_| {},
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
        assert!(build_stepper(RationalMethod::CrankNicolson, ops(4), 0.0).is_err());
    }

    #[test]
    fn path_is_affine_in_initial_data_for_linear_drift() {
        let ops = ops(8);
        let dt = 0.125;
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops.clone(), dt).unwrap();
        let drift = Drift::Linear { coeff: -2.5 };
        let factor = build_noise_factor(ops.mesh(), &ops, CovarianceSpec::White).unwrap();
        let mut rng = derive_stream(StreamSpec::new(2, 0, 0));
        let loads: Vec<Vec<f64>> = (0..8)
            .map(|_| factor.sample_load_increment(dt, &mut rng).unwrap())
            .collect();
        let run = |s: State| {
            run_path::<ChaCha20Rng>(
                &stepper,
                Some(&drift),
                s,
                1.0,
                PathNoise::Loads(&loads),
                &[],
                |_| {},
            )
            .unwrap()
        };
        let x = random_state(7, 4);
        let y = random_state(7, 5);
        let combo = State {
            u: x.u
                .iter()
                .zip(&y.u)
                .map(|(a, b)| 2.0 * a - 0.5 * b)
                .collect(),
            v: x.v
                .iter()
                .zip(&y.v)
                .map(|(a, b)| 2.0 * a - 0.5 * b)
                .collect(),
            time: 0.0,
        };
        let zero = run(State::zeros(7));
        let (fx, fy, fc) = (run(x), run(y), run(combo));
        for i in 0..7 {
            // affine: Φ(2x - y/2) - Φ(0) = 2(Φ(x) - Φ(0)) - (Φ(y) - Φ(0))/2
            let lhs = fc.u[i] - zero.u[i];
            let rhs = 2.0 * (fx.u[i] - zero.u[i]) - 0.5 * (fy.u[i] - zero.u[i]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn snapshots_at_requested_times() {
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops(8), 0.125).unwrap();
        let mut times = Vec::new();
        run_path::<ChaCha20Rng>(
            &stepper,
            None,
            random_state(7, 1),
            1.0,
            PathNoise::None,
            &[0.0, 0.5, 1.0],
            |s| times.push(s.time),
        )
        .unwrap();
        assert_eq!(times, vec![0.0, 0.5, 1.0]);
        let r = run_path::<ChaCha20Rng>(
            &stepper,
            None,
            State::zeros(7),
            1.0,
            PathNoise::None,
            &[0.3],
            |_| {},
        );
        assert!(r.is_err());
    }

    #[test]
    fn drift_loads() {
        let mesh = build_uniform_mesh(8).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        let u = FemFunction::interpolate(&mesh, |x| x * (1.0 - x) * 3.0);
        assert!(drift_load(&Drift::Zero, &u, &ops)
            .unwrap()
            .iter()
            .all(|&b| b == 0.0));
        let id = drift_load(&Drift::Linear { coeff: 1.0 }, &u, &ops).unwrap();
        let mc = ops.mass().mul_vec(u.coeffs());
        for (a, b) in id.iter().zip(&mc) {
            assert!((a - b).abs() < 1e-12);
        }
        let cos0 = drift_load(&Drift::Cos, &FemFunction::zeros(&mesh), &ops).unwrap();
        assert!(cos0.iter().all(|&b| (b - mesh.h()).abs() < 1e-15));
    }

    #[test]
    fn nodal_drift_mode_agrees_on_constant_integrand() {
        let mesh = build_uniform_mesh(8).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        let mut out = vec![0.0; 7];
        drift_load_into(
            &Drift::Cos,
            &[0.0; 7],
            &ops,
            DriftQuadrature::NodalInterpolation,
            &mut out,
        )
        .unwrap();
        assert!(out.iter().all(|&b| (b - mesh.h()).abs() < 1e-15));
    }

    #[test]
    fn non_finite_drift_reports_element() {
        let mesh = build_uniform_mesh(4).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        let u = FemFunction::new(&mesh, vec![0.0, f64::INFINITY, 0.0]).unwrap();
        match drift_load(&Drift::Sin, &u, &ops) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coupled_level_equal_to_reference_is_bitwise_identical() {
        let reference = LevelSpec::new(1.0 / 16.0, 1.0 / 16.0);
        let paths = CoupledPaths::new(
            RationalMethod::CrankNicolson,
            reference,
            &[reference, LevelSpec::new(0.25, 0.25)],
            1.0,
            Some(Drift::Cos),
            |ops| Ok(State::zeros(ops.dof())),
        )
        .unwrap();
        let ref_ops = paths.reference().ops().clone();
        let factor = build_noise_factor(ref_ops.mesh(), &ref_ops, CovarianceSpec::White).unwrap();
        let mut rng = derive_stream(StreamSpec::new(8, 0, 0));
        let states = run_coupled_paths(&paths, Some(&factor), &mut rng).unwrap();
        assert_eq!(states[0].u, states[1].u);
        assert_eq!(states[0].v, states[1].v);
        assert_eq!(states[2].dof(), 3);
    }

    #[test]
    fn non_nested_level_rejected() {
        let reference = LevelSpec::new(1.0 / 16.0, 1.0 / 16.0);
        let bad_mesh = CoupledPaths::new(
            RationalMethod::CrankNicolson,
            reference,
            &[LevelSpec::new(1.0 / 6.0, 1.0 / 8.0)],
            1.0,
            None,
            |ops| Ok(State::zeros(ops.dof())),
        );
        assert!(matches!(bad_mesh, Err(Error::InvalidArgument(_))));
        let bad_step = CoupledPaths::new(
            RationalMethod::CrankNicolson,
            reference,
            &[LevelSpec::new(0.25, 0.1)],
            1.0,
            None,
            |ops| Ok(State::zeros(ops.dof())),
        );
        assert!(matches!(bad_step, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn coupled_noise_free_levels_match_independent_runs() {
        let reference = LevelSpec::new(1.0 / 16.0, 1.0 / 32.0);
        let level = LevelSpec::new(0.25, 0.125);
        let init = |ops: &FemOperators| {
            let u = FemFunction::interpolate(ops.mesh(), |x| (PI * x).sin());
            State::from_functions(&u, &FemFunction::zeros(ops.mesh()))
        };
        let paths = CoupledPaths::new(
            RationalMethod::CrankNicolson,
            reference,
            &[level],
            1.0,
            Some(Drift::Sin),
            init,
        )
        .unwrap();
        let mut rng = derive_stream(StreamSpec::new(0, 0, 0));
        let states = run_coupled_paths(&paths, None, &mut rng).unwrap();
        let ops4 = ops(4);
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops4.clone(), 0.125).unwrap();
        let alone = run_path::<ChaCha20Rng>(
            &stepper,
            Some(&Drift::Sin),
            init(&ops4).unwrap(),
            1.0,
            PathNoise::None,
            &[],
            |_| {},
        )
        .unwrap();
        assert_eq!(states[1].u, alone.u);
    }
}

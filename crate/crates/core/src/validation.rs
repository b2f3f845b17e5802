//! Quick invariant checks across all modules, plus the measurement helpers
//! they share with the acceptance tests.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::analysis::{
    fit_rates, predict_rates, ErrorColumn, ErrorRow, ErrorTable, ModalOracle, ModalState,
    RegularityParams,
};
use crate::error::Result;
use crate::fem::{
    assemble_operators, build_uniform_mesh, discrete_eigen, fractional_norm, prolongation_matrix,
    FemFunction, FemOperators, Mesh1D, SpectralBasis, DEFAULT_EIGEN_CAP,
};
use crate::noise::{
    build_noise_factor, derive_stream, restrict_load, CovarianceSpec, LoadBuffer, StreamSpec,
};
use crate::scheme::{build_stepper, drift_load, Drift, RationalMethod, State, StepScratch};

/// Outcome of one check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Check {
            name,
            passed,
            detail,
        }
    }

    fn from_result(name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(name, passed, detail),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Slope of `log |R(iy) − e^{−iy}|` over `y ∈ [1e−3, 1e−1]` (log-spaced).
pub fn rational_order_slope(method: RationalMethod) -> f64 {
    let ys: Vec<f64> = (0..=20)
        .map(|k| 10f64.powf(-3.0 + 2.0 * k as f64 / 20.0))
        .collect();
    let errs: Vec<f64> = ys
        .iter()
        .map(|&y| {
            let z = Complex64::new(0.0, y);
            (method.eval(z) - (-z).exp()).norm()
        })
        .collect();
    loglog_slope(&ys, &errs)
}

/// Energy history of a noise-free, drift-free run.
#[derive(Debug, Clone)]
pub struct EnergyTrace {
    pub energies: Vec<f64>,
}

impl EnergyTrace {
    pub fn max_relative_drift(&self) -> f64 {
        let e0 = self.energies[0];
        self.energies
            .iter()
            .map(|e| ((e - e0) / e0).abs())
            .fold(0.0, f64::max)
    }

    /// Whether the energy never increases (up to `slack` relative).
    pub fn non_increasing(&self, slack: f64) -> bool {
        self.energies
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + slack))
    }
}

/// Runs `steps` noise-free steps from a smooth nonzero state on `n` elements.
pub fn energy_trace(
    method: RationalMethod,
    n: usize,
    dt: f64,
    steps: usize,
) -> Result<EnergyTrace> {
    let mesh = build_uniform_mesh(n)?;
    let ops = Arc::new(assemble_operators(&mesh)?);
    let stepper = build_stepper(method, ops, dt)?;
    let u = FemFunction::interpolate(&mesh, |x| (PI * x).sin() + 0.3 * (3.0 * PI * x).sin());
    let v = FemFunction::interpolate(&mesh, |x| x * (1.0 - x));
    let mut state = State::from_functions(&u, &v)?;
    let mut scratch = StepScratch::new(stepper.dof());
    let mut energies = Vec::with_capacity(steps + 1);
    energies.push(stepper.energy(&state));
    for _ in 0..steps {
        stepper.step_in_place(None, None, &mut state, &mut scratch)?;
        energies.push(stepper.energy(&state));
    }
    Ok(EnergyTrace { energies })
}

/// Random FEM function with coefficients uniform in `[-scale, scale]`.
pub fn random_function<R: Rng + ?Sized>(mesh: &Mesh1D, scale: f64, rng: &mut R) -> FemFunction {
    let c = (0..mesh.interior_dof())
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    FemFunction::new(mesh, c).expect("matching length")
}

/// `‖F(u) − F(v)‖ / ‖u − v‖` over random pairs, with `F(u) = P_h f(u)`.
pub fn lipschitz_ratios(drift: &Drift, n: usize, pairs: usize, seed: u64) -> Result<Vec<f64>> {
    let mesh = build_uniform_mesh(n)?;
    let ops = assemble_operators(&mesh)?;
    let mut rng = derive_stream(StreamSpec::new(seed, 0, 0));
    let mut out = Vec::with_capacity(pairs);
    for k in 0..pairs {
        let scale = 10f64.powf(-2.0 + 4.0 * k as f64 / pairs.max(1) as f64);
        let u = random_function(&mesh, scale, &mut rng);
        let v = random_function(&mesh, scale, &mut rng);
        let fu = ops.load_to_function(&drift_load(drift, &u, &ops)?);
        let fv = ops.load_to_function(&drift_load(drift, &v, &ops)?);
        let df: Vec<f64> = fu
            .coeffs()
            .iter()
            .zip(fv.coeffs())
            .map(|(a, b)| a - b)
            .collect();
        let du: Vec<f64> = u
            .coeffs()
            .iter()
            .zip(v.coeffs())
            .map(|(a, b)| a - b)
            .collect();
        out.push((ops.mass().quad_form(&df) / ops.mass().quad_form(&du)).sqrt());
    }
    Ok(out)
}

/// Random smooth input `Σ_{k ≤ max_mode} a_k sin(kπx)` interpolated on the mesh.
pub fn random_smooth_function<R: Rng + ?Sized>(
    mesh: &Mesh1D,
    max_mode: u32,
    scale: f64,
    rng: &mut R,
) -> FemFunction {
    let a: Vec<f64> = (0..max_mode)
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    FemFunction::interpolate(mesh, |x| {
        a.iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * PI * x).sin())
            .sum()
    })
}

/// `‖F(u)‖_{Ḣ^θ} / (1 + ‖u‖_{Ḣ^θ})` over random smooth inputs with at most
/// `max_mode` sine modes and amplitudes spread over four decades.
pub fn fractional_growth_ratios(
    drift: &Drift,
    theta: f64,
    n: usize,
    max_mode: u32,
    inputs: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mesh = build_uniform_mesh(n)?;
    let ops = assemble_operators(&mesh)?;
    let basis = SpectralBasis::for_elements(n);
    let mut rng = derive_stream(StreamSpec::new(seed, 1, 0));
    let mut out = Vec::with_capacity(inputs);
    for k in 0..inputs {
        let scale = 10f64.powf(-2.0 + 4.0 * k as f64 / inputs.max(1) as f64);
        let u = random_smooth_function(&mesh, max_mode, scale, &mut rng);
        let fu = ops.load_to_function(&drift_load(drift, &u, &ops)?);
        let nf = fractional_norm(&fu, theta, basis)?;
        let nu = fractional_norm(&u, theta, basis)?;
        out.push(nf.value / (1.0 + nu.value));
    }
    Ok(out)
}

/// Largest elementwise deviation, in standard errors, of an empirical
/// covariance from its target: `max |Ŝ_ij − T_ij| / se(Ŝ_ij)`.
pub fn covariance_zscore(samples: &[Vec<f64>], target: &nalgebra::DMatrix<f64>) -> f64 {
    let n = samples.len() as f64;
    let d = target.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..d {
        for j in i..d {
            let prods: Vec<f64> = samples.iter().map(|s| s[i] * s[j]).collect();
            let mean = prods.iter().sum::<f64>() / n;
            let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            worst = worst.max((mean - target[(i, j)]).abs() / se);
        }
    }
    worst
}

/// z-scores of fine loads against `Δt·C_fine` and of restricted coarse loads
/// against `Δt_c·C_coarse`.
#[derive(Debug, Clone, Copy)]
pub struct LoadStatistics {
    pub fine_zscore: f64,
    pub coarse_zscore: f64,
}

pub fn load_statistics(
    spec: CovarianceSpec,
    n_fine: usize,
    n_coarse: usize,
    dt: f64,
    step_ratio: usize,
    samples: usize,
    seed: u64,
) -> Result<LoadStatistics> {
    let fine = build_uniform_mesh(n_fine)?;
    let coarse = build_uniform_mesh(n_coarse)?;
    let fine_ops = assemble_operators(&fine)?;
    let coarse_ops = assemble_operators(&coarse)?;
    let fine_factor = build_noise_factor(&fine, &fine_ops, spec)?;
    let coarse_factor = build_noise_factor(&coarse, &coarse_ops, spec)?;
    let p = prolongation_matrix(&coarse, &fine)?;
    let mut rng = derive_stream(StreamSpec::new(seed, 0, 0));
    let mut z = vec![0.0; fine.interior_dof()];
    let mut load = vec![0.0; fine.interior_dof()];
    let mut buffer = LoadBuffer::new(fine.interior_dof(), coarse.interior_dof());
    let mut fine_samples = Vec::with_capacity(samples);
    let mut coarse_samples = Vec::with_capacity(samples);
    for _ in 0..samples {
        for k in 0..step_ratio {
            fine_factor.sample_load_increment_into(dt, &mut rng, &mut z, &mut load)?;
            if k == 0 {
                fine_samples.push(load.clone());
            }
            if let Some(c) = restrict_load(&load, &p, step_ratio, &mut buffer)? {
                coarse_samples.push(c.to_vec());
            }
        }
    }
    let fine_target = fine_factor.covariance() * dt;
    let coarse_target = coarse_factor.covariance() * (dt * step_ratio as f64);
    Ok(LoadStatistics {
        fine_zscore: covariance_zscore(&fine_samples, &fine_target),
        coarse_zscore: covariance_zscore(&coarse_samples, &coarse_target),
    })
}

fn interior_row_check(ops: &FemOperators) -> (bool, String) {
    let h = ops.mesh().h();
    let m = ops.mass();
    let k = ops.stiffness();
    let i = ops.dof() / 2;
    let dm = (m.diag()[i] - 4.0 * h / 6.0).abs() + (m.off_diag()[i] - h / 6.0).abs();
    let dk = (k.diag()[i] - 2.0 / h).abs() + (k.off_diag()[i] + 1.0 / h).abs();
    (
        dm < 1e-14 && dk < 1e-12,
        format!("stencil deviation M {dm:.1e}, K {dk:.1e}"),
    )
}

fn eigenvalue_check() -> Result<(bool, String)> {
    let n = 16;
    let ops = assemble_operators(&build_uniform_mesh(n)?)?;
    let spec = discrete_eigen(&ops, DEFAULT_EIGEN_CAP)?;
    let h = 1.0 / n as f64;
    let worst = spec
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let c = ((k + 1) as f64 * PI * h).cos();
            let exact = 6.0 / (h * h) * (1.0 - c) / (2.0 + c);
            ((l - exact) / exact).abs()
        })
        .fold(0.0, f64::max);
    Ok((
        worst < 1e-10,
        format!("max relative deviation {worst:.1e} from closed form"),
    ))
}

fn prolongation_check() -> Result<(bool, String)> {
    let coarse = build_uniform_mesh(4)?;
    let fine = build_uniform_mesh(16)?;
    let p = prolongation_matrix(&coarse, &fine)?;
    let mut rng = derive_stream(StreamSpec::new(3, 0, 0));
    let c = random_function(&coarse, 1.0, &mut rng);
    let f = FemFunction::new(&fine, p.mul_vec(c.coeffs()))?;
    let worst = (0..=100)
        .map(|k| {
            let x = k as f64 / 100.0;
            (c.evaluate(x) - f.evaluate(x)).abs()
        })
        .fold(0.0, f64::max);
    Ok((
        worst < 1e-14,
        format!("max pointwise deviation {worst:.1e}"),
    ))
}

fn factor_check(spec: CovarianceSpec) -> Result<(bool, String)> {
    let mesh = build_uniform_mesh(16)?;
    let ops = assemble_operators(&mesh)?;
    let f = build_noise_factor(&mesh, &ops, spec)?;
    let l = f.lower_factor();
    let c = f.covariance();
    let r = (&l * l.transpose() - &c).abs().max() / c.abs().max();
    let sym = (&c - c.transpose()).abs().max();
    Ok((
        r < 1e-12 && sym == 0.0,
        format!(
            "‖LLᵀ − C‖/‖C‖ = {r:.1e}, asymmetry {sym:.1e}, jitter {:.1e}",
            f.jitter()
        ),
    ))
}

fn restriction_adjoint_check() -> Result<(bool, String)> {
    let coarse = build_uniform_mesh(4)?;
    let fine = build_uniform_mesh(12)?;
    let p = prolongation_matrix(&coarse, &fine)?;
    let mut rng = derive_stream(StreamSpec::new(5, 0, 0));
    let b: Vec<f64> = (0..fine.interior_dof())
        .map(|_| rng.random::<f64>())
        .collect();
    let c: Vec<f64> = (0..coarse.interior_dof())
        .map(|_| rng.random::<f64>())
        .collect();
    let mut buffer = LoadBuffer::new(fine.interior_dof(), coarse.interior_dof());
    let r = restrict_load(&b, &p, 1, &mut buffer)?
        .expect("ratio 1")
        .to_vec();
    let lhs: f64 = r.iter().zip(&c).map(|(a, b)| a * b).sum();
    let pc = p.mul_vec(&c);
    let rhs: f64 = b.iter().zip(&pc).map(|(a, b)| a * b).sum();
    let d = (lhs - rhs).abs();
    Ok((d < 1e-13, format!("|⟨Pᵀb, c⟩ − ⟨b, Pc⟩| = {d:.1e}")))
}

fn stream_check() -> (bool, String) {
    let a: Vec<u64> = {
        let mut r = derive_stream(StreamSpec::new(9, 4, 2));
        (0..8).map(|_| r.random()).collect()
    };
    let b: Vec<u64> = {
        let mut r = derive_stream(StreamSpec::new(9, 4, 2));
        (0..8).map(|_| r.random()).collect()
    };
    let c: Vec<u64> = {
        let mut r = derive_stream(StreamSpec::new(9, 5, 2));
        (0..8).map(|_| r.random()).collect()
    };
    (
        a == b && a != c,
        "same spec reproduces, neighbouring spec differs".into(),
    )
}

fn stability_check() -> Result<(bool, String)> {
    let mesh = build_uniform_mesh(32)?;
    let ops = Arc::new(assemble_operators(&mesh)?);
    let mut worst: f64 = 0.0;
    for method in [RationalMethod::BackwardEuler, RationalMethod::CrankNicolson] {
        let stepper = build_stepper(method, ops.clone(), 0.05)?;
        let mut rng = derive_stream(StreamSpec::new(17, method.order() as u64, 0));
        let mut state = State {
            u: random_function(&mesh, 1.0, &mut rng).into_coeffs(),
            v: random_function(&mesh, 1.0, &mut rng).into_coeffs(),
            time: 0.0,
        };
        let e0 = stepper.energy(&state);
        let mut scratch = StepScratch::new(stepper.dof());
        for _ in 0..2000 {
            stepper.step_in_place(None, None, &mut state, &mut scratch)?;
            worst = worst.max(stepper.energy(&state) / e0);
        }
    }
    Ok((
        worst <= 1.0 + 1e-10,
        format!("max energy ratio {worst:.12}"),
    ))
}

fn exact(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn rate_table_check() -> Result<(bool, String)> {
    let w = predict_rates(&RegularityParams::white_noise_1d())?;
    let t = predict_rates(&RegularityParams::trace_class_1d())?;
    let p = predict_rates(&RegularityParams {
        mu: 1.1,
        ..RegularityParams::trace_class_1d()
    })?;
    let ok = exact(w.strong_h_exp, 1.0 / 3.0)
        && exact(w.weak_h_exp, 2.0 / 3.0)
        && exact(t.strong_h_exp, 2.0 / 3.0)
        && exact(t.weak_h_exp, 4.0 / 3.0)
        && exact(t.weak_dt_exp, 1.0)
        && exact(p.weak_h_exp, 4.0 / 3.0 - 0.1);
    Ok((
        ok,
        format!(
            "white {:.4}/{:.4}, trace-class {:.4}/{:.4}, μ = 1.1 weak {:.4}",
            w.strong_h_exp, w.weak_h_exp, t.strong_h_exp, t.weak_h_exp, p.weak_h_exp
        ),
    ))
}

fn fit_check() -> Result<(bool, String)> {
    let p = 1.25;
    let rows = (1..=5)
        .map(|k| {
            let h = 2f64.powi(-k);
            ErrorRow {
                level: k as usize - 1,
                h,
                dt: h,
                n_samples: 2,
                strong_error: 0.7 * h.powf(p),
                strong_se: 0.0,
                weak_error: -0.7 * h.powf(p),
                weak_se: 0.0,
                negnorm_error: None,
                negnorm_se: None,
                noise_floor_flag: false,
            }
        })
        .collect();
    let table = ErrorTable { rows };
    let s = fit_rates(&table, ErrorColumn::Strong)?;
    let w = fit_rates(&table, ErrorColumn::Weak)?;
    let ok = (s.slope - p).abs() < 1e-12 && (w.slope - p).abs() < 1e-12;
    Ok((
        ok,
        format!("recovered slopes {:.12}, {:.12}", s.slope, w.slope),
    ))
}

fn oracle_check() -> Result<(bool, String)> {
    let oracle = ModalOracle::new(SpectralBasis::new(3)?, 1.0 / 50.0, None)?;
    let mut s = ModalState::zeros(3);
    s.u = vec![1.0, 0.5, 0.25];
    let start = s.clone();
    for _ in 0..100 {
        oracle.propagate(&mut s);
    }
    let d =
        s.u.iter()
            .zip(&start.u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    Ok((d < 1e-12, format!("deviation after one period {d:.1e}")))
}

/// Runs every check; all are deterministic.
pub fn run_validation_suite() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(Check::from_result(
        "fem.stencils",
        build_uniform_mesh(10)
            .and_then(|m| assemble_operators(&m))
            .map(|ops| interior_row_check(&ops)),
    ));
    out.push(Check::from_result(
        "fem.discrete_eigenvalues",
        eigenvalue_check(),
    ));
    out.push(Check::from_result(
        "fem.prolongation_exact",
        prolongation_check(),
    ));
    out.push(Check::from_result(
        "noise.white_factor",
        factor_check(CovarianceSpec::White),
    ));
    out.push(Check::from_result(
        "noise.kernel_factor",
        factor_check(CovarianceSpec::exponential_default()),
    ));
    out.push(Check::from_result(
        "noise.restriction_adjoint",
        restriction_adjoint_check(),
    ));
    out.push(Check::from_result(
        "noise.load_covariance",
        load_statistics(
            CovarianceSpec::exponential_default(),
            8,
            4,
            0.01,
            2,
            20_000,
            11,
        )
        .map(|s| {
            (
                s.fine_zscore <= 5.0 && s.coarse_zscore <= 5.0,
                format!(
                    "max z-score fine {:.2}, coarse {:.2}",
                    s.fine_zscore, s.coarse_zscore
                ),
            )
        }),
    ));
    let (ok, detail) = stream_check();
    out.push(Check::new("noise.stream_reproducibility", ok, detail));
    for (name, method, expected) in [
        (
            "scheme.order_backward_euler",
            RationalMethod::BackwardEuler,
            2.0,
        ),
        (
            "scheme.order_crank_nicolson",
            RationalMethod::CrankNicolson,
            3.0,
        ),
    ] {
        let s = rational_order_slope(method);
        out.push(Check::new(
            name,
            (s - expected).abs() <= 0.1,
            format!("slope {s:.4}"),
        ));
    }
    out.push(Check::from_result(
        "scheme.cn_energy_conservation",
        energy_trace(RationalMethod::CrankNicolson, 128, 1e-3, 2000).map(|t| {
            let d = t.max_relative_drift();
            (d <= 1e-10, format!("max relative drift {d:.1e}"))
        }),
    ));
    out.push(Check::from_result(
        "scheme.be_dissipation",
        energy_trace(RationalMethod::BackwardEuler, 128, 1e-3, 2000).map(|t| {
            (
                t.non_increasing(0.0),
                format!("energy {:.6} → {:.6}", t.energies[0], t.energies[2000]),
            )
        }),
    ));
    out.push(Check::from_result("scheme.stability", stability_check()));
    out.push(Check::from_result(
        "scheme.lipschitz_sin",
        lipschitz_ratios(&Drift::Sin, 32, 100, 7).map(|r| {
            let m = r.iter().cloned().fold(0.0, f64::max);
            (m <= 1.0 + 1e-10, format!("max ratio {m:.12}"))
        }),
    ));
    out.push(Check::from_result(
        "analysis.rate_table",
        rate_table_check(),
    ));
    out.push(Check::from_result(
        "analysis.fit_exact_power_law",
        fit_check(),
    ));
    out.push(Check::from_result("analysis.oracle_period", oracle_check()));
    out
}

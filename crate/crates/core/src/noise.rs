//! Q-Wiener noise at the load-vector level.
//!
//! The scheme only consumes noise through the pairings
//! `b_i = ⟨ΔW, φ_i⟩`. Over a step of length `dt` these are jointly Gaussian
//! with covariance `dt · C`, `C_ij = ⟨Q φ_i, φ_j⟩`: the mass matrix for white
//! noise, the kernel Gram matrix `∬ q(x,y) φ_i(x) φ_j(y)` otherwise. Because
//! coarse hats lie in every nested fine space, coarse pairings are exact
//! linear combinations of fine ones, which is what [`restrict_load`] uses to
//! drive several grids with one Wiener path.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{FemOperators, Mesh1D, Rule, GAUSS3, GAUSS5};
use crate::linalg::{CsrMatrix, SymTridiag, TridiagCholesky};

/// Random stream type used for all noise sampling.
pub type NoiseRng = ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CovarianceSpec {
    /// `Q = I`: space-time white noise.
    White,
    /// `q(x, y) = scale · exp(-rate · |x - y|)`.
    ScaledExponential { rate: f64, scale: f64 },
}

impl CovarianceSpec {
    /// The exponential kernel `exp(-25|x-y|)/16`.
    pub const fn exponential_default() -> Self {
        CovarianceSpec::ScaledExponential {
            rate: 25.0,
            scale: 1.0 / 16.0,
        }
    }

    pub fn kernel(&self, x: f64, y: f64) -> Option<f64> {
        match *self {
            CovarianceSpec::White => None,
            CovarianceSpec::ScaledExponential { rate, scale } => {
                Some(scale * (-rate * (x - y).abs()).exp())
            }
        }
    }

    pub fn is_stationary(&self) -> bool {
        true
    }

    pub fn name(&self) -> &'static str {
        match self {
            CovarianceSpec::White => "white",
            CovarianceSpec::ScaledExponential { .. } => "scaled_exponential",
        }
    }
}

#[derive(Debug, Clone)]
enum LoadCovariance {
    Tridiagonal(SymTridiag),
    Dense(DMatrix<f64>),
}

#[derive(Debug, Clone)]
enum Factor {
    Bidiagonal(TridiagCholesky),
    Dense(DMatrix<f64>),
    Zero,
}

/// Factor `L` with `L Lᵀ ≈ C` for the per-unit-time load covariance.
#[derive(Debug, Clone)]
pub struct NoiseFactor {
    n_elements: usize,
    spec: CovarianceSpec,
    covariance: LoadCovariance,
    factor: Factor,
    jitter: f64,
}

const JITTER_LADDER: [f64; 4] = [0.0, 1e-14, 1e-12, 1e-10];

pub fn build_noise_factor(
    mesh: &Mesh1D,
    ops: &FemOperators,
    spec: CovarianceSpec,
) -> Result<NoiseFactor> {
    if ops.mesh().n_elements() != mesh.n_elements() {
        return Err(Error::invalid(
            "operators were assembled on a different mesh",
        ));
    }
    match spec {
        CovarianceSpec::White => Ok(NoiseFactor {
            n_elements: mesh.n_elements(),
            spec,
            covariance: LoadCovariance::Tridiagonal(ops.mass().clone()),
            factor: Factor::Bidiagonal(ops.mass_factor().clone()),
            jitter: 0.0,
        }),
        CovarianceSpec::ScaledExponential { rate, scale } => {
            if !(rate >= 0.0 && rate.is_finite() && scale >= 0.0 && scale.is_finite()) {
                return Err(Error::invalid(format!(
                    "kernel parameters must be finite and non-negative (rate {rate}, scale {scale})"
                )));
            }
            let c = kernel_gram(mesh, |x, y| scale * (-rate * (x - y).abs()).exp());
            let (factor, jitter) = factor_with_jitter(&c)?;
            Ok(NoiseFactor {
                n_elements: mesh.n_elements(),
                spec,
                covariance: LoadCovariance::Dense(c),
                factor,
                jitter,
            })
        }
    }
}

/// `C_ij = ∬ q(x,y) φ_i(x) φ_j(y)`: tensor 3×3 Gauss on distinct element
/// pairs. On diagonal pairs the kernel may have a kink along `x = y`, so the
/// square is split into two triangles, each integrated with a collapsed
/// 5×5 Gauss rule.
pub fn kernel_gram(mesh: &Mesh1D, q: impl Fn(f64, f64) -> f64) -> DMatrix<f64> {
    let n = mesh.n_elements();
    let dof = mesh.interior_dof();
    let h = mesh.h();
    let mut c = DMatrix::zeros(dof, dof);
    let local_dof = |e: usize, a: usize| -> Option<usize> {
        let node = e + a;
        (node >= 1 && node <= dof).then(|| node - 1)
    };
    let shape = |a: usize, xi: f64| if a == 0 { 1.0 - xi } else { xi };
    for e in 0..n {
        for f in 0..n {
            let mut local = [[0.0; 2]; 2];
            let x0 = e as f64 * h;
            let y0 = f as f64 * h;
            if e != f {
                tensor_pair(
                    GAUSS3,
                    &mut local,
                    |xi, eta| q(x0 + xi * h, y0 + eta * h),
                    shape,
                );
            } else {
                diagonal_pair(
                    GAUSS5,
                    &mut local,
                    |xi, eta| q(x0 + xi * h, x0 + eta * h),
                    shape,
                );
            }
            for a in 0..2 {
                let Some(i) = local_dof(e, a) else { continue };
                for b in 0..2 {
                    let Some(j) = local_dof(f, b) else { continue };
                    c[(i, j)] += h * h * local[a][b];
                }
            }
        }
    }
    // exact symmetry
    let ct = c.transpose();
    (c + ct) * 0.5
}

fn tensor_pair(
    rule: Rule,
    local: &mut [[f64; 2]; 2],
    q: impl Fn(f64, f64) -> f64,
    shape: impl Fn(usize, f64) -> f64,
) {
    for (&xi, &wx) in rule.points.iter().zip(rule.weights) {
        for (&eta, &wy) in rule.points.iter().zip(rule.weights) {
            let k = wx * wy * q(xi, eta);
            for a in 0..2 {
                for b in 0..2 {
                    local[a][b] += k * shape(a, xi) * shape(b, eta);
                }
            }
        }
    }
}

fn diagonal_pair(
    rule: Rule,
    local: &mut [[f64; 2]; 2],
    q: impl Fn(f64, f64) -> f64,
    shape: impl Fn(usize, f64) -> f64,
) {
    // lower triangle η ≤ ξ via ξ = s, η = s t (Jacobian s), mirrored for η > ξ
    for (&s, &ws) in rule.points.iter().zip(rule.weights) {
        for (&t, &wt) in rule.points.iter().zip(rule.weights) {
            let (xi, eta) = (s, s * t);
            let k = ws * wt * s;
            let lower = k * q(xi, eta);
            let upper = k * q(eta, xi);
            for a in 0..2 {
                for b in 0..2 {
                    local[a][b] +=
                        lower * shape(a, xi) * shape(b, eta) + upper * shape(a, eta) * shape(b, xi);
                }
            }
        }
    }
}

fn factor_with_jitter(c: &DMatrix<f64>) -> Result<(Factor, f64)> {
    let dof = c.nrows();
    let trace = c.trace();
    if c.iter().all(|&v| v == 0.0) {
        return Ok((Factor::Zero, 0.0));
    }
    let mut last_jitter = 0.0;
    for rel in JITTER_LADDER {
        let jitter = rel * trace / dof as f64;
        last_jitter = jitter;
        let mut shifted = c.clone();
        for i in 0..dof {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = shifted.cholesky() {
            return Ok((Factor::Dense(ch.unpack()), jitter));
        }
    }
    let min_eigenvalue = c.clone().symmetric_eigenvalues().min();
    Err(Error::NotPositiveSemidefinite {
        jitter: last_jitter,
        min_eigenvalue,
    })
}

impl NoiseFactor {
    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn dof(&self) -> usize {
        self.n_elements - 1
    }

    pub fn spec(&self) -> CovarianceSpec {
        self.spec
    }

    /// Diagonal shift actually added before factorizing.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Per-unit-time load covariance `C`.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.covariance {
            LoadCovariance::Tridiagonal(m) => m.to_dense(),
            LoadCovariance::Dense(c) => c.clone(),
        }
    }

    pub fn lower_factor(&self) -> DMatrix<f64> {
        match &self.factor {
            Factor::Bidiagonal(l) => l.lower_dense(),
            Factor::Dense(l) => l.clone(),
            Factor::Zero => DMatrix::zeros(self.dof(), self.dof()),
        }
    }

    /// `b = √dt · L z` with `z` standard normal drawn from `rng`.
    pub fn sample_load_increment_into<R: Rng + ?Sized>(
        &self,
        dt: f64,
        rng: &mut R,
        z: &mut [f64],
        out: &mut [f64],
    ) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!(
                "time increment must be positive, got {dt}"
            )));
        }
        let dof = self.dof();
        if z.len() != dof || out.len() != dof {
            return Err(Error::invalid("load buffer length does not match the mesh"));
        }
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let scale = dt.sqrt();
        match &self.factor {
            Factor::Bidiagonal(l) => {
                l.lower_mul_into(z, out);
                out.iter_mut().for_each(|o| *o *= scale);
            }
            Factor::Dense(l) => {
                for i in 0..dof {
                    let mut acc = 0.0;
                    for k in 0..=i {
                        acc += l[(i, k)] * z[k];
                    }
                    out[i] = scale * acc;
                }
            }
            Factor::Zero => out.iter_mut().for_each(|o| *o = 0.0),
        }
        Ok(())
    }

    pub fn sample_load_increment<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.dof()];
        let mut out = vec![0.0; self.dof()];
        self.sample_load_increment_into(dt, rng, &mut z, &mut out)?;
        Ok(out)
    }
}

/// Accumulates fine loads over one coarse step.
#[derive(Debug, Clone)]
pub struct LoadBuffer {
    sum: Vec<f64>,
    coarse: Vec<f64>,
    count: usize,
}

impl LoadBuffer {
    pub fn new(fine_dof: usize, coarse_dof: usize) -> Self {
        LoadBuffer {
            sum: vec![0.0; fine_dof],
            coarse: vec![0.0; coarse_dof],
            count: 0,
        }
    }

    pub fn reset(&mut self) {
        self.sum.iter_mut().for_each(|v| *v = 0.0);
        self.count = 0;
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    /// Step counting without loads, for noise-free coupled runs.
    pub(crate) fn count_step(&mut self, step_ratio: usize) {
        self.count += 1;
        if self.count >= step_ratio {
            self.count = 0;
        }
    }
}

/// Adds one fine-step load to `buffer`; after `step_ratio` fine steps returns
/// the coarse-step load `Pᵀ Σ b_fine`.
pub fn restrict_load<'a>(
    b_fine: &[f64],
    prolongation: &CsrMatrix,
    step_ratio: usize,
    buffer: &'a mut LoadBuffer,
) -> Result<Option<&'a [f64]>> {
    if step_ratio == 0 {
        return Err(Error::invalid("step ratio must be positive"));
    }
    if b_fine.len() != prolongation.nrows() || buffer.sum.len() != prolongation.nrows() {
        return Err(Error::invalid(format!(
            "fine load has length {}, prolongation expects {}",
            b_fine.len(),
            prolongation.nrows()
        )));
    }
    if buffer.coarse.len() != prolongation.ncols() {
        return Err(Error::invalid(
            "coarse buffer does not match the prolongation",
        ));
    }
    for (s, b) in buffer.sum.iter_mut().zip(b_fine) {
        *s += b;
    }
    buffer.count += 1;
    if buffer.count < step_ratio {
        return Ok(None);
    }
    prolongation.mul_transpose_into(&buffer.sum, &mut buffer.coarse);
    buffer.sum.iter_mut().for_each(|v| *v = 0.0);
    buffer.count = 0;
    Ok(Some(&buffer.coarse))
}

/// Identifies an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamSpec {
    pub master_seed: u64,
    pub sample_index: u64,
    pub level: u32,
}

impl StreamSpec {
    pub fn new(master_seed: u64, sample_index: u64, level: u32) -> Self {
        StreamSpec {
            master_seed,
            sample_index,
            level,
        }
    }
}

/// Seeds a ChaCha20 stream with SHA-256 of the spec; independent of any
/// scheduling.
pub fn derive_stream(spec: StreamSpec) -> NoiseRng {
    let mut hasher = Sha256::new();
    hasher.update(b"stochwave/stream/v1");
    hasher.update(spec.master_seed.to_le_bytes());
    hasher.update(spec.sample_index.to_le_bytes());
    hasher.update(spec.level.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    NoiseRng::from_seed(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_operators, build_uniform_mesh, prolongation_matrix};
    use crate::linalg::max_abs;

    fn setup(n: usize) -> (Mesh1D, FemOperators) {
        let mesh = build_uniform_mesh(n).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        (mesh, ops)
    }

    #[test]
    fn white_single_dof() {
        let (mesh, ops) = setup(2);
        let f = build_noise_factor(&mesh, &ops, CovarianceSpec::White).unwrap();
        let l = f.lower_factor();
        assert!((l[(0, 0)] - (4.0 * 0.5 / 6.0f64).sqrt()).abs() < 1e-15);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn zero_kernel_gives_zero_loads() {
        let (mesh, ops) = setup(8);
        let spec = CovarianceSpec::ScaledExponential {
            rate: 25.0,
            scale: 0.0,
        };
        let f = build_noise_factor(&mesh, &ops, spec).unwrap();
        let mut rng = derive_stream(StreamSpec::new(1, 0, 0));
        let b = f.sample_load_increment(1.0, &mut rng).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factor_reproduces_covariance() {
        let (mesh, ops) = setup(16);
        for spec in [CovarianceSpec::White, CovarianceSpec::exponential_default()] {
            let f = build_noise_factor(&mesh, &ops, spec).unwrap();
            let l = f.lower_factor();
            let c = f.covariance();
            for i in 0..l.nrows() {
                for j in i + 1..l.ncols() {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
            let err = max_abs(&(&l * l.transpose() - &c));
            assert!(err <= 1e-10 * max_abs(&c) + f.jitter(), "{spec:?}: {err}");
        }
    }

    #[test]
    fn kernel_symmetric_and_stationary() {
        let spec = CovarianceSpec::exponential_default();
        let mut rng = derive_stream(StreamSpec::new(3, 0, 0));
        for _ in 0..50 {
            let x: f64 = rng.random();
            let y: f64 = rng.random();
            assert_eq!(spec.kernel(x, y), spec.kernel(y, x));
        }
        assert!(spec.is_stationary());
        assert_eq!(spec.kernel(0.3, 0.3), Some(1.0 / 16.0));
    }

    /// Oracle: plain Monte Carlo quadrature of the double integral with
    /// uniform points on the support of φ_i × φ_j.
    #[test]
    fn kernel_gram_matches_monte_carlo_quadrature() {
        let (mesh, ops) = setup(8);
        let spec = CovarianceSpec::exponential_default();
        let f = build_noise_factor(&mesh, &ops, spec).unwrap();
        let c = f.covariance();
        let h = mesh.h();
        let hat = |i: usize, x: f64| (1.0 - ((x - (i + 1) as f64 * h) / h).abs()).max(0.0);
        let mut rng = derive_stream(StreamSpec::new(11, 0, 0));
        let samples = 10_000;
        for (i, j) in [(0, 0), (3, 3), (3, 4), (2, 5), (0, 6)] {
            let (ai, aj) = (i as f64 * h, j as f64 * h);
            let area = 4.0 * h * h;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..samples {
                let x = ai + 2.0 * h * rng.random::<f64>();
                let y = aj + 2.0 * h * rng.random::<f64>();
                let v = area * spec.kernel(x, y).unwrap() * hat(i, x) * hat(j, y);
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / samples as f64;
            let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
            assert!(
                (c[(i, j)] - mean).abs() < 3.0 * se,
                "({i},{j}): {} vs {mean} ± {se}",
                c[(i, j)]
            );
        }
    }

    #[test]
    fn kernel_gram_converges_under_refinement_of_the_rule() {
        // constant kernel: C = (∫φ_i)(∫φ_j) = h² exactly
        let mesh = build_uniform_mesh(6).unwrap();
        let c = kernel_gram(&mesh, |_, _| 1.0);
        let h = mesh.h();
        assert!(c.iter().all(|&v| (v - h * h).abs() < 1e-15));
    }

    #[test]
    fn non_positive_kernel_is_detected() {
        let mesh = build_uniform_mesh(8).unwrap();
        let c = kernel_gram(&mesh, |x, y| -(x * y));
        assert!(matches!(
            factor_with_jitter(&c),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn non_positive_dt_rejected() {
        let (mesh, ops) = setup(4);
        let f = build_noise_factor(&mesh, &ops, CovarianceSpec::White).unwrap();
        let mut rng = derive_stream(StreamSpec::new(0, 0, 0));
        assert!(f.sample_load_increment(0.0, &mut rng).is_err());
        assert!(f.sample_load_increment(-1.0, &mut rng).is_err());
    }

    #[test]
    fn restriction_identity_when_grids_coincide() {
        let (mesh, _) = setup(6);
        let p = prolongation_matrix(&mesh, &mesh).unwrap();
        let mut buf = LoadBuffer::new(5, 5);
        let b = [0.1, -0.2, 0.3, 0.4, -0.5];
        let out = restrict_load(&b, &p, 1, &mut buf).unwrap().unwrap();
        assert_eq!(out, &b);
    }

    #[test]
    fn restricted_pairing_equals_fine_pairing() {
        // for w in the coarse space: ⟨ΔW, w⟩ = Σ c_i b^H_i = Σ (P c)_k b^h_k
        let coarse = build_uniform_mesh(4).unwrap();
        let (fine, ops) = setup(16);
        let p = prolongation_matrix(&coarse, &fine).unwrap();
        let f = build_noise_factor(&fine, &ops, CovarianceSpec::White).unwrap();
        let mut rng = derive_stream(StreamSpec::new(5, 0, 0));
        let mut buf = LoadBuffer::new(15, 3);
        let mut fine_total = vec![0.0; 15];
        let w = [0.4, -1.0, 2.5];
        let pw = p.mul_vec(&w);
        let mut coarse_load = None;
        for _ in 0..4 {
            let b = f.sample_load_increment(0.25, &mut rng).unwrap();
            fine_total.iter_mut().zip(&b).for_each(|(t, x)| *t += x);
            coarse_load = restrict_load(&b, &p, 4, &mut buf)
                .unwrap()
                .map(|s| s.to_vec());
        }
        let coarse_load = coarse_load.expect("complete after four fine steps");
        let on_coarse: f64 = w.iter().zip(&coarse_load).map(|(a, b)| a * b).sum();
        let on_fine: f64 = pw.iter().zip(&fine_total).map(|(a, b)| a * b).sum();
        assert!((on_coarse - on_fine).abs() < 1e-12);
        assert_eq!(buf.pending(), 0);
    }

    #[test]
    fn restriction_rejects_mismatched_lengths() {
        let p = prolongation_matrix(
            &build_uniform_mesh(2).unwrap(),
            &build_uniform_mesh(4).unwrap(),
        )
        .unwrap();
        let mut buf = LoadBuffer::new(3, 1);
        assert!(restrict_load(&[1.0, 2.0], &p, 1, &mut buf).is_err());
    }

    #[test]
    fn streams_are_reproducible() {
        let spec = StreamSpec::new(42, 7, 1);
        let a: Vec<f64> = derive_stream(spec)
            .sample_iter(StandardNormal)
            .take(1000)
            .collect();
        let b: Vec<f64> = derive_stream(spec)
            .sample_iter(StandardNormal)
            .take(1000)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn neighbouring_streams_are_uncorrelated() {
        let n = 1000;
        let a: Vec<f64> = derive_stream(StreamSpec::new(42, 0, 0))
            .sample_iter(StandardNormal)
            .take(n)
            .collect();
        let b: Vec<f64> = derive_stream(StreamSpec::new(42, 1, 0))
            .sample_iter(StandardNormal)
            .take(n)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        let rho = cov / (va * vb).sqrt();
        assert!(rho.abs() < 0.05, "{rho}");
        let c: Vec<f64> = derive_stream(StreamSpec::new(42, 0, 1))
            .sample_iter(StandardNormal)
            .take(n)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn pooled_draws_are_normal() {
        let mut draws = Vec::with_capacity(1_000_000);
        for i in 0..100 {
            draws.extend(
                derive_stream(StreamSpec::new(9, i, 0))
                    .sample_iter::<f64, _>(StandardNormal)
                    .take(10_000),
            );
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let m2 = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m3 = draws.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
        let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let skew = m3 / m2.powf(1.5);
        let kurt = m4 / (m2 * m2);
        assert!(skew.abs() < 0.01, "skew {skew}");
        assert!((kurt - 3.0).abs() < 0.03, "kurtosis {kurt}");
    }
}

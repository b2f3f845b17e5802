//! Eigenbasis of the Dirichlet Laplacian on (0, 1) and the fractional
//! Sobolev norms it defines; dense eigen-decomposition of the discrete
//! pencil `(K, M)` for validation.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;

use super::{FemFunction, FemOperators};
use crate::error::{Error, Result};

/// First `modes` eigenpairs `λ_j = (jπ)²`, `e_j(x) = √2 sin(jπx)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpectralBasis {
    modes: usize,
}

impl SpectralBasis {
    pub fn new(modes: usize) -> Result<Self> {
        if modes == 0 {
            return Err(Error::invalid("spectral truncation must be at least 1"));
        }
        Ok(SpectralBasis { modes })
    }

    /// Default truncation `J = 4 n` for a mesh with `n` elements.
    pub fn for_elements(n_elements: usize) -> Self {
        SpectralBasis {
            modes: 4 * n_elements,
        }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// `λ_j` for 1-based `j`.
    pub fn eigenvalue(&self, j: usize) -> f64 {
        let k = j as f64 * PI;
        k * k
    }

    pub fn eigenfunction(&self, j: usize, x: f64) -> f64 {
        SQRT_2 * (j as f64 * PI * x).sin()
    }
}

/// Pairings `⟨φ_i, e_j⟩` on a uniform mesh, stored mode-major.
///
/// For a hat centred at `x_i` with width `h`,
/// `∫ φ_i sin(kx) dx = sin(k x_i) · 4 sin²(kh/2) / (k² h)`, so every entry is
/// closed form and `sin(jπ x_i)` only takes values `sin(mπ/n)`.
#[derive(Debug, Clone)]
pub struct ModalProjector {
    n_elements: usize,
    modes: usize,
    // pairing[(j - 1) * dof + i] = ⟨φ_i, e_j⟩
    pairing: Vec<f64>,
}

impl ModalProjector {
    pub fn new(n_elements: usize, basis: SpectralBasis) -> Self {
        let n = n_elements;
        let dof = n - 1;
        let h = 1.0 / n as f64;
        let sines: Vec<f64> = (0..2 * n)
            .map(|m| (m as f64 * PI / n as f64).sin())
            .collect();
        let mut pairing = Vec::with_capacity(basis.modes() * dof);
        for j in 1..=basis.modes() {
            let k = j as f64 * PI;
            let half = (0.5 * k * h).sin();
            let factor = SQRT_2 * 4.0 * half * half / (k * k * h);
            for i in 1..=dof {
                pairing.push(factor * sines[(j * i) % (2 * n)]);
            }
        }
        ModalProjector {
            n_elements,
            modes: basis.modes(),
            pairing,
        }
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    fn dof(&self) -> usize {
        self.n_elements - 1
    }

    /// Row `j` (1-based): `(⟨φ_i, e_j⟩)_i`.
    pub fn mode_row(&self, j: usize) -> &[f64] {
        let dof = self.dof();
        &self.pairing[(j - 1) * dof..j * dof]
    }

    /// `(⟨w, e_j⟩)_{j ≤ J}` for `w = Σ c_i φ_i`.
    pub fn coefficients_into(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.dof());
        for (j, o) in out.iter_mut().enumerate().take(self.modes) {
            *o = crate::linalg::dot(self.mode_row(j + 1), coeffs);
        }
    }

    pub fn coefficients(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.modes];
        self.coefficients_into(coeffs, &mut out);
        out
    }

    /// Load vector `(⟨g, φ_i⟩)_i` of `g = Σ_j a_j e_j`.
    pub fn synthesize_load_into(&self, modal: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &a) in modal.iter().enumerate().take(self.modes) {
            if a == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(self.mode_row(j + 1)) {
                *o += a * p;
            }
        }
    }
}

pub fn modal_coefficients(w: &FemFunction, basis: SpectralBasis) -> Vec<f64> {
    ModalProjector::new(w.n_elements(), basis).coefficients(w.coeffs())
}

/// Truncated spectral norm with a rigorous bound on what the truncation
/// omits: the true norm lies in `[value, value + tail_bound]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FractionalNorm {
    pub value: f64,
    pub tail_bound: f64,
}

/// `‖w‖_{Ḣ^s} = (Σ_j λ_j^s ⟨w, e_j⟩²)^{1/2}` truncated at `J` modes.
pub fn fractional_norm(w: &FemFunction, s: f64, basis: SpectralBasis) -> Result<FractionalNorm> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::UnsupportedExponent(s));
    }
    let modal = modal_coefficients(w, basis);
    Ok(fractional_norm_from_modal(&modal, s, w.coeffs(), w.h()))
}

pub(crate) fn fractional_norm_from_modal(
    modal: &[f64],
    s: f64,
    coeffs: &[f64],
    h: f64,
) -> FractionalNorm {
    let sum: f64 = modal
        .iter()
        .enumerate()
        .map(|(j, a)| ((j + 1) as f64 * PI).powf(2.0 * s) * a * a)
        .sum();
    // |⟨w, e_j⟩|² ≤ 32 ‖c‖₁² / (j⁴ π⁴ h²) and Σ_{j>J} j^{2s-4} ≤ J^{2s-3} / (3 - 2s)
    let l1: f64 = coeffs.iter().map(|c| c.abs()).sum();
    let modes = modal.len() as f64;
    let tail_sq = 32.0 * l1 * l1 * PI.powf(2.0 * s - 4.0) * modes.powf(2.0 * s - 3.0)
        / ((3.0 - 2.0 * s) * h * h);
    let value = sum.sqrt();
    FractionalNorm {
        value,
        tail_bound: (sum + tail_sq).sqrt() - value,
    }
}

/// Cap on the dof count for the dense eigensolve.
pub const DEFAULT_EIGEN_CAP: usize = 2048;

/// Eigenpairs of `K v = λ M v`, eigenvalues ascending, eigenvectors as
/// M-orthonormal columns.
#[derive(Debug, Clone)]
pub struct DiscreteSpectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

pub fn discrete_eigen(ops: &FemOperators, cap: usize) -> Result<DiscreteSpectrum> {
    let dof = ops.dof();
    if dof > cap {
        return Err(Error::SizeLimit { dof, cap });
    }
    // M = L Lᵀ; L⁻¹ K L⁻ᵀ y = λ y; v = L⁻ᵀ y
    let l = ops.mass_factor().lower_dense();
    let k = ops.stiffness().to_dense();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("mass factor is singular"))?;
    let mut a = &l_inv * k * l_inv.transpose();
    a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let mut order: Vec<usize> = (0..dof).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut y = DMatrix::zeros(dof, dof);
    for (col, &i) in order.iter().enumerate() {
        y.set_column(col, &eig.eigenvectors.column(i));
    }
    let eigenvectors = l_inv.transpose() * y;
    Ok(DiscreteSpectrum {
        eigenvalues,
        eigenvectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_operators, build_uniform_mesh, GAUSS5};
    use crate::linalg::max_abs;

    fn e1(x: f64) -> f64 {
        SQRT_2 * (PI * x).sin()
    }

    /// Oracle: composite 5-point Gauss with 8 sub-intervals per element.
    fn quadrature_pairing(w: &FemFunction, j: usize) -> f64 {
        let n = w.n_elements();
        let h = w.h();
        let sub = 8;
        let hs = h / sub as f64;
        let mut acc = 0.0;
        for e in 0..n * sub {
            let x0 = e as f64 * hs;
            acc += hs
                * GAUSS5.integrate(|t| {
                    let x = x0 + t * hs;
                    w.evaluate(x) * SQRT_2 * (j as f64 * PI * x).sin()
                });
        }
        acc
    }

    #[test]
    fn zero_function_has_zero_modes() {
        let mesh = build_uniform_mesh(8).unwrap();
        let c = modal_coefficients(&FemFunction::zeros(&mesh), SpectralBasis::new(10).unwrap());
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolant_of_first_mode() {
        let mesh = build_uniform_mesh(256).unwrap();
        let w = FemFunction::interpolate(&mesh, e1);
        let c = modal_coefficients(&w, SpectralBasis::new(4).unwrap());
        assert!((c[0] - 1.0).abs() < 1e-4, "{}", c[0]);
        assert!(c[1].abs() < 1e-12);
        assert!((c[0] - quadrature_pairing(&w, 1)).abs() < 1e-12);
    }

    #[test]
    fn closed_form_matches_quadrature_for_rough_functions() {
        let mesh = build_uniform_mesh(7).unwrap();
        let w = FemFunction::new(&mesh, vec![0.3, -1.0, 2.0, 0.1, -0.4, 1.7]).unwrap();
        let c = modal_coefficients(&w, SpectralBasis::new(40).unwrap());
        for j in [1, 2, 5, 13, 14, 15, 40] {
            assert!(
                (c[j - 1] - quadrature_pairing(&w, j)).abs() < 1e-11,
                "mode {j}"
            );
        }
    }

    #[test]
    fn bessel_sums_increase_to_the_l2_norm() {
        let mesh = build_uniform_mesh(16).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        let w = FemFunction::interpolate(&mesh, |x| x * (1.0 - x) * (7.0 * x).cos());
        let norm_sq = ops.mass().quad_form(w.coeffs());
        let c = modal_coefficients(&w, SpectralBasis::new(512).unwrap());
        let mut partial = 0.0;
        let mut prev_gap = f64::INFINITY;
        for (j, a) in c.iter().enumerate() {
            partial += a * a;
            assert!(partial <= norm_sq * (1.0 + 1e-12));
            if (j + 1) % 64 == 0 {
                let gap = norm_sq - partial;
                assert!(gap <= prev_gap);
                prev_gap = gap;
            }
        }
        assert!((norm_sq - partial) / norm_sq < 1e-6);
    }

    #[test]
    fn zeroth_order_norm_matches_mass_matrix() {
        let mesh = build_uniform_mesh(32).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        for w in [
            FemFunction::interpolate(&mesh, e1),
            FemFunction::interpolate(&mesh, |x| (x * (1.0 - x)).powi(2) * (1.0 + 3.0 * x)),
        ] {
            let fno = fractional_norm(&w, 0.0, SpectralBasis::for_elements(32)).unwrap();
            assert!((fno.value - w.l2_norm(&ops)).abs() < 1e-6);
        }
    }

    #[test]
    fn tail_bound_brackets_the_mass_norm_for_rough_functions() {
        let mesh = build_uniform_mesh(32).unwrap();
        let ops = assemble_operators(&mesh).unwrap();
        let coeffs = (0..31)
            .map(|i| if i % 2 == 0 { 1.0 } else { -0.5 })
            .collect();
        let w = FemFunction::new(&mesh, coeffs).unwrap();
        let fno = fractional_norm(&w, 0.0, SpectralBasis::for_elements(32)).unwrap();
        let exact = w.l2_norm(&ops);
        assert!(fno.value <= exact + 1e-12);
        assert!(exact <= fno.value + fno.tail_bound);
    }

    #[test]
    fn fractional_norms_of_first_mode() {
        let mesh = build_uniform_mesh(256).unwrap();
        let w = FemFunction::interpolate(&mesh, e1);
        let basis = SpectralBasis::new(1024).unwrap();
        let minus_one = fractional_norm(&w, -1.0, basis).unwrap().value;
        assert!((minus_one - 1.0 / PI).abs() < 1e-4);
        for s in [-1.0, 0.0, 1.0] {
            let v = fractional_norm(&w, s, basis).unwrap().value;
            assert!((v / PI.powf(s) - 1.0).abs() < 0.02, "s = {s}: {v}");
        }
        let zero = FemFunction::zeros(&mesh);
        for s in [-1.0, -0.5, 0.0, 0.75, 1.0] {
            assert_eq!(fractional_norm(&zero, s, basis).unwrap().value, 0.0);
        }
    }

    #[test]
    fn exponent_out_of_range() {
        let mesh = build_uniform_mesh(4).unwrap();
        let w = FemFunction::zeros(&mesh);
        let basis = SpectralBasis::new(4).unwrap();
        assert!(matches!(
            fractional_norm(&w, 1.5, basis),
            Err(Error::UnsupportedExponent(_))
        ));
        assert!(matches!(
            fractional_norm(&w, -1.01, basis),
            Err(Error::UnsupportedExponent(_))
        ));
    }

    #[test]
    fn synthesized_load_is_the_pairing() {
        let mesh = build_uniform_mesh(8).unwrap();
        let basis = SpectralBasis::new(5).unwrap();
        let proj = ModalProjector::new(8, basis);
        let modal = [0.3, 0.0, -1.2, 0.5, 2.0];
        let mut load = vec![0.0; 7];
        proj.synthesize_load_into(&modal, &mut load);
        // ⟨g, φ_i⟩ by quadrature of g = Σ a_j e_j against each hat
        for i in 0..7 {
            let mut c = vec![0.0; 7];
            c[i] = 1.0;
            let hat = FemFunction::new(&mesh, c).unwrap();
            let direct: f64 = modal
                .iter()
                .enumerate()
                .map(|(j, a)| a * quadrature_pairing(&hat, j + 1))
                .sum();
            assert!((load[i] - direct).abs() < 1e-12);
        }
    }

    /// Closed-form eigenvalues of the uniform P1 pencil.
    fn analytic_discrete_eigenvalue(k: usize, n: usize) -> f64 {
        let h = 1.0 / n as f64;
        let c = (k as f64 * PI * h).cos();
        6.0 / (h * h) * (1.0 - c) / (2.0 + c)
    }

    #[test]
    fn discrete_spectrum_matches_closed_form() {
        let ops = assemble_operators(&build_uniform_mesh(8).unwrap()).unwrap();
        let spec = discrete_eigen(&ops, DEFAULT_EIGEN_CAP).unwrap();
        for (k, &lam) in spec.eigenvalues.iter().enumerate() {
            let exact = analytic_discrete_eigenvalue(k + 1, 8);
            assert!((lam - exact).abs() / exact < 1e-10);
        }
        let h = 0.125;
        assert!(*spec.eigenvalues.last().unwrap() <= 12.0 / (h * h));
        let v = &spec.eigenvectors;
        let m = ops.mass().to_dense();
        let k = ops.stiffness().to_dense();
        let gram = v.transpose() * &m * v;
        assert!(max_abs(&(gram - DMatrix::identity(7, 7))) < 1e-8);
        let lam = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(spec.eigenvalues.clone()));
        assert!(max_abs(&(&k * v - &m * v * lam)) < 1e-8 * spec.eigenvalues[6]);
    }

    #[test]
    fn smallest_eigenvalue_converges_to_pi_squared() {
        let mut errs = Vec::new();
        for n in [8, 16, 32] {
            let ops = assemble_operators(&build_uniform_mesh(n).unwrap()).unwrap();
            let spec = discrete_eigen(&ops, DEFAULT_EIGEN_CAP).unwrap();
            errs.push(spec.eigenvalues[0] - PI * PI);
        }
        assert!(errs.iter().all(|&e| e > 0.0));
        assert!(((errs[0] / errs[1]).log2() - 2.0).abs() < 0.05);
        assert!(((errs[1] / errs[2]).log2() - 2.0).abs() < 0.05);
    }

    #[test]
    fn single_dof_pencil() {
        let ops = assemble_operators(&build_uniform_mesh(2).unwrap()).unwrap();
        let spec = discrete_eigen(&ops, DEFAULT_EIGEN_CAP).unwrap();
        let h = 0.5;
        let expected = (2.0 / h) / (4.0 * h / 6.0);
        assert!((spec.eigenvalues[0] - expected).abs() < 1e-12);
        assert!((spec.eigenvalues[0] - analytic_discrete_eigenvalue(1, 2)).abs() < 1e-12);
    }

    #[test]
    fn dense_solve_respects_cap() {
        let ops = assemble_operators(&build_uniform_mesh(64).unwrap()).unwrap();
        assert!(matches!(
            discrete_eigen(&ops, 10),
            Err(Error::SizeLimit { dof: 63, cap: 10 })
        ));
    }

    #[test]
    fn inverse_inequality_across_meshes() {
        for n in [4, 16, 64, 256, 512] {
            let ops = assemble_operators(&build_uniform_mesh(n).unwrap()).unwrap();
            let h = 1.0 / n as f64;
            let lam_max = *discrete_eigen(&ops, DEFAULT_EIGEN_CAP)
                .unwrap()
                .eigenvalues
                .last()
                .unwrap();
            assert!(lam_max * h * h <= 12.1, "n = {n}");
        }
    }
}

//! Uniform 1-D meshes on (0, 1) and continuous piecewise linear (P1)
//! finite elements with homogeneous Dirichlet conditions.
//!
//! Degrees of freedom are the interior nodes: node `k` (for `1 ≤ k ≤ n-1`)
//! carries dof `k - 1`. A [`FemFunction`] stores nodal values, which for P1
//! are also the basis coefficients.

pub mod quadrature;
mod spectral;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Error, Result};
use crate::linalg::{CsrMatrix, SymTridiag, TridiagCholesky};

pub use quadrature::{Rule, GAUSS3, GAUSS5};
pub use spectral::{
    discrete_eigen, fractional_norm, modal_coefficients, DiscreteSpectrum, FractionalNorm,
    ModalProjector, SpectralBasis, DEFAULT_EIGEN_CAP,
};

/// Uniform mesh of (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh1D {
    n_elements: usize,
    h: f64,
    nodes: Vec<f64>,
}

pub fn build_uniform_mesh(n_elements: usize) -> Result<Mesh1D> {
    if n_elements < 2 {
        return Err(Error::invalid(format!(
            "a mesh needs at least 2 elements, got {n_elements}"
        )));
    }
    let n = n_elements as f64;
    let nodes = (0..=n_elements).map(|k| k as f64 / n).collect();
    Ok(Mesh1D {
        n_elements,
        h: 1.0 / n,
        nodes,
    })
}

impl Mesh1D {
    /// Mesh with width `h`; `1/h` must be an integer.
    pub fn from_width(h: f64) -> Result<Mesh1D> {
        if !(h > 0.0 && h <= 0.5) {
            return Err(Error::invalid(format!(
                "mesh width must lie in (0, 1/2], got {h}"
            )));
        }
        let n = (1.0 / h).round();
        if (n * h - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "1/h must be an integer, got h = {h}"
            )));
        }
        build_uniform_mesh(n as usize)
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn interior_dof(&self) -> usize {
        self.n_elements - 1
    }

    pub fn interior_nodes(&self) -> &[f64] {
        &self.nodes[1..self.n_elements]
    }
}

/// P1 function on a uniform mesh, identified by its element count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FemFunction {
    n_elements: usize,
    coeffs: Vec<f64>,
}

impl FemFunction {
    pub fn new(mesh: &Mesh1D, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != mesh.interior_dof() {
            return Err(Error::invalid(format!(
                "coefficient vector has length {}, mesh has {} interior dof",
                coeffs.len(),
                mesh.interior_dof()
            )));
        }
        Ok(FemFunction {
            n_elements: mesh.n_elements(),
            coeffs,
        })
    }

    pub fn zeros(mesh: &Mesh1D) -> Self {
        FemFunction {
            n_elements: mesh.n_elements(),
            coeffs: vec![0.0; mesh.interior_dof()],
        }
    }

    /// Nodal interpolant of `f` (boundary values are dropped).
    pub fn interpolate(mesh: &Mesh1D, f: impl Fn(f64) -> f64) -> Self {
        FemFunction {
            n_elements: mesh.n_elements(),
            coeffs: mesh.interior_nodes().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_elements as f64
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Values at the two endpoints of element `e`.
    #[inline]
    pub fn element_values(&self, e: usize) -> (f64, f64) {
        element_values(&self.coeffs, e)
    }

    /// Point evaluation; `x` outside [0, 1] evaluates to 0.
    pub fn evaluate(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        let n = self.n_elements;
        let t = x * n as f64;
        let e = (t.floor() as usize).min(n - 1);
        let xi = t - e as f64;
        let (l, r) = self.element_values(e);
        l * (1.0 - xi) + r * xi
    }

    /// Nodal values including the two zero boundary values.
    pub fn nodal_values_with_boundary(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.coeffs.len() + 2);
        out.push(0.0);
        out.extend_from_slice(&self.coeffs);
        out.push(0.0);
        out
    }

    pub fn l2_norm(&self, ops: &FemOperators) -> f64 {
        ops.mass().quad_form(&self.coeffs).max(0.0).sqrt()
    }
}

#[inline]
pub(crate) fn element_values(coeffs: &[f64], e: usize) -> (f64, f64) {
    let n_dof = coeffs.len();
    let left = if e >= 1 { coeffs[e - 1] } else { 0.0 };
    let right = if e < n_dof { coeffs[e] } else { 0.0 };
    (left, right)
}

/// Mass and stiffness matrices of the interior P1 space, with the mass
/// matrix factorized.
#[derive(Debug, Clone)]
pub struct FemOperators {
    mesh: Mesh1D,
    mass: SymTridiag,
    stiffness: SymTridiag,
    mass_factor: TridiagCholesky,
}

/// Exact element integration of hat-function products:
/// `M_e = h/6 [[2, 1], [1, 2]]`, `K_e = 1/h [[1, -1], [-1, 1]]`.
pub fn assemble_operators(mesh: &Mesh1D) -> Result<FemOperators> {
    let n = mesh.n_elements();
    let dof = mesh.interior_dof();
    let h = mesh.h();
    let m_local = [[2.0 * h / 6.0, h / 6.0], [h / 6.0, 2.0 * h / 6.0]];
    let k_local = [[1.0 / h, -1.0 / h], [-1.0 / h, 1.0 / h]];

    let mut m_diag = vec![0.0; dof];
    let mut m_off = vec![0.0; dof - 1];
    let mut k_diag = vec![0.0; dof];
    let mut k_off = vec![0.0; dof - 1];
    for e in 0..n {
        // local node a ∈ {0, 1} is global node e + a, dof e + a - 1
        let dofs = [e.checked_sub(1), if e < dof { Some(e) } else { None }];
        for a in 0..2 {
            let Some(i) = dofs[a] else { continue };
            m_diag[i] += m_local[a][a];
            k_diag[i] += k_local[a][a];
        }
        if let (Some(i), Some(_)) = (dofs[0], dofs[1]) {
            m_off[i] += m_local[0][1];
            k_off[i] += k_local[0][1];
        }
    }
    let mass = SymTridiag::new(m_diag, m_off)?;
    let stiffness = SymTridiag::new(k_diag, k_off)?;
    let mass_factor = mass.cholesky()?;
    Ok(FemOperators {
        mesh: mesh.clone(),
        mass,
        stiffness,
        mass_factor,
    })
}

impl FemOperators {
    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn dof(&self) -> usize {
        self.mesh.interior_dof()
    }

    pub fn mass(&self) -> &SymTridiag {
        &self.mass
    }

    pub fn stiffness(&self) -> &SymTridiag {
        &self.stiffness
    }

    pub fn mass_factor(&self) -> &TridiagCholesky {
        &self.mass_factor
    }

    /// Coefficients of the function whose load vector is `load`
    /// (`c = M⁻¹ b`).
    pub fn load_to_function(&self, load: &[f64]) -> FemFunction {
        FemFunction {
            n_elements: self.mesh.n_elements(),
            coeffs: self.mass_factor.solve(load),
        }
    }

    /// Discrete Laplacian `Λ_h c = M⁻¹ K c`.
    pub fn apply_discrete_laplacian(&self, c: &[f64]) -> Vec<f64> {
        let mut out = self.stiffness.mul_vec(c);
        self.mass_factor.solve_in_place(&mut out);
        out
    }
}

/// Load vector `b_i = ∫ g φ_i`, with `g` given per element as
/// `g(element, local ξ ∈ [0,1], x)` and integrated by `rule`.
pub fn assemble_load<G>(mesh: &Mesh1D, rule: Rule, mut g: G) -> Result<Vec<f64>>
where
    G: FnMut(usize, f64, f64) -> f64,
{
    let mut out = vec![0.0; mesh.interior_dof()];
    assemble_load_into(mesh, rule, &mut g, &mut out)?;
    Ok(out)
}

pub(crate) fn assemble_load_into<G>(
    mesh: &Mesh1D,
    rule: Rule,
    g: &mut G,
    out: &mut [f64],
) -> Result<()>
where
    G: FnMut(usize, f64, f64) -> f64,
{
    let n = mesh.n_elements();
    let dof = mesh.interior_dof();
    let h = mesh.h();
    out.iter_mut().for_each(|o| *o = 0.0);
    for e in 0..n {
        let x0 = e as f64 * h;
        let mut left = 0.0;
        let mut right = 0.0;
        for (&xi, &w) in rule.points.iter().zip(rule.weights) {
            let val = g(e, xi, x0 + xi * h);
            if !val.is_finite() {
                return Err(Error::NonFinite {
                    context: "load integrand (element index)".into(),
                    index: e,
                });
            }
            left += w * val * (1.0 - xi);
            right += w * val * xi;
        }
        if e >= 1 {
            out[e - 1] += h * left;
        }
        if e < dof {
            out[e] += h * right;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// Generalized L² projection: solve `M c = (∫ f φ_i)_i`.
    L2,
    /// Nodal interpolation.
    Nodal,
}

pub fn project_initial_data(
    ops: &FemOperators,
    f: impl Fn(f64) -> f64,
    mode: ProjectionMode,
) -> Result<FemFunction> {
    let mesh = ops.mesh();
    match mode {
        ProjectionMode::Nodal => {
            let w = FemFunction::interpolate(mesh, f);
            check_finite(w.coeffs(), "nodal values of initial data")?;
            Ok(w)
        }
        ProjectionMode::L2 => {
            let load = assemble_load(mesh, GAUSS3, |_, _, x| f(x))?;
            Ok(ops.load_to_function(&load))
        }
    }
}

/// Prolongation from a coarse to a nested fine uniform mesh: column `i` is
/// coarse hat `i` written in the fine basis.
pub fn prolongation_matrix(coarse: &Mesh1D, fine: &Mesh1D) -> Result<CsrMatrix> {
    let nc = coarse.n_elements();
    let nf = fine.n_elements();
    if nf < nc || !nf.is_multiple_of(nc) {
        return Err(Error::invalid(format!(
            "meshes are not nested: fine {nf} elements is not a multiple of coarse {nc}"
        )));
    }
    let ratio = nf / nc;
    let rows = (1..nf)
        .map(|k| {
            // fine node k lies in coarse element k / ratio
            let e = k / ratio;
            let offset = k % ratio;
            if offset == 0 {
                vec![(e - 1, 1.0)]
            } else {
                let xi = offset as f64 / ratio as f64;
                let mut row = Vec::with_capacity(2);
                if e >= 1 {
                    row.push((e - 1, 1.0 - xi));
                }
                if e < nc - 1 {
                    row.push((e, xi));
                }
                row
            }
        })
        .collect();
    Ok(CsrMatrix::from_rows(nc - 1, rows))
}

/// Coarse function expressed on a nested fine mesh.
pub fn prolong(w: &FemFunction, fine: &Mesh1D) -> Result<FemFunction> {
    if w.n_elements() == fine.n_elements() {
        return Ok(w.clone());
    }
    let coarse = build_uniform_mesh(w.n_elements())?;
    let p = prolongation_matrix(&coarse, fine)?;
    FemFunction::new(fine, p.mul_vec(w.coeffs()))
}

/// ‖w − g‖_{L²} by 5-point Gauss quadrature per element.
pub fn l2_distance_to(w: &FemFunction, g: impl Fn(f64) -> f64) -> f64 {
    let n = w.n_elements();
    let h = w.h();
    let mut acc = 0.0;
    for e in 0..n {
        let (l, r) = w.element_values(e);
        let x0 = e as f64 * h;
        acc += h * GAUSS5.integrate(|xi| {
            let d = l * (1.0 - xi) + r * xi - g(x0 + xi * h);
            d * d
        });
    }
    acc.sqrt()
}

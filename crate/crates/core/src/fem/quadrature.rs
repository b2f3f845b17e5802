//! Gauss–Legendre rules on the reference interval [0, 1].

/// A quadrature rule as (points, weights) on [0, 1]; weights sum to 1.
#[derive(Debug, Clone, Copy)]
pub struct Rule {
    pub points: &'static [f64],
    pub weights: &'static [f64],
}

const G3_A: f64 = 0.112_701_665_379_258_31; // (1 - sqrt(3/5)) / 2
const G3_B: f64 = 0.887_298_334_620_741_7;

/// 3-point rule, exact for polynomials of degree ≤ 5.
pub const GAUSS3: Rule = Rule {
    points: &[G3_A, 0.5, G3_B],
    weights: &[5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0],
};

/// 5-point rule, exact for polynomials of degree ≤ 9.
pub const GAUSS5: Rule = Rule {
    points: &[
        0.046_910_077_030_668_004,
        0.230_765_344_947_158_45,
        0.5,
        0.769_234_655_052_841_6,
        0.953_089_922_969_332,
    ],
    weights: &[
        0.118_463_442_528_094_54,
        0.239_314_335_249_683_23,
        0.284_444_444_444_444_43,
        0.239_314_335_249_683_23,
        0.118_463_442_528_094_54,
    ],
};

impl Rule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ∫₀¹ f
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points
            .iter()
            .zip(self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

//! Radial basis function families and the differential quantities needed to
//! assemble collocation operators.
//!
//! Every supported kernel is written as `φ(r) = g(s)` with `s = r²`. Spatial
//! derivatives at an offset `x` then follow from `g'` and `g''`:
//!
//! ```text
//! ∂φ/∂x_i   = 2 x_i g'(s)
//! ∂²φ/∂x_i² = 2 g'(s) + 4 x_i² g''(s)
//! ∇²φ       = 2 d g'(s) + 4 s g''(s)
//! ```

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    /// `sqrt(r² + ε²)`
    Multiquadric,
    /// `1 / sqrt(r² + ε²)`
    InverseMultiquadric,
    /// `exp(-(ε r)²)`
    Gaussian,
    /// `r² log r`, with value 0 at the origin. Not usable for collocation.
    ThinPlateSpline,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Multiquadric => "multiquadric",
            KernelFamily::InverseMultiquadric => "inverse_multiquadric",
            KernelFamily::Gaussian => "gaussian",
            KernelFamily::ThinPlateSpline => "thin_plate_spline",
        }
    }

    pub fn uses_epsilon(self) -> bool {
        !matches!(self, KernelFamily::ThinPlateSpline)
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A kernel family together with its shape parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernel")]
pub struct RadialKernel {
    family: KernelFamily,
    epsilon: f64,
}

#[derive(Deserialize)]
struct RawKernel {
    family: KernelFamily,
    #[serde(default = "one")]
    epsilon: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawKernel> for RadialKernel {
    type Error = Error;

    fn try_from(raw: RawKernel) -> Result<Self> {
        RadialKernel::new(raw.family, raw.epsilon)
    }
}

impl RadialKernel {
    pub fn new(family: KernelFamily, epsilon: f64) -> Result<Self> {
        if family.uses_epsilon() {
            ensure!(
                epsilon.is_finite() && epsilon > 0.0,
                Argument,
                "shape parameter must be positive and finite, got {epsilon}"
            );
        }
        Ok(Self { family, epsilon })
    }

    pub fn multiquadric(epsilon: f64) -> Result<Self> {
        Self::new(KernelFamily::Multiquadric, epsilon)
    }

    pub fn inverse_multiquadric(epsilon: f64) -> Result<Self> {
        Self::new(KernelFamily::InverseMultiquadric, epsilon)
    }

    pub fn gaussian(epsilon: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, epsilon)
    }

    pub fn thin_plate_spline() -> Self {
        Self {
            family: KernelFamily::ThinPlateSpline,
            epsilon: 1.0,
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `φ(r)`; rejects negative radii.
    pub fn eval(&self, r: f64) -> Result<f64> {
        ensure!(r >= 0.0, Argument, "radius must be nonnegative, got {r}");
        Ok(self.value_sq(r * r))
    }

    /// `φ` as a function of the squared radius. No argument checks.
    #[inline]
    pub fn value_sq(&self, s: f64) -> f64 {
        let e2 = self.epsilon * self.epsilon;
        match self.family {
            KernelFamily::Multiquadric => (s + e2).sqrt(),
            KernelFamily::InverseMultiquadric => 1.0 / (s + e2).sqrt(),
            KernelFamily::Gaussian => (-e2 * s).exp(),
            KernelFamily::ThinPlateSpline => {
                if s == 0.0 {
                    0.0
                } else {
                    0.5 * s * s.ln()
                }
            }
        }
    }

    /// `(g'(s), g''(s))` for `φ(r) = g(r²)`.
    fn radial_derivatives(&self, s: f64) -> Result<(f64, f64)> {
        let e2 = self.epsilon * self.epsilon;
        Ok(match self.family {
            KernelFamily::Multiquadric => {
                let phi = (s + e2).sqrt();
                (0.5 / phi, -0.25 / (phi * phi * phi))
            }
            KernelFamily::InverseMultiquadric => {
                let phi = 1.0 / (s + e2).sqrt();
                let phi3 = phi * phi * phi;
                (-0.5 * phi3, 0.75 * phi3 * phi * phi)
            }
            KernelFamily::Gaussian => {
                let phi = (-e2 * s).exp();
                (-e2 * phi, e2 * e2 * phi)
            }
            KernelFamily::ThinPlateSpline => {
                if s == 0.0 {
                    return Err(Error::Domain(
                        "thin-plate spline is not twice differentiable at zero offset".into(),
                    ));
                }
                (0.5 * (s.ln() + 1.0), 0.5 / s)
            }
        })
    }

    /// Gradient of `x ↦ φ(‖x‖)` at `offset`.
    pub fn gradient(&self, offset: &[f64]) -> Result<Vec<f64>> {
        let s = squared_norm(offset);
        let (g1, _) = self.radial_derivatives(s)?;
        Ok(offset.iter().map(|x| 2.0 * x * g1).collect())
    }

    /// Laplacian of `x ↦ φ(‖x‖)` at `offset`.
    pub fn laplacian(&self, offset: &[f64]) -> Result<f64> {
        let s = squared_norm(offset);
        let (g1, g2) = self.radial_derivatives(s)?;
        Ok(2.0 * offset.len() as f64 * g1 + 4.0 * s * g2)
    }

    /// Value, gradient and Laplacian at `offset` in one pass.
    pub fn differentials(&self, offset: &[f64]) -> Result<KernelDifferentials> {
        let s = squared_norm(offset);
        let (g1, g2) = self.radial_derivatives(s)?;
        Ok(KernelDifferentials {
            value: self.value_sq(s),
            gradient: offset.iter().map(|x| 2.0 * x * g1).collect(),
            laplacian: 2.0 * offset.len() as f64 * g1 + 4.0 * s * g2,
        })
    }
}

impl fmt::Display for RadialKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.family.uses_epsilon() {
            write!(f, "{}(eps={})", self.family, self.epsilon)
        } else {
            write!(f, "{}", self.family)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelDifferentials {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub laplacian: f64,
}

#[inline]
pub(crate) fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Linear second-order spatial operator
/// `L u = a(x)·∇u + c(x) ∇²u + r(x) u`.
#[derive(Clone)]
pub struct LinearOperatorSpec {
    dim: usize,
    convection: Option<VectorField>,
    diffusion: Option<ScalarField>,
    reaction: Option<ScalarField>,
}

impl fmt::Debug for LinearOperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearOperatorSpec")
            .field("dim", &self.dim)
            .field("convection", &self.convection.is_some())
            .field("diffusion", &self.diffusion.is_some())
            .field("reaction", &self.reaction.is_some())
            .finish()
    }
}

impl LinearOperatorSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            convection: None,
            diffusion: None,
            reaction: None,
        }
    }

    pub fn new(dim: usize, convection: VectorField, diffusion: ScalarField) -> Self {
        Self {
            dim,
            convection: Some(convection),
            diffusion: Some(diffusion),
            reaction: None,
        }
    }

    /// Constant-coefficient diffusion `κ ∇²`.
    pub fn diffusion(dim: usize, kappa: f64) -> Self {
        Self::zero(dim).with_diffusion(Arc::new(move |_| kappa))
    }

    pub fn with_convection(mut self, field: VectorField) -> Self {
        self.convection = Some(field);
        self
    }

    pub fn with_diffusion(mut self, field: ScalarField) -> Self {
        self.diffusion = Some(field);
        self
    }

    pub fn with_reaction(mut self, field: ScalarField) -> Self {
        self.reaction = Some(field);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_zero(&self) -> bool {
        self.convection.is_none() && self.diffusion.is_none() && self.reaction.is_none()
    }

    /// Operator whose coefficient fields are the pointwise sums of both operands.
    pub fn sum(&self, other: &LinearOperatorSpec) -> Result<LinearOperatorSpec> {
        ensure!(
            self.dim == other.dim,
            Argument,
            "cannot add operators of dimension {} and {}",
            self.dim,
            other.dim
        );
        fn add_scalar(a: &Option<ScalarField>, b: &Option<ScalarField>) -> Option<ScalarField> {
            match (a.clone(), b.clone()) {
                (None, None) => None,
                (Some(f), None) | (None, Some(f)) => Some(f),
                (Some(f), Some(g)) => Some(Arc::new(move |x: &[f64]| f(x) + g(x))),
            }
        }
        let convection = match (self.convection.clone(), other.convection.clone()) {
            (None, None) => None,
            (Some(f), None) | (None, Some(f)) => Some(f),
            (Some(f), Some(g)) => Some(Arc::new(move |x: &[f64]| {
                f(x).iter().zip(g(x)).map(|(a, b)| a + b).collect()
            }) as VectorField),
        };
        Ok(LinearOperatorSpec {
            dim: self.dim,
            convection,
            diffusion: add_scalar(&self.diffusion, &other.diffusion),
            reaction: add_scalar(&self.reaction, &other.reaction),
        })
    }

    pub fn convection_at(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.convection.as_ref().map(|f| f(x))
    }

    pub fn diffusion_at(&self, x: &[f64]) -> f64 {
        self.diffusion.as_ref().map_or(0.0, |f| f(x))
    }

    pub fn reaction_at(&self, x: &[f64]) -> f64 {
        self.reaction.as_ref().map_or(0.0, |f| f(x))
    }
}

/// `L φ(‖x − center‖)` evaluated at `x = eval_point`.
pub fn kernel_operator_apply(
    kernel: &RadialKernel,
    op: &LinearOperatorSpec,
    center: &[f64],
    eval_point: &[f64],
) -> Result<f64> {
    ensure!(
        center.len() == eval_point.len(),
        Argument,
        "center has dimension {} but evaluation point has {}",
        center.len(),
        eval_point.len()
    );
    ensure!(
        op.dim() == center.len(),
        Argument,
        "operator dimension {} does not match point dimension {}",
        op.dim(),
        center.len()
    );
    if op.is_zero() {
        return Ok(0.0);
    }
    let offset: Vec<f64> = eval_point.iter().zip(center).map(|(x, c)| x - c).collect();
    let diff = kernel.differentials(&offset)?;

    let mut out = 0.0;
    if let Some(a) = op.convection_at(eval_point) {
        ensure!(
            a.len() == offset.len(),
            Argument,
            "convection field returned {} components for a {}-dimensional point",
            a.len(),
            offset.len()
        );
        out += a.iter().zip(&diff.gradient).map(|(a, g)| a * g).sum::<f64>();
    }
    out += op.diffusion_at(eval_point) * diff.laplacian;
    out += op.reaction_at(eval_point) * diff.value;
    Ok(out)
}

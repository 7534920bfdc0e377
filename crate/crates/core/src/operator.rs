//! Operator specifications: diffusion tensors, jump kernels and scale functions.

use std::fmt;
use std::sync::Arc;

use crate::error::FormError;
use crate::quad;

/// 2x2 symmetric tensor stored row-major; 1D operators read only `[0][0]`.
pub type Tensor = [[f64; 2]; 2];

type TensorFn = Arc<dyn Fn(&[f64]) -> Tensor + Send + Sync>;
type PairFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Coefficient field of a local divergence-form operator.
#[derive(Clone)]
pub enum DiffusionTensor {
    Constant(f64),
    Field(TensorFn),
}

impl DiffusionTensor {
    pub fn at(&self, x: &[f64]) -> Tensor {
        match self {
            Self::Constant(c) => [[*c, 0.0], [0.0, *c]],
            Self::Field(f) => f(x),
        }
    }
}

impl fmt::Debug for DiffusionTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "DiffusionTensor::Constant({c})"),
            Self::Field(_) => f.write_str("DiffusionTensor::Field(..)"),
        }
    }
}

/// Symmetric jump-kernel coefficient `a(x, y)` with declared bounds.
#[derive(Clone)]
pub enum KernelCoefficient {
    Constant(f64),
    Field { func: PairFn, lower: f64, upper: f64 },
}

impl KernelCoefficient {
    pub fn at(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Self::Constant(c) => *c,
            Self::Field { func, .. } => func(x, y),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Constant(c) => (*c, *c),
            Self::Field { lower, upper, .. } => (*lower, *upper),
        }
    }
}

impl fmt::Debug for KernelCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "KernelCoefficient::Constant({c})"),
            Self::Field { lower, upper, .. } => {
                write!(f, "KernelCoefficient::Field([{lower}, {upper}])")
            }
        }
    }
}

/// Radial scale of a jump kernel `a / (r^d phi(r))`.
#[derive(Clone)]
pub enum ScaleFunction {
    /// `phi(r) = r^(2 alpha)`.
    Power { alpha: f64 },
    /// `1 / phi(r) = sum_k weight_k r^(-2 alpha_k)`.
    Mixed { components: Vec<(f64, f64)> },
    Custom(RadialFn),
}

impl ScaleFunction {
    pub fn custom(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::Custom(Arc::new(f))
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            Self::Power { alpha } => r.powf(2.0 * alpha),
            Self::Mixed { components } => {
                1.0 / components.iter().map(|(a, w)| w * r.powf(-2.0 * a)).sum::<f64>()
            }
            Self::Custom(f) => f(r),
        }
    }

    /// `int_r^inf ds / (s phi(s))`.
    pub fn tail(&self, r: f64) -> Result<f64, FormError> {
        match self {
            Self::Power { alpha } => Ok(r.powf(-2.0 * alpha) / (2.0 * alpha)),
            Self::Mixed { components } => Ok(components
                .iter()
                .map(|(a, w)| w * r.powf(-2.0 * a) / (2.0 * a))
                .sum()),
            Self::Custom(f) => quad::tail_integral(|s| f(s), r)
                .ok_or_else(|| FormError::InvalidScale(format!("tail integral diverges at r = {r}"))),
        }
    }

    /// `int_0^r s / phi(s) ds`.
    pub fn core(&self, r: f64) -> Result<f64, FormError> {
        match self {
            Self::Power { alpha } => Ok(r.powf(2.0 - 2.0 * alpha) / (2.0 - 2.0 * alpha)),
            Self::Mixed { components } => Ok(components
                .iter()
                .map(|(a, w)| w * r.powf(2.0 - 2.0 * a) / (2.0 - 2.0 * a))
                .sum()),
            Self::Custom(f) => quad::core_integral(|s| f(s), r)
                .ok_or_else(|| FormError::InvalidScale(format!("core integral diverges at r = {r}"))),
        }
    }

    pub(crate) fn validate(&self) -> Result<(), FormError> {
        match self {
            Self::Power { alpha } => check_alpha(*alpha),
            Self::Mixed { components } => {
                if components.is_empty() {
                    return Err(FormError::InvalidScale("mixing measure is empty".into()));
                }
                for &(a, w) in components {
                    check_alpha(a)?;
                    if !(w.is_finite() && w > 0.0) {
                        return Err(FormError::InvalidScale(format!("mixing weight {w} is not positive")));
                    }
                }
                Ok(())
            }
            Self::Custom(_) => Ok(()),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), FormError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(FormError::AlphaOutOfRange(alpha))
    }
}

impl fmt::Debug for ScaleFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Power { alpha } => write!(f, "ScaleFunction::Power({alpha})"),
            Self::Mixed { components } => write!(f, "ScaleFunction::Mixed({components:?})"),
            Self::Custom(_) => f.write_str("ScaleFunction::Custom(..)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Local,
    Nonlocal,
    Fractional,
    MixedStable,
}

/// Full description of the operator to discretise.
#[derive(Debug, Clone)]
pub enum OperatorSpec {
    Local {
        tensor: DiffusionTensor,
        exterior: bool,
    },
    Nonlocal {
        kind: OperatorKind,
        kernel: KernelCoefficient,
        scale: ScaleFunction,
        exterior: bool,
        near_diagonal_correction: bool,
    },
}

impl OperatorSpec {
    /// Constant-coefficient Laplacian with zero exterior condition.
    pub fn laplacian() -> Self {
        Self::Local { tensor: DiffusionTensor::Constant(1.0), exterior: true }
    }

    /// Kernel `1 / r^(d + 2 alpha)` with zero exterior condition.
    pub fn fractional(alpha: f64) -> Self {
        Self::Nonlocal {
            kind: OperatorKind::Fractional,
            kernel: KernelCoefficient::Constant(1.0),
            scale: ScaleFunction::Power { alpha },
            exterior: true,
            near_diagonal_correction: true,
        }
    }

    /// Superposition of stable kernels, `components = [(alpha_k, weight_k)]`.
    pub fn mixed_stable(components: Vec<(f64, f64)>) -> Self {
        Self::Nonlocal {
            kind: OperatorKind::MixedStable,
            kernel: KernelCoefficient::Constant(1.0),
            scale: ScaleFunction::Mixed { components },
            exterior: true,
            near_diagonal_correction: true,
        }
    }

    pub fn nonlocal(kernel: KernelCoefficient, scale: ScaleFunction) -> Self {
        Self::Nonlocal {
            kind: OperatorKind::Nonlocal,
            kernel,
            scale,
            exterior: true,
            near_diagonal_correction: true,
        }
    }

    pub fn kind(&self) -> OperatorKind {
        match self {
            Self::Local { .. } => OperatorKind::Local,
            Self::Nonlocal { kind, .. } => *kind,
        }
    }

    pub fn with_exterior(mut self, killing: bool) -> Self {
        match &mut self {
            Self::Local { exterior, .. } | Self::Nonlocal { exterior, .. } => *exterior = killing,
        }
        self
    }

    pub fn without_correction(mut self) -> Self {
        if let Self::Nonlocal { near_diagonal_correction, .. } = &mut self {
            *near_diagonal_correction = false;
        }
        self
    }
}

/// Constants found for the structural conditions on a scale function.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConditionReport {
    /// Coefficient bounds `c1 <= a <= c2` (unit kernel when absent).
    pub coefficient_ok: bool,
    pub c1: f64,
    pub c2: f64,
    /// Small-scale integrability `int_0^r s/phi(s) ds <= c3 r^2/phi(r)`.
    pub integrability_ok: bool,
    pub c3: Option<f64>,
    /// Doubling-type growth `c4 (R/r)^d1 <= phi(R)/phi(r) <= c5 (R/r)^d2`.
    pub growth_ok: bool,
    pub c4: f64,
    pub c5: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub monotone: bool,
}

/// Numerically verify the structural conditions on `scale` over the radii `grid`.
///
/// Growth exponents are the extreme log-slopes between grid pairs, so the
/// matching constants are 1. The integrability constant is the largest ratio
/// found on the grid. A non-monotone or non-positive scale is reported, not raised.
pub fn check_kernel_conditions(
    scale: &ScaleFunction,
    kernel: Option<&KernelCoefficient>,
    grid: &[f64],
) -> Result<KernelConditionReport, FormError> {
    if grid.len() < 2 {
        return Err(FormError::InvalidScale("at least two radii are required".into()));
    }
    let mut radii: Vec<f64> = grid.to_vec();
    if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(FormError::InvalidScale("radii must be positive".into()));
    }
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let values: Vec<f64> = radii.iter().map(|&r| scale.eval(r)).collect();
    let positive = values.iter().all(|v| v.is_finite() && *v > 0.0);
    let monotone = positive && values.windows(2).all(|w| w[1] > w[0]);

    let (c1, c2) = kernel.map(KernelCoefficient::bounds).unwrap_or((1.0, 1.0));
    let coefficient_ok = c1 > 0.0 && c1 <= c2 && c2.is_finite();

    let mut c3 = Some(0.0f64);
    if positive {
        for (&r, &v) in radii.iter().zip(&values) {
            match quad::core_integral(|s| scale.eval(s), r) {
                Some(core) => c3 = c3.map(|c| c.max(core * v / (r * r))),
                None => {
                    c3 = None;
                    break;
                }
            }
        }
    } else {
        c3 = None;
    }

    let (mut delta1, mut delta2) = (f64::INFINITY, f64::NEG_INFINITY);
    if positive {
        for i in 0..radii.len() {
            for j in i + 1..radii.len() {
                let slope = (values[j] / values[i]).ln() / (radii[j] / radii[i]).ln();
                delta1 = delta1.min(slope);
                delta2 = delta2.max(slope);
            }
        }
    } else {
        delta1 = f64::NAN;
        delta2 = f64::NAN;
    }
    Ok(KernelConditionReport {
        coefficient_ok,
        c1,
        c2,
        integrability_ok: c3.is_some(),
        c3,
        growth_ok: monotone && delta1 > 0.0,
        c4: 1.0,
        c5: 1.0,
        delta1,
        delta2,
        monotone,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radii() -> Vec<f64> {
        (0..41).map(|k| 10f64.powf(-2.0 + 0.1 * k as f64)).collect()
    }

    #[test]
    fn stable_scale_constants() {
        let report = check_kernel_conditions(&ScaleFunction::Power { alpha: 0.4 }, None, &radii()).unwrap();
        assert!(report.integrability_ok && report.growth_ok);
        assert!((report.c3.unwrap() - 1.0 / 1.2).abs() < 1e-9);
        assert!((report.delta1 - 0.8).abs() < 1e-12 && (report.delta2 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn quadratic_scale_fails_integrability() {
        let report = check_kernel_conditions(&ScaleFunction::custom(|r| r * r), None, &radii()).unwrap();
        assert!(!report.integrability_ok);
        assert!(report.c3.is_none());
    }

    #[test]
    fn linear_scale_has_unit_constant() {
        let report = check_kernel_conditions(&ScaleFunction::custom(|r| r), None, &radii()).unwrap();
        assert!((report.c3.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_monotone_scale_is_reported() {
        let wavy = ScaleFunction::custom(|r| r * (2.0 + (20.0 * r).sin()));
        let report = check_kernel_conditions(&wavy, None, &radii()).unwrap();
        assert!(!report.monotone && !report.growth_ok);
    }

    #[test]
    fn mixed_scale_closed_forms_match_quadrature() {
        let scale = ScaleFunction::Mixed { components: vec![(0.25, 1.0), (0.75, 0.5)] };
        let core = quad::core_integral(|s| scale.eval(s), 0.2).unwrap();
        assert!((scale.core(0.2).unwrap() - core).abs() < 1e-10);
        let tail = quad::tail_integral(|s| scale.eval(s), 0.2).unwrap();
        assert!((scale.tail(0.2).unwrap() - tail).abs() < 1e-9 * tail);
    }
}

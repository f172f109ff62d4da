//! Scalar math shared by the simulation pipelines.

use crate::tensor::TensorF;

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// GELU in the exact erf form: `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * phi(x)
}

/// Derivative of the exact-erf GELU: `Phi(x) + x * phi_pdf(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    phi(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(t: &TensorF) -> TensorF {
    t.map(|v| gelu_scalar(v as f64) as f32)
}

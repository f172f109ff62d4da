//! Uniform affine quantization.
//!
//! A quantizer maps a real value onto an unsigned integer grid,
//! `q = clip(round(x / s) + z; 0, 2^b - 1)`, and approximately recovers it
//! as `x_hat = s * (q - z)`. Rounding is half-away-from-zero throughout so
//! behavior is deterministic across platforms. Symmetric quantizers fix
//! `z = 2^(b-1)` on the unsigned grid, which is the usual signed grid
//! `[-2^(b-1), 2^(b-1) - 1]` shifted into unsigned storage.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::peg::GroupSpec;
use crate::tensor::{Shape, TensorF};

/// Bit-widths the toolkit supports.
pub const SUPPORTED_BITS: [u8; 6] = [2, 3, 4, 6, 8, 16];

/// Scale used when an observed range is degenerate (`min == max == 0`),
/// keeping the integer mapping defined. Constant tensors still quantize
/// losslessly because ranges are zero-extended before scale derivation.
pub const DEGENERATE_SCALE: f64 = 1e-8;

/// Parameters of one uniform affine quantizer: bit-width, scale,
/// zero-point, symmetry flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    bits: u8,
    scale: f64,
    zero_point: u32,
    symmetric: bool,
}

impl QParams {
    pub fn new(bits: u8, scale: f64, zero_point: u32, symmetric: bool) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(CoreError::InvalidQParams(format!(
                "unsupported bit-width {bits}"
            )));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(CoreError::InvalidQParams(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        let qmax = (1u32 << bits) - 1;
        if zero_point > qmax {
            return Err(CoreError::InvalidQParams(format!(
                "zero-point {zero_point} outside [0, {qmax}]"
            )));
        }
        if symmetric && zero_point != 1u32 << (bits - 1) {
            return Err(CoreError::InvalidQParams(format!(
                "symmetric zero-point must be {}, got {zero_point}",
                1u32 << (bits - 1)
            )));
        }
        Ok(QParams {
            bits,
            scale,
            zero_point,
            symmetric,
        })
    }

    /// Derive parameters from an observed `[min, max]` range.
    ///
    /// Asymmetric ranges are first extended to contain zero so that zero is
    /// exactly representable; `s = (max - min) / (2^b - 1)` and
    /// `z = clip(round(-min / s); 0, 2^b - 1)`. Symmetric ranges use
    /// `s = max(|min|, |max|) / (2^(b-1) - 1)`.
    pub fn from_range(min: f64, max: f64, bits: u8, symmetric: bool) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min <= max) {
            return Err(CoreError::InvalidQParams(format!(
                "invalid range [{min}, {max}]"
            )));
        }
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(CoreError::InvalidQParams(format!(
                "unsupported bit-width {bits}"
            )));
        }
        let qmax = ((1u32 << bits) - 1) as f64;
        if symmetric {
            let amax = min.abs().max(max.abs());
            let half_levels = ((1u32 << (bits - 1)) - 1) as f64;
            let scale = if amax == 0.0 {
                DEGENERATE_SCALE
            } else {
                amax / half_levels
            };
            QParams::new(bits, scale, 1u32 << (bits - 1), true)
        } else {
            let lo = min.min(0.0);
            let hi = max.max(0.0);
            if hi - lo == 0.0 {
                return QParams::new(bits, DEGENERATE_SCALE, 0, false);
            }
            let scale = (hi - lo) / qmax;
            let zero = (-lo / scale).round().clamp(0.0, qmax) as u32;
            QParams::new(bits, scale, zero, false)
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn zero_point(&self) -> u32 {
        self.zero_point
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn qmax(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Representable real span `[s * (0 - z), s * (qmax - z)]`.
    pub fn grid_span(&self) -> (f64, f64) {
        let z = self.zero_point as f64;
        (
            self.scale * (0.0 - z),
            self.scale * (self.qmax() as f64 - z),
        )
    }

    /// Replace the scale, keeping everything else. Used by learned-range
    /// training updates.
    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        QParams::new(self.bits, scale, self.zero_point, self.symmetric)
    }

    /// `clip(round(x / s) + z; 0, 2^b - 1)`, rounding half away from zero.
    #[inline]
    pub fn quantize_value(&self, x: f32) -> u32 {
        let qmax = self.qmax() as i64;
        let r = (x as f64 / self.scale).round();
        // f64 -> i64 casts saturate, so extreme ratios stay well-defined
        let q = (r as i64).saturating_add(self.zero_point as i64);
        q.clamp(0, qmax) as u32
    }

    /// `s * (q - z)`.
    #[inline]
    pub fn dequantize_value(&self, q: u32) -> f32 {
        (self.scale * (q as i64 - self.zero_point as i64) as f64) as f32
    }

    #[inline]
    pub fn fake_quantize_value(&self, x: f32) -> f32 {
        self.dequantize_value(self.quantize_value(x))
    }

    /// True when `x / s + z` lies inside `[0, 2^b - 1]`, i.e. the value is
    /// not clipped. This is the straight-through pass mask.
    #[inline]
    pub fn in_range(&self, x: f32) -> bool {
        let v = x as f64 / self.scale + self.zero_point as f64;
        (0.0..=self.qmax() as f64).contains(&v)
    }

    /// Per-element contribution of `d x_hat / d s` under the learned-step
    /// surrogate: `round(x/s) - x/s` inside the grid, `-z` below it,
    /// `qmax - z` above it.
    #[inline]
    pub fn scale_grad_value(&self, x: f32) -> f64 {
        let u = x as f64 / self.scale;
        let v = u + self.zero_point as f64;
        if v < 0.0 {
            -(self.zero_point as f64)
        } else if v > self.qmax() as f64 {
            (self.qmax() - self.zero_point) as f64
        } else {
            u.round() - u
        }
    }
}

/// Quantization granularity descriptor, before any parameters exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Granularity {
    /// One `(s, z)` pair for the whole tensor.
    PerTensor,
    /// One pair per embedding dimension, broadcast along the last axis.
    PerEmbedding,
    /// One pair per contiguous group of embedding dimensions.
    PerEmbeddingGroup { k: usize, permuted: bool },
}

/// Resolved quantizer parameters at some granularity. The parameter vector
/// length is 1, `d`, or `K` and is validated against the tensor shape at
/// each use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GranularParams {
    PerTensor { params: QParams },
    PerEmbedding { params: Vec<QParams> },
    PerEmbeddingGroup { spec: GroupSpec, params: Vec<QParams> },
}

impl GranularParams {
    pub fn per_tensor(params: QParams) -> Self {
        GranularParams::PerTensor { params }
    }

    pub fn slot_count(&self) -> usize {
        match self {
            GranularParams::PerTensor { .. } => 1,
            GranularParams::PerEmbedding { params } => params.len(),
            GranularParams::PerEmbeddingGroup { params, .. } => params.len(),
        }
    }

    /// Validate the parameter layout against a tensor shape and return the
    /// last-dimension extent used for slot lookup.
    pub fn check_shape(&self, shape: &Shape) -> Result<usize> {
        let d = shape.last_dim();
        match self {
            GranularParams::PerTensor { .. } => Ok(d),
            GranularParams::PerEmbedding { params } => {
                if params.len() != d {
                    return Err(CoreError::GranularityMismatch(format!(
                        "per-embedding parameter vector has {} entries, last dim is {d}",
                        params.len()
                    )));
                }
                Ok(d)
            }
            GranularParams::PerEmbeddingGroup { spec, params } => {
                if spec.d() != d {
                    return Err(CoreError::GranularityMismatch(format!(
                        "group spec built for width {}, last dim is {d}",
                        spec.d()
                    )));
                }
                if params.len() != spec.k() {
                    return Err(CoreError::GranularityMismatch(format!(
                        "group parameter vector has {} entries, spec has {} groups",
                        params.len(),
                        spec.k()
                    )));
                }
                Ok(d)
            }
        }
    }

    /// Quantizer for the embedding dimension `j` of the last axis.
    #[inline]
    pub fn slot(&self, j: usize) -> &QParams {
        match self {
            GranularParams::PerTensor { params } => params,
            GranularParams::PerEmbedding { params } => &params[j],
            GranularParams::PerEmbeddingGroup { spec, params } => &params[spec.group_of(j)],
        }
    }

    pub fn bits(&self) -> u8 {
        match self {
            GranularParams::PerTensor { params } => params.bits(),
            GranularParams::PerEmbedding { params } => params[0].bits(),
            GranularParams::PerEmbeddingGroup { params, .. } => params[0].bits(),
        }
    }
}

/// Integer tensor plus the parameters that map it back to the reals.
/// Stored values always lie in `[0, 2^b - 1]`, held in u32 lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Shape,
    ints: Vec<u32>,
    params: GranularParams,
}

impl QTensor {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn ints(&self) -> &[u32] {
        &self.ints
    }

    pub fn params(&self) -> &GranularParams {
        &self.params
    }
}

/// Eq. of the integer mapping at per-tensor granularity.
pub fn quantize(x: &TensorF, params: &QParams) -> Result<QTensor> {
    quantize_with(x, &GranularParams::per_tensor(params.clone()))
}

/// Integer mapping at any granularity; parameters broadcast along the last
/// dimension (per-embedding) or per contiguous group (per-embedding-group).
pub fn quantize_with(x: &TensorF, params: &GranularParams) -> Result<QTensor> {
    let d = params.check_shape(x.shape())?;
    let mut ints = Vec::with_capacity(x.len());
    match params {
        GranularParams::PerTensor { params: p } => {
            for &v in x.data() {
                ints.push(p.quantize_value(v));
            }
        }
        _ => {
            for (i, &v) in x.data().iter().enumerate() {
                ints.push(params.slot(i % d).quantize_value(v));
            }
        }
    }
    Ok(QTensor {
        shape: x.shape().clone(),
        ints,
        params: params.clone(),
    })
}

/// De-quantization: `s * (q - z)` elementwise.
pub fn dequantize(q: &QTensor) -> TensorF {
    let d = q.shape.last_dim();
    let mut data = Vec::with_capacity(q.ints.len());
    match &q.params {
        GranularParams::PerTensor { params: p } => {
            for &v in &q.ints {
                data.push(p.dequantize_value(v));
            }
        }
        params => {
            for (i, &v) in q.ints.iter().enumerate() {
                data.push(params.slot(i % d).dequantize_value(v));
            }
        }
    }
    TensorF::from_parts_unchecked(q.shape.clone(), data)
}

/// Quantize-then-dequantize in real arithmetic, simulating the fixed-point
/// grid while staying in floating point.
pub fn fake_quantize(x: &TensorF, params: &GranularParams) -> Result<TensorF> {
    let d = params.check_shape(x.shape())?;
    let mut data = Vec::with_capacity(x.len());
    match params {
        GranularParams::PerTensor { params: p } => {
            for &v in x.data() {
                data.push(p.fake_quantize_value(v));
            }
        }
        _ => {
            for (i, &v) in x.data().iter().enumerate() {
                data.push(params.slot(i % d).fake_quantize_value(v));
            }
        }
    }
    Ok(TensorF::from_parts_unchecked(x.shape().clone(), data))
}

/// Straight-through estimator for the quantizer input: the upstream
/// gradient passes where `x/s + z` lies inside `[0, 2^b - 1]` and is zero
/// where the value was clipped.
pub fn ste_backward_input(grad_out: &TensorF, x: &TensorF, params: &QParams) -> Result<TensorF> {
    ste_backward_input_with(
        grad_out,
        x,
        &GranularParams::per_tensor(params.clone()),
    )
}

/// Granularity-aware variant of [`ste_backward_input`].
pub fn ste_backward_input_with(
    grad_out: &TensorF,
    x: &TensorF,
    params: &GranularParams,
) -> Result<TensorF> {
    if grad_out.shape() != x.shape() {
        return Err(CoreError::DimMismatch(format!(
            "gradient shape {:?} differs from input shape {:?}",
            grad_out.dims(),
            x.dims()
        )));
    }
    let d = params.check_shape(x.shape())?;
    let mut data = Vec::with_capacity(x.len());
    for (i, (&g, &v)) in grad_out.data().iter().zip(x.data().iter()).enumerate() {
        let p = params.slot(i % d);
        data.push(if p.in_range(v) { g } else { 0.0 });
    }
    Ok(TensorF::from_parts_unchecked(x.shape().clone(), data))
}

/// Learned-step-size gradient of the fake-quantizer output with respect to
/// the scale: the grad_out-weighted sum of the per-element surrogate
/// derivative. The `1/sqrt(N * qmax)` gradient scaling of the original
/// formulation is not applied here; see [`lsq_grad_scale_factor`].
pub fn lsq_backward_scale(grad_out: &TensorF, x: &TensorF, params: &QParams) -> Result<f64> {
    if grad_out.shape() != x.shape() {
        return Err(CoreError::DimMismatch(format!(
            "gradient shape {:?} differs from input shape {:?}",
            grad_out.dims(),
            x.dims()
        )));
    }
    let mut acc = 0.0f64;
    for (&g, &v) in grad_out.data().iter().zip(x.data().iter()) {
        acc += g as f64 * params.scale_grad_value(v);
    }
    Ok(acc)
}

/// The optional gradient-scaling factor `1 / sqrt(N * qmax)` applied when
/// the trainer enables it.
pub fn lsq_grad_scale_factor(num_elements: usize, qmax: u32) -> f64 {
    1.0 / ((num_elements as f64 * qmax as f64).sqrt())
}

//! Integer-arithmetic matmul and residual-add kernels.
//!
//! The per-tensor path keeps the whole inner product on the integer grid
//! and applies a single combined scale afterwards. Per-embedding
//! activation parameters force one rescale per inner dimension; grouped
//! parameters reduce that to one rescale per group. Each kernel reports
//! its rescale count so the cost difference is countable.
//!
//! Accumulation runs in 32-bit signed lanes. Worst case for b <= 8 and
//! inner dim <= 2^15: |w - z_w| <= 128, |x - z_x| <= 255, so the product
//! sum stays below 128 * 255 * 2^15 = 1_069_547_520 and the zero-point
//! folding correction at most doubles it, still inside i32.

use crate::error::{CoreError, Result};
use crate::quant::{quantize, GranularParams, QParams, QTensor};
use crate::tensor::{Shape, TensorF};

/// What to do when a 32-bit accumulator overflows: checked errors out
/// (the debug-profile default), saturating clamps (the release default).
/// Any configuration whose results differ between the two modes has
/// overflowed and is out of contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverflowPolicy {
    Checked,
    Saturating,
}

impl OverflowPolicy {
    pub fn profile_default() -> Self {
        if cfg!(debug_assertions) {
            OverflowPolicy::Checked
        } else {
            OverflowPolicy::Saturating
        }
    }
}

/// 32-bit signed accumulator lane.
#[derive(Debug, Clone, Copy)]
pub struct Accumulator {
    value: i32,
    policy: OverflowPolicy,
}

impl Accumulator {
    pub fn new(policy: OverflowPolicy) -> Self {
        Accumulator { value: 0, policy }
    }

    #[inline]
    pub fn add(&mut self, term: i64, output_index: usize) -> Result<()> {
        let next = self.value as i64 + term;
        if next > i32::MAX as i64 || next < i32::MIN as i64 {
            match self.policy {
                OverflowPolicy::Checked => {
                    return Err(CoreError::AccumulatorOverflow { output_index })
                }
                OverflowPolicy::Saturating => {
                    self.value = next.clamp(i32::MIN as i64, i32::MAX as i64) as i32;
                }
            }
        } else {
            self.value = next as i32;
        }
        Ok(())
    }

    pub fn value(&self) -> i32 {
        self.value
    }
}

/// Count of accumulator rescaling events in one matmul: 1 for the
/// per-tensor path, `d` for per-embedding, `K` for grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RescaleCounter {
    pub rescale_ops: u64,
}

/// Integer result of the per-tensor path: raw i32 accumulators plus the
/// single factored-out scale `s_w * s_x`.
#[derive(Debug, Clone)]
pub struct IntMatmulOutput {
    pub shape: Shape,
    pub acc: Vec<i32>,
    pub combined_scale: f64,
    pub rescales: RescaleCounter,
}

impl IntMatmulOutput {
    /// Apply the combined scale, leaving the integer domain.
    pub fn dequantize(&self) -> TensorF {
        let data = self
            .acc
            .iter()
            .map(|&a| (a as f64 * self.combined_scale) as f32)
            .collect();
        TensorF::from_parts_unchecked(self.shape.clone(), data)
    }
}

fn per_tensor_symmetric_weight(w: &QTensor) -> Result<(&QParams, usize, usize)> {
    let GranularParams::PerTensor { params } = w.params() else {
        return Err(CoreError::GranularityMismatch(
            "weights must be per-tensor quantized".into(),
        ));
    };
    if !params.symmetric() {
        return Err(CoreError::InvalidQParams(
            "weights must use the symmetric grid".into(),
        ));
    }
    if w.shape().rank() != 2 {
        return Err(CoreError::RankMismatch {
            expected: 2,
            actual: w.shape().rank(),
        });
    }
    Ok((params, w.shape().dims()[0], w.shape().dims()[1]))
}

fn check_inner_dim(x: &QTensor, k: usize) -> Result<usize> {
    let d = x.shape().last_dim();
    if d != k {
        return Err(CoreError::DimMismatch(format!(
            "activation last dim {d} does not match weight inner dim {k}"
        )));
    }
    Ok(x.ints().len() / d)
}

fn output_shape(x: &QTensor, m: usize) -> Result<Shape> {
    let mut dims = x.shape().dims().to_vec();
    *dims.last_mut().unwrap() = m;
    Shape::new(dims)
}

/// `W x` with per-tensor symmetric weights and per-tensor activations:
/// integer sums `sum_j (w_ij - z_w)(x_j - z_x)` with the common factor
/// `s_w * s_x` returned separately. The activation zero-point is folded
/// by precomputing per-row weight sums.
pub fn qmatmul_per_tensor(
    w: &QTensor,
    x: &QTensor,
    policy: OverflowPolicy,
) -> Result<IntMatmulOutput> {
    let (wp, m, k) = per_tensor_symmetric_weight(w)?;
    let GranularParams::PerTensor { params: xp } = x.params() else {
        return Err(CoreError::GranularityMismatch(
            "per-tensor path requires per-tensor activation parameters".into(),
        ));
    };
    let rows = check_inner_dim(x, k)?;
    let zw = wp.zero_point() as i64;
    let zx = xp.zero_point() as i64;

    // z_x folding: sum_j (w_ij - z_w) once per weight row
    let mut row_sums = vec![0i64; m];
    for i in 0..m {
        let wrow = &w.ints()[i * k..(i + 1) * k];
        row_sums[i] = wrow.iter().map(|&q| q as i64 - zw).sum();
    }

    let mut acc_out = vec![0i32; rows * m];
    for r in 0..rows {
        let xrow = &x.ints()[r * k..(r + 1) * k];
        for i in 0..m {
            let wrow = &w.ints()[i * k..(i + 1) * k];
            let mut acc = Accumulator::new(policy);
            let oi = r * m + i;
            for j in 0..k {
                acc.add((wrow[j] as i64 - zw) * xrow[j] as i64, oi)?;
            }
            acc.add(-zx * row_sums[i], oi)?;
            acc_out[oi] = acc.value();
        }
    }
    Ok(IntMatmulOutput {
        shape: output_shape(x, m)?,
        acc: acc_out,
        combined_scale: wp.scale() * xp.scale(),
        rescales: RescaleCounter { rescale_ops: 1 },
    })
}

/// `W x` with per-embedding activation parameters: the scale can no longer
/// be factored out, so every inner dimension contributes its own rescaling
/// of the accumulator. Counts `d` rescale events.
pub fn qmatmul_per_embedding(
    w: &QTensor,
    x: &QTensor,
) -> Result<(TensorF, RescaleCounter)> {
    let (wp, m, k) = per_tensor_symmetric_weight(w)?;
    let GranularParams::PerEmbedding { params: xps } = x.params() else {
        return Err(CoreError::GranularityMismatch(
            "per-embedding path requires per-embedding activation parameters".into(),
        ));
    };
    let rows = check_inner_dim(x, k)?;
    if xps.len() != k {
        return Err(CoreError::GranularityMismatch(format!(
            "activation parameter vector has {} entries, inner dim is {k}",
            xps.len()
        )));
    }
    let zw = wp.zero_point() as i64;
    let sw = wp.scale();

    let mut out = vec![0.0f32; rows * m];
    for r in 0..rows {
        let xrow = &x.ints()[r * k..(r + 1) * k];
        for i in 0..m {
            let wrow = &w.ints()[i * k..(i + 1) * k];
            let mut acc = 0.0f64;
            for j in 0..k {
                let term = (wrow[j] as i64 - zw) * (xrow[j] as i64 - xps[j].zero_point() as i64);
                acc += xps[j].scale() * term as f64;
            }
            out[r * m + i] = (sw * acc) as f32;
        }
    }
    Ok((
        TensorF::from_parts_unchecked(output_shape(x, m)?, out),
        RescaleCounter {
            rescale_ops: k as u64,
        },
    ))
}

/// `W x` with grouped activation parameters: `K` partial integer inner
/// products, each rescaled once by its group scale, then summed. Counts
/// exactly `K` rescale events.
pub fn qmatmul_peg(
    w: &QTensor,
    x: &QTensor,
    policy: OverflowPolicy,
) -> Result<(TensorF, RescaleCounter)> {
    let (wp, m, k) = per_tensor_symmetric_weight(w)?;
    let GranularParams::PerEmbeddingGroup { spec, params: xps } = x.params() else {
        return Err(CoreError::GranularityMismatch(
            "grouped path requires per-embedding-group activation parameters".into(),
        ));
    };
    let rows = check_inner_dim(x, k)?;
    if spec.d() != k {
        return Err(CoreError::GroupCount { d: k, k: spec.k() });
    }
    let zw = wp.zero_point() as i64;
    let sw = wp.scale();

    let mut out = vec![0.0f32; rows * m];
    for r in 0..rows {
        let xrow = &x.ints()[r * k..(r + 1) * k];
        for i in 0..m {
            let wrow = &w.ints()[i * k..(i + 1) * k];
            let oi = r * m + i;
            let mut total = 0.0f64;
            for (g, p) in xps.iter().enumerate() {
                let zx = p.zero_point() as i64;
                let mut acc = Accumulator::new(policy);
                for &j in spec.group_dims(g) {
                    acc.add((wrow[j] as i64 - zw) * (xrow[j] as i64 - zx), oi)?;
                }
                total += sw * p.scale() * acc.value() as f64;
            }
            out[oi] = total as f32;
        }
    }
    Ok((
        TensorF::from_parts_unchecked(output_shape(x, m)?, out),
        RescaleCounter {
            rescale_ops: spec.k() as u64,
        },
    ))
}

/// Map real values onto a new grid; the same integer mapping as
/// [`quantize`], named for its role between consecutive quantized ops.
pub fn requantize(values: &TensorF, target: &QParams) -> Result<QTensor> {
    quantize(values, target)
}

/// Requantize an integer accumulator result: apply the combined scale,
/// then quantize onto the target grid.
pub fn requantize_acc(acc: &IntMatmulOutput, target: &QParams) -> Result<QTensor> {
    quantize(&acc.dequantize(), target)
}

/// Residual connection: dequantize both operands, add in real arithmetic,
/// requantize onto the target grid (which may be grouped).
pub fn qadd_residual(a: &QTensor, b: &QTensor, target: &GranularParams) -> Result<QTensor> {
    if a.shape() != b.shape() {
        return Err(CoreError::DimMismatch(format!(
            "residual operands differ: {:?} vs {:?}",
            a.shape().dims(),
            b.shape().dims()
        )));
    }
    let ar = crate::quant::dequantize(a);
    let br = crate::quant::dequantize(b);
    let data: Vec<f32> = ar
        .data()
        .iter()
        .zip(br.data().iter())
        .map(|(&x, &y)| (x as f64 + y as f64) as f32)
        .collect();
    let sum = TensorF::from_parts_unchecked(a.shape().clone(), data);
    crate::quant::quantize_with(&sum, target)
}

//! Per-embedding-group quantization: range-based permutation, group
//! construction, the parameter-count accounting, and the rewrite that
//! expresses a grouped FFN block with per-tensor operations only.
//!
//! A [`GroupSpec`] splits the embedding axis into `K` evenly sized groups
//! over a permuted index space. The permutation sorts dimensions by their
//! calibration dynamic range (ascending, ties broken by lower original
//! index) so that outlier dimensions share one group.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::math::gelu;
use crate::quant::{fake_quantize, GranularParams, QParams};
use crate::tensor::{Shape, TensorF};

/// Group structure over the embedding axis: a permutation `perm` of
/// `[0, d)` and `K` contiguous blocks of size `d / K` over the permuted
/// positions. `perm[p]` is the original dimension sitting at permuted
/// position `p`; `inv_perm` is its inverse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    d: usize,
    k: usize,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

impl GroupSpec {
    /// Identity permutation with `k` contiguous groups.
    pub fn identity(d: usize, k: usize) -> Result<Self> {
        Self::from_permutation((0..d).collect(), k)
    }

    /// Build from an explicit permutation; validates bijectivity and that
    /// `k` divides `d`.
    pub fn from_permutation(perm: Vec<usize>, k: usize) -> Result<Self> {
        let d = perm.len();
        if d == 0 || k == 0 || d % k != 0 {
            return Err(CoreError::GroupCount { d, k });
        }
        let mut inv = vec![usize::MAX; d];
        for (p, &j) in perm.iter().enumerate() {
            if j >= d || inv[j] != usize::MAX {
                return Err(CoreError::InvalidPermutation(format!(
                    "position {p} maps to {j}, which is out of range or repeated"
                )));
            }
            inv[j] = p;
        }
        Ok(GroupSpec {
            d,
            k,
            perm,
            inv_perm: inv,
        })
    }

    /// Sort dimensions by dynamic range ascending (stable: ties keep the
    /// lower original index first) and cut into `k` groups.
    pub fn from_ranges(ranges: &[f64], k: usize) -> Result<Self> {
        let d = ranges.len();
        if d == 0 || k == 0 || d % k != 0 {
            return Err(CoreError::GroupCount { d, k });
        }
        let mut idx: Vec<usize> = (0..d).collect();
        idx.sort_by(|&a, &b| {
            ranges[a]
                .partial_cmp(&ranges[b])
                .expect("ranges are finite")
                .then(a.cmp(&b))
        });
        Self::from_permutation(idx, k)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn group_size(&self) -> usize {
        self.d / self.k
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    /// Group index of original embedding dimension `j`.
    #[inline]
    pub fn group_of(&self, j: usize) -> usize {
        self.inv_perm[j] / self.group_size()
    }

    /// Original dimensions of group `g`, in permuted order.
    pub fn group_dims(&self, g: usize) -> &[usize] {
        let gs = self.group_size();
        &self.perm[g * gs..(g + 1) * gs]
    }

    /// Spec with the inverse permutation (same group count).
    pub fn inverted(&self) -> GroupSpec {
        GroupSpec {
            d: self.d,
            k: self.k,
            perm: self.inv_perm.clone(),
            inv_perm: self.perm.clone(),
        }
    }

    /// Reorder the last axis: `y[…, p] = x[…, perm[p]]`.
    pub fn permute_last_dim(&self, t: &TensorF) -> Result<TensorF> {
        self.apply_last_dim(t, &self.perm)
    }

    /// Undo [`Self::permute_last_dim`]: `y[…, j] = x[…, inv_perm[j]]`.
    pub fn inverse_permute_last_dim(&self, t: &TensorF) -> Result<TensorF> {
        self.apply_last_dim(t, &self.inv_perm)
    }

    fn apply_last_dim(&self, t: &TensorF, order: &[usize]) -> Result<TensorF> {
        let d = t.shape().last_dim();
        if d != self.d {
            return Err(CoreError::DimMismatch(format!(
                "tensor last dim {d} differs from spec width {}",
                self.d
            )));
        }
        let rows = t.len() / d;
        let mut out = Vec::with_capacity(t.len());
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            for &src in order {
                out.push(row[src]);
            }
        }
        Ok(TensorF::from_parts_unchecked(t.shape().clone(), out))
    }
}

/// Extra parameters per attention layer introduced by the grouped scheme:
/// `d` permutation indices plus scale and zero-point per group for the
/// FFN input, output, and sum quantizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PegOverhead {
    pub extra_params: u64,
}

impl PegOverhead {
    pub fn new(d: usize, k: usize) -> Result<Self> {
        Ok(PegOverhead {
            extra_params: peg_overhead(d, k)?,
        })
    }
}

/// `d + 2 * 3 * K` extra parameters per attention layer.
pub fn peg_overhead(d: usize, k: usize) -> Result<u64> {
    if d == 0 || k == 0 {
        return Err(CoreError::GroupCount { d, k });
    }
    Ok(d as u64 + 6 * k as u64)
}

/// Record the dynamic range `r_j = max(x[:,:,j]) - min(x[:,:,j])` of each
/// embedding dimension over a rank-3 calibration tensor and build the
/// range-based permutation. Built once, before range estimation.
pub fn build_range_permutation(calib: &TensorF, k: usize) -> Result<GroupSpec> {
    let (mins, maxs) = calib.per_embedding_min_max()?;
    let ranges: Vec<f64> = mins
        .iter()
        .zip(maxs.iter())
        .map(|(&lo, &hi)| hi as f64 - lo as f64)
        .collect();
    GroupSpec::from_ranges(&ranges, k)
}

/// Split the columns of a `(d_out, d)` weight into `K` blocks following
/// the spec's permuted group order. The per-group matmuls against the
/// correspondingly split input, elementwise-summed, reproduce `W x`.
pub fn split_linear_by_input_groups(w: &TensorF, spec: &GroupSpec) -> Result<Vec<TensorF>> {
    if w.rank() != 2 {
        return Err(CoreError::RankMismatch {
            expected: 2,
            actual: w.rank(),
        });
    }
    let (rows, cols) = (w.dims()[0], w.dims()[1]);
    if cols != spec.d() {
        return Err(CoreError::DimMismatch(format!(
            "weight has {cols} input columns, spec width is {}",
            spec.d()
        )));
    }
    let gs = spec.group_size();
    let mut blocks = Vec::with_capacity(spec.k());
    for g in 0..spec.k() {
        let dims = spec.group_dims(g);
        let mut data = Vec::with_capacity(rows * gs);
        for r in 0..rows {
            let row = &w.data()[r * cols..(r + 1) * cols];
            for &j in dims {
                data.push(row[j]);
            }
        }
        blocks.push(TensorF::from_parts_unchecked(
            Shape::new(vec![rows, gs])?,
            data,
        ));
    }
    Ok(blocks)
}

/// Split the rows of a `(d, d_in)` weight into `K` blocks following the
/// spec's permuted group order. Concatenating the per-group outputs (and
/// applying the inverse permutation) reproduces `W x`.
pub fn split_linear_by_output_groups(w: &TensorF, spec: &GroupSpec) -> Result<Vec<TensorF>> {
    if w.rank() != 2 {
        return Err(CoreError::RankMismatch {
            expected: 2,
            actual: w.rank(),
        });
    }
    let (rows, cols) = (w.dims()[0], w.dims()[1]);
    if rows != spec.d() {
        return Err(CoreError::DimMismatch(format!(
            "weight has {rows} output rows, spec width is {}",
            spec.d()
        )));
    }
    let gs = spec.group_size();
    let mut blocks = Vec::with_capacity(spec.k());
    for g in 0..spec.k() {
        let mut data = Vec::with_capacity(gs * cols);
        for &j in spec.group_dims(g) {
            data.extend_from_slice(&w.data()[j * cols..(j + 1) * cols]);
        }
        blocks.push(TensorF::from_parts_unchecked(
            Shape::new(vec![gs, cols])?,
            data,
        ));
    }
    Ok(blocks)
}

/// LayerNorm gain and bias over the embedding axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNormParams {
    pub fn unit(d: usize) -> Self {
        LayerNormParams {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

fn permute_vec_f32(v: &[f32], order: &[usize]) -> Vec<f32> {
    order.iter().map(|&j| v[j]).collect()
}

/// Rewrite a LayerNorm and its adjoining linears for a permuted embedding
/// space: LayerNorm gain/bias are permuted by `perm`, the consuming
/// linear's columns and the producing linear's rows likewise. With the
/// inverse permutation applied before the next LayerNorm the block is
/// functionally identical.
pub fn permute_layernorm_and_linears(
    ln: &LayerNormParams,
    consumer_w: &TensorF,
    producer_w: &TensorF,
    spec: &GroupSpec,
) -> Result<(LayerNormParams, TensorF, TensorF)> {
    let d = spec.d();
    if ln.gamma.len() != d || ln.beta.len() != d {
        return Err(CoreError::DimMismatch(format!(
            "layernorm width {} differs from spec width {d}",
            ln.gamma.len()
        )));
    }
    let consumer_blocks = split_linear_by_input_groups(consumer_w, spec)?;
    let consumer = TensorF::concat_axis(1, &consumer_blocks.iter().collect::<Vec<_>>())?;
    let producer_blocks = split_linear_by_output_groups(producer_w, spec)?;
    let producer = TensorF::concat_axis(0, &producer_blocks.iter().collect::<Vec<_>>())?;
    let ln_out = LayerNormParams {
        gamma: permute_vec_f32(&ln.gamma, spec.perm()),
        beta: permute_vec_f32(&ln.beta, spec.perm()),
    };
    Ok((ln_out, consumer, producer))
}

/// Weights of one FFN block: `Linear(d -> d_ff) -> GELU -> Linear(d_ff -> d)`
/// followed by a residual sum with the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnBlock {
    pub w1: TensorF,
    pub b1: Vec<f32>,
    pub w2: TensorF,
    pub b2: Vec<f32>,
}

impl FfnBlock {
    pub fn validate(&self, d: usize) -> Result<usize> {
        if self.w1.rank() != 2 || self.w2.rank() != 2 {
            return Err(CoreError::RankMismatch {
                expected: 2,
                actual: self.w1.rank().max(self.w2.rank()),
            });
        }
        let d_ff = self.w1.dims()[0];
        if self.w1.dims()[1] != d
            || self.w2.dims() != [d, d_ff]
            || self.b1.len() != d_ff
            || self.b2.len() != d
        {
            return Err(CoreError::DimMismatch(format!(
                "ffn block shapes inconsistent for width {d}: w1 {:?}, w2 {:?}",
                self.w1.dims(),
                self.w2.dims()
            )));
        }
        Ok(d_ff)
    }
}

/// Quantizers of a grouped FFN block: grouped parameters (length `K`) for
/// the input, output, and residual-sum activations; per-tensor parameters
/// for the GELU output and both weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PegFfnQuant {
    pub input: Vec<QParams>,
    pub mid: QParams,
    pub output: Vec<QParams>,
    pub sum: Vec<QParams>,
    pub w1: QParams,
    pub w2: QParams,
}

impl PegFfnQuant {
    fn check(&self, k: usize) -> Result<()> {
        if self.input.len() != k || self.output.len() != k || self.sum.len() != k {
            return Err(CoreError::GranularityMismatch(format!(
                "grouped quantizer vectors must have length {k}, got {}/{}/{}",
                self.input.len(),
                self.output.len(),
                self.sum.len()
            )));
        }
        Ok(())
    }

    /// Estimate all quantizers from one calibration batch by running the
    /// real-valued pipeline: grouped min-max ranges for input, output and
    /// sum, per-tensor ranges elsewhere, symmetric weights.
    pub fn estimate(
        x: &TensorF,
        block: &FfnBlock,
        spec: &GroupSpec,
        act_bits: u8,
        weight_bits: u8,
    ) -> Result<PegFfnQuant> {
        let d = x.shape().last_dim();
        let d_ff = block.validate(d)?;
        let _ = d_ff;
        let grouped = |t: &TensorF| -> Result<Vec<QParams>> {
            let (mins, maxs) = per_group_min_max(t, spec)?;
            mins.iter()
                .zip(maxs.iter())
                .map(|(&lo, &hi)| QParams::from_range(lo, hi, act_bits, false))
                .collect()
        };
        let per_tensor_sym = |t: &TensorF, bits: u8| -> Result<QParams> {
            let (lo, hi) = t.min_max()?;
            QParams::from_range(lo as f64, hi as f64, bits, true)
        };
        let input = grouped(x)?;
        let a = add_bias_f32(&x.matmul_nt(&block.w1)?, &block.b1);
        let g = gelu(&a);
        let (glo, ghi) = g.min_max()?;
        let mid = QParams::from_range(glo as f64, ghi as f64, act_bits, false)?;
        let y = add_bias_f32(&g.matmul_nt(&block.w2)?, &block.b2);
        let output = grouped(&y)?;
        let s = add_f32(x, &y)?;
        let sum = grouped(&s)?;
        Ok(PegFfnQuant {
            input,
            mid,
            output,
            sum,
            w1: per_tensor_sym(&block.w1, weight_bits)?,
            w2: per_tensor_sym(&block.w2, weight_bits)?,
        })
    }
}

/// Per-group min and max of the last axis under a group spec.
pub fn per_group_min_max(t: &TensorF, spec: &GroupSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = t.shape().last_dim();
    if d != spec.d() {
        return Err(CoreError::DimMismatch(format!(
            "tensor last dim {d} differs from spec width {}",
            spec.d()
        )));
    }
    let mut mins = vec![f64::INFINITY; spec.k()];
    let mut maxs = vec![f64::NEG_INFINITY; spec.k()];
    let rows = t.len() / d;
    for r in 0..rows {
        let row = &t.data()[r * d..(r + 1) * d];
        for j in 0..d {
            let g = spec.group_of(j);
            let v = row[j] as f64;
            if v < mins[g] {
                mins[g] = v;
            }
            if v > maxs[g] {
                maxs[g] = v;
            }
        }
    }
    Ok((mins, maxs))
}

fn add_bias_f32(t: &TensorF, bias: &[f32]) -> TensorF {
    let d = t.shape().last_dim();
    debug_assert_eq!(d, bias.len());
    let mut data = Vec::with_capacity(t.len());
    for (i, &v) in t.data().iter().enumerate() {
        data.push(v + bias[i % d]);
    }
    TensorF::from_parts_unchecked(t.shape().clone(), data)
}

fn add_f32(a: &TensorF, b: &TensorF) -> Result<TensorF> {
    if a.shape() != b.shape() {
        return Err(CoreError::DimMismatch(format!(
            "elementwise add of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(TensorF::from_parts_unchecked(a.shape().clone(), data))
}

/// Matmul with groupwise accumulation: each group's partial inner product
/// is accumulated in f64 over the spec's permuted dimension order, cast to
/// f32, and the per-group partials are summed in f32 in ascending group
/// order. This is the deterministic merge contract both the native grouped
/// pipeline and the per-tensor rewrite follow, which is what makes them
/// bit-exactly equal.
fn grouped_matmul_nt(x: &TensorF, w: &TensorF, spec: &GroupSpec) -> Result<TensorF> {
    let d = x.shape().last_dim();
    if d != spec.d() || w.rank() != 2 || w.dims()[1] != d {
        return Err(CoreError::DimMismatch(format!(
            "grouped matmul: input last dim {d}, weight {:?}, spec width {}",
            w.dims(),
            spec.d()
        )));
    }
    let m = w.dims()[0];
    let rows = x.len() / d;
    let mut out = vec![0.0f32; rows * m];
    for r in 0..rows {
        let xrow = &x.data()[r * d..(r + 1) * d];
        for i in 0..m {
            let wrow = &w.data()[i * d..(i + 1) * d];
            let mut total = 0.0f32;
            for g in 0..spec.k() {
                let mut partial = 0.0f64;
                for &j in spec.group_dims(g) {
                    partial += xrow[j] as f64 * wrow[j] as f64;
                }
                total += partial as f32;
            }
            out[r * m + i] = total;
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = m;
    Ok(TensorF::from_parts_unchecked(Shape::new(dims)?, out))
}

fn grouped_params(spec: &GroupSpec, params: &[QParams]) -> GranularParams {
    GranularParams::PerEmbeddingGroup {
        spec: spec.clone(),
        params: params.to_vec(),
    }
}

/// Grouped FFN forward in its native form: grouped fake-quantizers applied
/// in the original dimension order, groupwise matmul accumulation.
pub fn peg_ffn_forward_native(
    x: &TensorF,
    block: &FfnBlock,
    spec: &GroupSpec,
    quant: &PegFfnQuant,
) -> Result<TensorF> {
    let d = x.shape().last_dim();
    if d != spec.d() {
        return Err(CoreError::DimMismatch(format!(
            "input width {d} differs from spec width {}",
            spec.d()
        )));
    }
    block.validate(d)?;
    quant.check(spec.k())?;

    let w1q = fake_quantize(&block.w1, &GranularParams::per_tensor(quant.w1.clone()))?;
    let w2q = fake_quantize(&block.w2, &GranularParams::per_tensor(quant.w2.clone()))?;

    let xq = fake_quantize(x, &grouped_params(spec, &quant.input))?;
    let a = add_bias_f32(&grouped_matmul_nt(&xq, &w1q, spec)?, &block.b1);
    let g = gelu(&a);
    let gq = fake_quantize(&g, &GranularParams::per_tensor(quant.mid.clone()))?;
    let y = add_bias_f32(&gq.matmul_nt(&w2q)?, &block.b2);
    let yq = fake_quantize(&y, &grouped_params(spec, &quant.output))?;
    let sum = add_f32(&xq, &yq)?;
    fake_quantize(&sum, &grouped_params(spec, &quant.sum))
}

/// The per-tensor rewrite of the grouped FFN block: permute the input,
/// split it and the first linear's columns into `K` streams, per-tensor
/// quantize each stream, elementwise-sum the first-layer outputs, split
/// the second linear's rows, concatenate, and inverse-permute at the end.
/// Every quantizer in this pipeline is per-tensor; the result equals
/// [`peg_ffn_forward_native`] bit-exactly under the shared rounding mode.
pub fn peg_ffn_forward_per_tensor(
    x: &TensorF,
    block: &FfnBlock,
    spec: &GroupSpec,
    quant: &PegFfnQuant,
) -> Result<TensorF> {
    let d = x.shape().last_dim();
    if d != spec.d() {
        return Err(CoreError::DimMismatch(format!(
            "input width {d} differs from spec width {}",
            spec.d()
        )));
    }
    let d_ff = block.validate(d)?;
    quant.check(spec.k())?;

    let w1q = fake_quantize(&block.w1, &GranularParams::per_tensor(quant.w1.clone()))?;
    let w2q = fake_quantize(&block.w2, &GranularParams::per_tensor(quant.w2.clone()))?;
    let w1_blocks = split_linear_by_input_groups(&w1q, spec)?;
    let w2_blocks = split_linear_by_output_groups(&w2q, spec)?;

    let xp = spec.permute_last_dim(x)?;
    let gs = spec.group_size();
    let k = spec.k();

    // per-stream quantized inputs
    let mut xq_streams = Vec::with_capacity(k);
    for g in 0..k {
        let stream = xp.slice_axis(xp.rank() - 1, g * gs, gs)?;
        xq_streams.push(fake_quantize(
            &stream,
            &GranularParams::per_tensor(quant.input[g].clone()),
        )?);
    }

    // first linear: elementwise sum of the K partial products, then bias
    let mut acc: Option<TensorF> = None;
    for g in 0..k {
        let partial = xq_streams[g].matmul_nt(&w1_blocks[g])?;
        acc = Some(match acc {
            None => partial,
            Some(prev) => add_f32(&prev, &partial)?,
        });
    }
    let a = add_bias_f32(&acc.expect("k >= 1"), &block.b1);
    let g_act = gelu(&a);
    let gq = fake_quantize(&g_act, &GranularParams::per_tensor(quant.mid.clone()))?;

    // second linear: per-stream row blocks, bias sliced in permuted order
    let _ = d_ff;
    let mut sum_streams = Vec::with_capacity(k);
    for g in 0..k {
        let y_g = gq.matmul_nt(&w2_blocks[g])?;
        let bias_g: Vec<f32> = spec.group_dims(g).iter().map(|&j| block.b2[j]).collect();
        let y_g = add_bias_f32(&y_g, &bias_g);
        let yq_g = fake_quantize(&y_g, &GranularParams::per_tensor(quant.output[g].clone()))?;
        let s_g = add_f32(&xq_streams[g], &yq_g)?;
        sum_streams.push(fake_quantize(
            &s_g,
            &GranularParams::per_tensor(quant.sum[g].clone()),
        )?);
    }
    let refs: Vec<&TensorF> = sum_streams.iter().collect();
    let concat = TensorF::concat_axis(x.rank() - 1, &refs)?;
    spec.inverse_permute_last_dim(&concat)
}

/// Real-valued (unquantized) reference of the same FFN block, used for
/// quantization-error measurements.
pub fn ffn_forward_fp32(x: &TensorF, block: &FfnBlock) -> Result<TensorF> {
    block.validate(x.shape().last_dim())?;
    let a = add_bias_f32(&x.matmul_nt(&block.w1)?, &block.b1);
    let g = gelu(&a);
    let y = add_bias_f32(&g.matmul_nt(&block.w2)?, &block.b2);
    add_f32(x, &y)
}

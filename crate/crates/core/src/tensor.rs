//! Dense row-major f32 tensors with the reductions the quantization
//! pipeline needs.
//!
//! Conventions: activations are `(B, T, d)` (batch, sequence, embedding),
//! weights are `(d_out, d_in)`. All reductions accumulate sequentially
//! left-to-right in f64 so results are identical across runs and platforms.

use crate::error::{CoreError, Result};

/// Tensor extents. Every extent is at least 1 and the element count is
/// checked against overflow at construction.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        let mut count: usize = 1;
        for (axis, &d) in dims.iter().enumerate() {
            if d == 0 {
                return Err(CoreError::ZeroExtent { axis });
            }
            count = count
                .checked_mul(d)
                .ok_or_else(|| CoreError::ShapeOverflow { dims: dims.clone() })?;
        }
        Ok(Shape { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Extent of the last axis; the embedding width for activation tensors.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("shape has at least one axis")
    }
}

/// Dense real-valued tensor, row-major, f32 storage. Values are finite by
/// construction; NaN/Inf are rejected at ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    shape: Shape,
    data: Vec<f32>,
}

impl TensorF {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.element_count() {
            return Err(CoreError::DataLength {
                expected: shape.element_count(),
                actual: data.len(),
            });
        }
        for (index, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite { index });
            }
        }
        Ok(TensorF { shape, data })
    }

    pub fn from_flat(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::new(Shape::new(dims.to_vec())?, data)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let n = shape.element_count();
        Ok(TensorF {
            shape,
            data: vec![0.0; n],
        })
    }

    /// Internal constructor for values produced by our own arithmetic;
    /// skips the finiteness scan.
    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.element_count(), data.len());
        TensorF { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Elementwise map. The caller is responsible for keeping values finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> TensorF {
        TensorF {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Exact elementwise minimum and maximum.
    pub fn min_max(&self) -> Result<(f32, f32)> {
        if self.data.is_empty() {
            return Err(CoreError::EmptyTensor);
        }
        let mut lo = self.data[0];
        let mut hi = self.data[0];
        for &v in &self.data[1..] {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        Ok((lo, hi))
    }

    /// Per-embedding-dimension min and max for a `(B, T, d)` tensor:
    /// component `j` reduces over all `B*T` positions of dimension `j`.
    pub fn per_embedding_min_max(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        if self.rank() != 3 {
            return Err(CoreError::RankMismatch {
                expected: 3,
                actual: self.rank(),
            });
        }
        let d = self.shape.last_dim();
        let rows = self.len() / d;
        let mut mins = vec![f32::INFINITY; d];
        let mut maxs = vec![f32::NEG_INFINITY; d];
        for r in 0..rows {
            let row = &self.data[r * d..(r + 1) * d];
            for j in 0..d {
                let v = row[j];
                if v < mins[j] {
                    mins[j] = v;
                }
                if v > maxs[j] {
                    maxs[j] = v;
                }
            }
        }
        Ok((mins, maxs))
    }

    /// Population mean and population standard deviation, computed in two
    /// f64 passes.
    pub fn mean_std(&self) -> Result<(f64, f64)> {
        if self.len() < 2 {
            return Err(CoreError::NotEnoughElements {
                needed: 2,
                got: self.len(),
            });
        }
        let n = self.len() as f64;
        let mut sum = 0.0f64;
        for &v in &self.data {
            sum += v as f64;
        }
        let mean = sum / n;
        let mut sq = 0.0f64;
        for &v in &self.data {
            let dv = v as f64 - mean;
            sq += dv * dv;
        }
        Ok((mean, (sq / n).sqrt()))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<TensorF> {
        let dims = self.dims();
        if axis >= dims.len() {
            return Err(CoreError::DimMismatch(format!(
                "axis {axis} out of range for rank {}",
                dims.len()
            )));
        }
        if start + len > dims[axis] || len == 0 {
            return Err(CoreError::DimMismatch(format!(
                "slice [{start}, {}) out of range for extent {}",
                start + len,
                dims[axis]
            )));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dims[axis] * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut new_dims = dims.to_vec();
        new_dims[axis] = len;
        Ok(TensorF::from_parts_unchecked(Shape::new(new_dims)?, out))
    }

    /// Concatenate tensors along `axis`. All other extents must agree.
    pub fn concat_axis(axis: usize, parts: &[&TensorF]) -> Result<TensorF> {
        let first = parts.first().ok_or(CoreError::EmptyTensor)?;
        let rank = first.rank();
        if axis >= rank {
            return Err(CoreError::DimMismatch(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(CoreError::RankMismatch {
                    expected: rank,
                    actual: p.rank(),
                });
            }
            for (a, (&da, &db)) in first.dims().iter().zip(p.dims().iter()).enumerate() {
                if a != axis && da != db {
                    return Err(CoreError::DimMismatch(format!(
                        "extent mismatch at axis {a}: {da} vs {db}"
                    )));
                }
            }
            axis_total += p.dims()[axis];
        }
        let outer: usize = first.dims()[..axis].iter().product();
        let inner: usize = first.dims()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let ext = p.dims()[axis];
                let base = o * ext * inner;
                out.extend_from_slice(&p.data[base..base + ext * inner]);
            }
        }
        let mut new_dims = first.dims().to_vec();
        new_dims[axis] = axis_total;
        Ok(TensorF::from_parts_unchecked(Shape::new(new_dims)?, out))
    }

    /// `x (……, k) · wᵀ (m, k) -> (……, m)` with sequential f64 accumulation
    /// per output element.
    pub fn matmul_nt(&self, w: &TensorF) -> Result<TensorF> {
        if w.rank() != 2 {
            return Err(CoreError::RankMismatch {
                expected: 2,
                actual: w.rank(),
            });
        }
        let k = self.shape.last_dim();
        let (m, wk) = (w.dims()[0], w.dims()[1]);
        if wk != k {
            return Err(CoreError::DimMismatch(format!(
                "inner dims differ: input {k}, weight {wk}"
            )));
        }
        let rows = self.len() / k;
        let mut out = vec![0.0f32; rows * m];
        for r in 0..rows {
            let xrow = &self.data[r * k..(r + 1) * k];
            for i in 0..m {
                let wrow = &w.data[i * k..(i + 1) * k];
                let mut acc = 0.0f64;
                for j in 0..k {
                    acc += xrow[j] as f64 * wrow[j] as f64;
                }
                out[r * m + i] = acc as f32;
            }
        }
        let mut new_dims = self.dims().to_vec();
        *new_dims.last_mut().unwrap() = m;
        Ok(TensorF::from_parts_unchecked(Shape::new(new_dims)?, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    #[test]
    fn shape_rejects_zero_extent_and_overflow() {
        assert!(matches!(
            Shape::new(vec![2, 0, 3]),
            Err(CoreError::ZeroExtent { axis: 1 })
        ));
        assert!(matches!(
            Shape::new(vec![usize::MAX, 2]),
            Err(CoreError::ShapeOverflow { .. })
        ));
    }

    #[test]
    fn ingestion_rejects_non_finite() {
        let err = TensorF::from_flat(&[3], vec![1.0, f32::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { index: 1 }));
        let err = TensorF::from_flat(&[2], vec![f32::INFINITY, 0.0]).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { index: 0 }));
    }

    #[test]
    fn min_max_basic() {
        let t = TensorF::from_flat(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(t.min_max().unwrap(), (-1.0, 2.0));
        let c = TensorF::from_flat(&[3], vec![3.0, 3.0, 3.0]).unwrap();
        assert_eq!(c.min_max().unwrap(), (3.0, 3.0));
    }

    #[test]
    fn min_max_matches_scan_oracle_on_normal_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..1000)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
            .collect();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let t = TensorF::from_flat(&[1000], data).unwrap();
        assert_eq!(t.min_max().unwrap(), (lo, hi));
    }

    #[test]
    fn per_embedding_min_max_single_position() {
        let t = TensorF::from_flat(&[1, 1, 3], vec![1.0, -2.0, 3.0]).unwrap();
        let (mins, maxs) = t.per_embedding_min_max().unwrap();
        assert_eq!(mins, vec![1.0, -2.0, 3.0]);
        assert_eq!(maxs, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn per_embedding_min_max_two_rows() {
        let t = TensorF::from_flat(&[1, 2, 2], vec![0.0, 5.0, -1.0, 7.0]).unwrap();
        let (mins, maxs) = t.per_embedding_min_max().unwrap();
        assert_eq!(mins, vec![-1.0, 5.0]);
        assert_eq!(maxs, vec![0.0, 7.0]);
    }

    #[test]
    fn per_embedding_min_max_matches_per_column_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [2usize, 4, 8];
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
            .collect();
        let t = TensorF::from_flat(&dims, data.clone()).unwrap();
        let (mins, maxs) = t.per_embedding_min_max().unwrap();
        for j in 0..8 {
            let col: Vec<f32> = (0..n / 8).map(|r| data[r * 8 + j]).collect();
            let lo = col.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(mins[j], lo);
            assert_eq!(maxs[j], hi);
        }
    }

    #[test]
    fn per_embedding_min_max_requires_rank_3() {
        let t = TensorF::from_flat(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(matches!(
            t.per_embedding_min_max(),
            Err(CoreError::RankMismatch { .. })
        ));
    }

    #[test]
    fn mean_std_basic() {
        let z = TensorF::from_flat(&[4], vec![0.0; 4]).unwrap();
        assert_eq!(z.mean_std().unwrap(), (0.0, 0.0));
        let p = TensorF::from_flat(&[2], vec![-1.0, 1.0]).unwrap();
        assert_eq!(p.mean_std().unwrap(), (0.0, 1.0));
        let one = TensorF::from_flat(&[1], vec![5.0]).unwrap();
        assert!(matches!(
            one.mean_std(),
            Err(CoreError::NotEnoughElements { .. })
        ));
    }

    #[test]
    fn mean_std_recovers_normal_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dist = Normal::new(2.0f64, 3.0).unwrap();
        let data: Vec<f32> = (0..100_000).map(|_| dist.sample(&mut rng) as f32).collect();
        let t = TensorF::from_flat(&[100_000], data).unwrap();
        let (mean, std) = t.mean_std().unwrap();
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        assert!((std - 3.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn slice_then_concat_roundtrips_every_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [3usize, 4, 5];
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) as f32)
            .collect();
        let t = TensorF::from_flat(&dims, data).unwrap();
        for axis in 0..3 {
            let ext = dims[axis];
            let split = ext / 2;
            let a = t.slice_axis(axis, 0, split).unwrap();
            let b = t.slice_axis(axis, split, ext - split).unwrap();
            let back = TensorF::concat_axis(axis, &[&a, &b]).unwrap();
            assert_eq!(back, t, "axis {axis}");
        }
    }

    #[test]
    fn matmul_nt_hand_case() {
        // x = [1, 2], w = [[1, 0], [0, 1], [1, 1]] -> [1, 2, 3]
        let x = TensorF::from_flat(&[2], vec![1.0, 2.0]).unwrap();
        let w = TensorF::from_flat(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let y = x.matmul_nt(&w).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }
}

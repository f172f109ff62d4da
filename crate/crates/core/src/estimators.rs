//! Static range estimation for post-training quantization.
//!
//! Three estimators: current min-max keeps the last observed batch range,
//! running min-max keeps an exponential moving average over batches, and
//! the MSE estimator searches clipping ranges that minimize the squared
//! reconstruction error over the calibration set.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::peg::{per_group_min_max, GroupSpec};
use crate::quant::{GranularParams, QParams};
use crate::tensor::TensorF;

/// Default EMA momentum for running min-max.
pub const DEFAULT_MOMENTUM: f64 = 0.9;
/// Default number of clipping candidates for the MSE search.
pub const DEFAULT_MSE_GRID_POINTS: usize = 100;
/// Smallest clipping fraction in the MSE candidate grid; the full range
/// (fraction 1.0) is always a candidate.
pub const MSE_ALPHA_LO: f64 = 0.1;
/// The MSE estimator stores raw calibration tensors up to this many
/// elements and errors beyond it.
pub const MSE_ELEMENT_CAP: usize = 1 << 24;

/// Estimator selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Range of the most recent batch only.
    CurrentMinMax,
    /// Exponential moving average: `r <- m * r + (1 - m) * batch_stat`,
    /// initialized to the first batch statistic. `momentum` in `[0, 1)`;
    /// 0 reproduces current min-max exactly.
    RunningMinMax { momentum: f64 },
    /// Grid search over symmetric shrinkages of the observed range,
    /// minimizing the squared reconstruction error.
    Mse { grid_points: usize },
}

impl EstimatorKind {
    fn validate(&self) -> Result<()> {
        match self {
            EstimatorKind::RunningMinMax { momentum } => {
                if !(momentum.is_finite() && (0.0..1.0).contains(momentum)) {
                    return Err(CoreError::InvalidQParams(format!(
                        "momentum must lie in [0, 1), got {momentum}"
                    )));
                }
            }
            EstimatorKind::Mse { grid_points } => {
                if *grid_points < 2 {
                    return Err(CoreError::InvalidQParams(
                        "MSE search needs at least 2 grid points".into(),
                    ));
                }
            }
            EstimatorKind::CurrentMinMax => {}
        }
        Ok(())
    }
}

/// How observed statistics map onto quantizer slots.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotLayout {
    PerTensor,
    PerEmbedding { d: usize },
    PerGroup { spec: GroupSpec },
}

impl SlotLayout {
    fn slot_count(&self) -> usize {
        match self {
            SlotLayout::PerTensor => 1,
            SlotLayout::PerEmbedding { d } => *d,
            SlotLayout::PerGroup { spec } => spec.k(),
        }
    }
}

/// Range estimation state for one quantizer.
#[derive(Debug, Clone)]
pub struct RangeEstimator {
    kind: EstimatorKind,
    layout: SlotLayout,
    running_min: Vec<f64>,
    running_max: Vec<f64>,
    observed_batches: usize,
    stash: Vec<TensorF>,
    stash_elements: usize,
    stash_cap: usize,
}

impl RangeEstimator {
    pub fn new(kind: EstimatorKind, layout: SlotLayout) -> Result<Self> {
        kind.validate()?;
        let slots = layout.slot_count();
        Ok(RangeEstimator {
            kind,
            layout,
            running_min: vec![0.0; slots],
            running_max: vec![0.0; slots],
            observed_batches: 0,
            stash: Vec::new(),
            stash_elements: 0,
            stash_cap: MSE_ELEMENT_CAP,
        })
    }

    /// Override the MSE calibration cache cap (elements).
    pub fn with_cache_cap(mut self, cap: usize) -> Self {
        self.stash_cap = cap;
        self
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn observed_batches(&self) -> usize {
        self.observed_batches
    }

    /// Current per-slot `(min, max)` estimates.
    pub fn observed_ranges(&self) -> (&[f64], &[f64]) {
        (&self.running_min, &self.running_max)
    }

    fn batch_ranges(&self, t: &TensorF) -> Result<(Vec<f64>, Vec<f64>)> {
        match &self.layout {
            SlotLayout::PerTensor => {
                let (lo, hi) = t.min_max()?;
                Ok((vec![lo as f64], vec![hi as f64]))
            }
            SlotLayout::PerEmbedding { d } => {
                if t.shape().last_dim() != *d {
                    return Err(CoreError::GranularityMismatch(format!(
                        "estimator built for width {d}, batch last dim is {}",
                        t.shape().last_dim()
                    )));
                }
                let (mins, maxs) = t.per_embedding_min_max()?;
                Ok((
                    mins.iter().map(|&v| v as f64).collect(),
                    maxs.iter().map(|&v| v as f64).collect(),
                ))
            }
            SlotLayout::PerGroup { spec } => per_group_min_max(t, spec),
        }
    }

    /// Feed one calibration batch.
    pub fn observe(&mut self, t: &TensorF) -> Result<()> {
        let (mins, maxs) = self.batch_ranges(t)?;
        match self.kind {
            EstimatorKind::CurrentMinMax => {
                self.running_min = mins;
                self.running_max = maxs;
            }
            EstimatorKind::RunningMinMax { momentum } => {
                if self.observed_batches == 0 {
                    self.running_min = mins;
                    self.running_max = maxs;
                } else {
                    for i in 0..self.running_min.len() {
                        self.running_min[i] =
                            momentum * self.running_min[i] + (1.0 - momentum) * mins[i];
                        self.running_max[i] =
                            momentum * self.running_max[i] + (1.0 - momentum) * maxs[i];
                    }
                }
            }
            EstimatorKind::Mse { .. } => {
                if self.stash_elements + t.len() > self.stash_cap {
                    return Err(CoreError::CalibrationCacheFull {
                        cap: self.stash_cap,
                    });
                }
                if self.observed_batches == 0 {
                    self.running_min = mins;
                    self.running_max = maxs;
                } else {
                    for i in 0..self.running_min.len() {
                        self.running_min[i] = self.running_min[i].min(mins[i]);
                        self.running_max[i] = self.running_max[i].max(maxs[i]);
                    }
                }
                self.stash_elements += t.len();
                self.stash.push(t.clone());
            }
        }
        self.observed_batches += 1;
        Ok(())
    }

    /// Convert the observed ranges into quantizer parameters.
    pub fn finalize(&self, bits: u8, symmetric: bool) -> Result<GranularParams> {
        if self.observed_batches == 0 {
            return Err(CoreError::NoObservations);
        }
        let params = match self.kind {
            EstimatorKind::CurrentMinMax | EstimatorKind::RunningMinMax { .. } => self
                .running_min
                .iter()
                .zip(self.running_max.iter())
                .map(|(&lo, &hi)| QParams::from_range(lo, hi, bits, symmetric))
                .collect::<Result<Vec<_>>>()?,
            EstimatorKind::Mse { grid_points } => (0..self.running_min.len())
                .map(|slot| {
                    self.mse_search(slot, bits, symmetric, grid_points)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(match &self.layout {
            SlotLayout::PerTensor => GranularParams::PerTensor {
                params: params.into_iter().next().expect("one slot"),
            },
            SlotLayout::PerEmbedding { .. } => GranularParams::PerEmbedding { params },
            SlotLayout::PerGroup { spec } => GranularParams::PerEmbeddingGroup {
                spec: spec.clone(),
                params,
            },
        })
    }

    /// The clipping fraction chosen by the last MSE search per slot,
    /// exposed for diagnostics and oracle tests.
    pub fn mse_best_alpha(&self, slot: usize, bits: u8, symmetric: bool) -> Result<f64> {
        match self.kind {
            EstimatorKind::Mse { grid_points } => {
                if self.observed_batches == 0 {
                    return Err(CoreError::NoObservations);
                }
                let (alpha, _) = self.mse_search_inner(slot, bits, symmetric, grid_points)?;
                Ok(alpha)
            }
            _ => Err(CoreError::InvalidQParams(
                "alpha is only defined for the MSE estimator".into(),
            )),
        }
    }

    fn mse_search(
        &self,
        slot: usize,
        bits: u8,
        symmetric: bool,
        grid_points: usize,
    ) -> Result<QParams> {
        let (alpha, _) = self.mse_search_inner(slot, bits, symmetric, grid_points)?;
        QParams::from_range(
            alpha * self.running_min[slot],
            alpha * self.running_max[slot],
            bits,
            symmetric,
        )
    }

    /// Evaluate `grid_points` linearly spaced fractions in
    /// `[MSE_ALPHA_LO, 1]` of the observed range, shrinking both ends
    /// symmetrically, and return the first candidate with minimal squared
    /// error. The full range is always in the grid, so the winner is never
    /// worse than plain min-max.
    fn mse_search_inner(
        &self,
        slot: usize,
        bits: u8,
        symmetric: bool,
        grid_points: usize,
    ) -> Result<(f64, f64)> {
        let lo = self.running_min[slot];
        let hi = self.running_max[slot];
        let mut best_alpha = 1.0;
        let mut best_err = f64::INFINITY;
        for i in 0..grid_points {
            let alpha =
                MSE_ALPHA_LO + (1.0 - MSE_ALPHA_LO) * (i as f64) / ((grid_points - 1) as f64);
            let p = QParams::from_range(alpha * lo, alpha * hi, bits, symmetric)?;
            let mut err = 0.0f64;
            for t in &self.stash {
                err += self.slot_error(t, slot, &p);
            }
            if err < best_err {
                best_err = err;
                best_alpha = alpha;
            }
        }
        Ok((best_alpha, best_err))
    }

    fn slot_error(&self, t: &TensorF, slot: usize, p: &QParams) -> f64 {
        let mut err = 0.0f64;
        match &self.layout {
            SlotLayout::PerTensor => {
                for &v in t.data() {
                    let dv = (v - p.fake_quantize_value(v)) as f64;
                    err += dv * dv;
                }
            }
            SlotLayout::PerEmbedding { d } => {
                for (i, &v) in t.data().iter().enumerate() {
                    if i % d == slot {
                        let dv = (v - p.fake_quantize_value(v)) as f64;
                        err += dv * dv;
                    }
                }
            }
            SlotLayout::PerGroup { spec } => {
                let d = spec.d();
                for (i, &v) in t.data().iter().enumerate() {
                    if spec.group_of(i % d) == slot {
                        let dv = (v - p.fake_quantize_value(v)) as f64;
                        err += dv * dv;
                    }
                }
            }
        }
        err
    }
}

//! Static range calibration over the encoder graph: builds grouped-site
//! permutations from calibration ranges, then runs the configured
//! estimator per enabled site and freezes quantizer parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tqsim_core::estimators::{RangeEstimator, SlotLayout};
use tqsim_core::peg::GroupSpec;
use tqsim_core::quant::{GranularParams, Granularity};
use tqsim_core::tensor::TensorF;

use crate::error::{EncoderError, Result};
use crate::forward::{run_forward, ForwardOptions};
use crate::model::EncoderParams;
use crate::sites::{activation_sites, site_is_embedding_shaped, weight_sites, QuantConfig};
use crate::task::Batch;

/// Finalized state of one activation quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRuntime {
    pub enabled: bool,
    /// Present for enabled sites once calibration ran.
    pub params: Option<GranularParams>,
}

/// Finalized state of one weight quantizer. Weights are quantized from
/// their current values on every use, so learned-scale updates take
/// effect immediately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRuntime {
    pub enabled: bool,
    pub params: GranularParams,
}

/// Every quantizer's finalized parameters; the model is runnable in
/// fake-quantized mode once this exists.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibratedRuntime {
    pub activations: BTreeMap<String, SiteRuntime>,
    pub weights: BTreeMap<String, WeightRuntime>,
}

/// Keep only positions that participate in range estimation: padded token
/// rows are dropped from `(B, T, width)` sites, and attention-matrix sites
/// drop entries whose query or key is padding.
fn filter_for_estimation(name: &str, tensor: &TensorF, mask: &[bool], heads: usize) -> TensorF {
    if mask.iter().all(|&m| m) {
        return tensor.clone();
    }
    let dims = tensor.dims();
    if dims.len() == 3 {
        let (b, t, d) = (dims[0], dims[1], dims[2]);
        let mut rows = Vec::new();
        for r in 0..b * t {
            if mask[r] {
                rows.extend_from_slice(&tensor.data()[r * d..(r + 1) * d]);
            }
        }
        let n = rows.len() / d;
        if n == 0 {
            return tensor.clone();
        }
        return TensorF::from_flat(&[1, n, d], rows).expect("filtered rows are finite");
    }
    if dims.len() == 4 && name.contains("softmax") {
        let (b, t) = (dims[0], dims[2]);
        let mut vals = Vec::new();
        for bi in 0..b {
            for hh in 0..heads {
                for i in 0..t {
                    if !mask[bi * t + i] {
                        continue;
                    }
                    for j in 0..t {
                        if mask[bi * t + j] {
                            vals.push(
                                tensor.data()[((bi * heads + hh) * t + i) * t + j],
                            );
                        }
                    }
                }
            }
        }
        if vals.is_empty() {
            return tensor.clone();
        }
        let n = vals.len();
        return TensorF::from_flat(&[n], vals).expect("filtered values are finite");
    }
    tensor.clone()
}

fn layout_for(
    name: &str,
    granularity: &Granularity,
    width: usize,
    spec: Option<GroupSpec>,
) -> Result<SlotLayout> {
    match granularity {
        Granularity::PerTensor => Ok(SlotLayout::PerTensor),
        Granularity::PerEmbedding => {
            if !site_is_embedding_shaped(name) {
                return Err(EncoderError::BadGranularity {
                    site: name.into(),
                    granularity: "per-embedding".into(),
                    reason: "site tensor has no embedding axis".into(),
                });
            }
            Ok(SlotLayout::PerEmbedding { d: width })
        }
        Granularity::PerEmbeddingGroup { k, permuted } => {
            if !site_is_embedding_shaped(name) {
                return Err(EncoderError::BadGranularity {
                    site: name.into(),
                    granularity: "per-embedding-group".into(),
                    reason: "site tensor has no embedding axis".into(),
                });
            }
            let spec = match spec {
                Some(s) => s,
                None => {
                    debug_assert!(!*permuted, "permuted spec must come from phase one");
                    GroupSpec::identity(width, *k)?
                }
            };
            Ok(SlotLayout::PerGroup { spec })
        }
    }
}

/// Estimate ranges for every enabled quantizer and freeze parameters.
///
/// Grouped sites with range-based permutation are resolved first: one
/// pass over the calibration batches records each such site's
/// per-dimension dynamic range, and the permutation is built once before
/// estimation, exactly as deployment would.
pub fn calibrate(
    model: &EncoderParams,
    qconfig: &QuantConfig,
    batches: &[Batch],
) -> Result<CalibratedRuntime> {
    let cfg = &model.config;
    if batches.is_empty() {
        return Err(EncoderError::BadBatch("no calibration batches".into()));
    }

    let acts = activation_sites(cfg);
    let mut rt = CalibratedRuntime::default();

    // weight quantizers come straight from the tensors
    for site in weight_sites(cfg) {
        let settings = qconfig.effective(&site);
        if !settings.enabled {
            rt.weights.insert(
                site.name.clone(),
                WeightRuntime {
                    enabled: false,
                    params: GranularParams::per_tensor(
                        tqsim_core::quant::QParams::from_range(
                            -1.0,
                            1.0,
                            settings.bits,
                            settings.symmetric,
                        )?,
                    ),
                },
            );
            continue;
        }
        if settings.granularity != Granularity::PerTensor {
            return Err(EncoderError::BadGranularity {
                site: site.name.clone(),
                granularity: format!("{:?}", settings.granularity),
                reason: "weights are quantized per tensor".into(),
            });
        }
        let tensor = weight_tensor(model, &site.name)?;
        let mut est = RangeEstimator::new(settings.estimator, SlotLayout::PerTensor)?;
        est.observe(tensor)?;
        let params = est.finalize(settings.bits, settings.symmetric)?;
        rt.weights.insert(
            site.name.clone(),
            WeightRuntime {
                enabled: true,
                params,
            },
        );
    }

    // phase one: permutations for grouped sites that ask for one
    let mut specs: BTreeMap<String, GroupSpec> = BTreeMap::new();
    let permuted_sites: Vec<(String, usize)> = acts
        .iter()
        .filter_map(|s| match qconfig.effective(s) {
            settings if settings.enabled => match settings.granularity {
                Granularity::PerEmbeddingGroup { k, permuted: true } => Some((s.name.clone(), k)),
                _ => None,
            },
            _ => None,
        })
        .collect();
    if !permuted_sites.is_empty() {
        let mut dim_ranges: BTreeMap<String, (Vec<f32>, Vec<f32>)> = BTreeMap::new();
        for batch in batches {
            let out = run_forward(
                model,
                batch,
                None,
                &ForwardOptions {
                    record_sites: true,
                    ..Default::default()
                },
            )?;
            for (name, _) in &permuted_sites {
                let tensor = out
                    .sites
                    .get(name)
                    .ok_or_else(|| EncoderError::UnknownSite(name.clone()))?;
                let filtered = filter_for_estimation(name, tensor, &out.mask, cfg.num_heads);
                let (mins, maxs) = filtered.per_embedding_min_max()?;
                match dim_ranges.get_mut(name) {
                    None => {
                        dim_ranges.insert(name.clone(), (mins, maxs));
                    }
                    Some((lo, hi)) => {
                        for j in 0..lo.len() {
                            lo[j] = lo[j].min(mins[j]);
                            hi[j] = hi[j].max(maxs[j]);
                        }
                    }
                }
            }
        }
        for (name, k) in &permuted_sites {
            let (lo, hi) = &dim_ranges[name];
            let ranges: Vec<f64> = lo
                .iter()
                .zip(hi.iter())
                .map(|(&a, &b)| b as f64 - a as f64)
                .collect();
            specs.insert(name.clone(), GroupSpec::from_ranges(&ranges, *k)?);
        }
    }

    // phase two: the configured estimator per enabled activation site
    let mut estimators: BTreeMap<String, RangeEstimator> = BTreeMap::new();
    for batch in batches {
        let out = run_forward(
            model,
            batch,
            None,
            &ForwardOptions {
                record_sites: true,
                ..Default::default()
            },
        )?;
        for site in &acts {
            let settings = qconfig.effective(site);
            if !settings.enabled {
                continue;
            }
            let tensor = out
                .sites
                .get(&site.name)
                .ok_or_else(|| EncoderError::UnknownSite(site.name.clone()))?;
            let filtered = filter_for_estimation(&site.name, tensor, &out.mask, cfg.num_heads);
            if !estimators.contains_key(&site.name) {
                let width = *tensor.dims().last().unwrap();
                let layout = layout_for(
                    &site.name,
                    &settings.granularity,
                    width,
                    specs.get(&site.name).cloned(),
                )?;
                estimators.insert(
                    site.name.clone(),
                    RangeEstimator::new(settings.estimator, layout)?,
                );
            }
            let est = estimators.get_mut(&site.name).expect("just inserted");
            est.observe(&filtered)?;
        }
    }

    for site in &acts {
        let settings = qconfig.effective(site);
        if !settings.enabled {
            rt.activations.insert(
                site.name.clone(),
                SiteRuntime {
                    enabled: false,
                    params: None,
                },
            );
            continue;
        }
        let est = estimators
            .get(&site.name)
            .ok_or_else(|| EncoderError::UnfinalizedRange {
                site: site.name.clone(),
            })?;
        let params = est.finalize(settings.bits, settings.symmetric)?;
        rt.activations.insert(
            site.name.clone(),
            SiteRuntime {
                enabled: true,
                params: Some(params),
            },
        );
    }
    Ok(rt)
}

/// Resolve a weight-site name to its parameter tensor.
pub fn weight_tensor<'m>(model: &'m EncoderParams, name: &str) -> Result<&'m TensorF> {
    let t = match name {
        "weights.embeddings.token" => &model.tok_emb,
        "weights.embeddings.position" => &model.pos_emb,
        "weights.pooler.dense" => &model.pooler_w,
        "weights.classifier" => &model.classifier_w,
        _ => {
            let rest = name
                .strip_prefix("layer.")
                .ok_or_else(|| EncoderError::UnknownSite(name.into()))?;
            let (idx, leaf) = rest
                .split_once('.')
                .ok_or_else(|| EncoderError::UnknownSite(name.into()))?;
            let li: usize = idx
                .parse()
                .map_err(|_| EncoderError::UnknownSite(name.into()))?;
            let layer = model
                .layers
                .get(li)
                .ok_or_else(|| EncoderError::UnknownSite(name.into()))?;
            match leaf {
                "attn.wq" => &layer.wq,
                "attn.wk" => &layer.wk,
                "attn.wv" => &layer.wv,
                "attn.wo" => &layer.wo,
                "ffn.w1" => &layer.w1,
                "ffn.w2" => &layer.w2,
                _ => return Err(EncoderError::UnknownSite(name.into())),
            }
        }
    };
    Ok(t)
}

/// Mutable counterpart of [`weight_tensor`].
pub fn weight_tensor_mut<'m>(
    model: &'m mut EncoderParams,
    name: &str,
) -> Result<&'m mut TensorF> {
    let t = match name {
        "weights.embeddings.token" => &mut model.tok_emb,
        "weights.embeddings.position" => &mut model.pos_emb,
        "weights.pooler.dense" => &mut model.pooler_w,
        "weights.classifier" => &mut model.classifier_w,
        _ => {
            let rest = name
                .strip_prefix("layer.")
                .ok_or_else(|| EncoderError::UnknownSite(name.into()))?;
            let (idx, leaf) = rest
                .split_once('.')
                .ok_or_else(|| EncoderError::UnknownSite(name.into()))?;
            let li: usize = idx
                .parse()
                .map_err(|_| EncoderError::UnknownSite(name.into()))?;
            let layer = model
                .layers
                .get_mut(li)
                .ok_or_else(|| EncoderError::UnknownSite(name.into()))?;
            match leaf {
                "attn.wq" => &mut layer.wq,
                "attn.wk" => &mut layer.wk,
                "attn.wv" => &mut layer.wv,
                "attn.wo" => &mut layer.wo,
                "ffn.w1" => &mut layer.w1,
                "ffn.w2" => &mut layer.w2,
                _ => return Err(EncoderError::UnknownSite(name.into())),
            }
        }
    };
    Ok(t)
}

/// Quantization error diagnostics per enabled site: mean squared error
/// and signal-to-quantization-noise ratio of the site's fake-quantizer
/// applied to its own real-valued tensor.
pub fn site_error_report(
    model: &EncoderParams,
    runtime: &CalibratedRuntime,
    batch: &Batch,
) -> Result<Vec<(String, f64, f64)>> {
    let out = run_forward(
        model,
        batch,
        None,
        &ForwardOptions {
            record_sites: true,
            ..Default::default()
        },
    )?;
    let mut report = Vec::new();
    for (name, tensor) in &out.sites {
        let Some(site) = runtime.activations.get(name) else {
            continue;
        };
        if !site.enabled {
            continue;
        }
        let params = site
            .params
            .as_ref()
            .ok_or_else(|| EncoderError::UnfinalizedRange { site: name.clone() })?;
        let fq = tqsim_core::quant::fake_quantize(tensor, params)?;
        let mut err = 0.0f64;
        let mut sig = 0.0f64;
        for (&a, &b) in tensor.data().iter().zip(fq.data()) {
            err += ((a - b) as f64).powi(2);
            sig += (a as f64).powi(2);
        }
        let n = tensor.len() as f64;
        let mse = err / n;
        let sqnr_db = if err == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (sig / err).log10()
        };
        report.push((name.clone(), mse, sqnr_db));
    }
    Ok(report)
}

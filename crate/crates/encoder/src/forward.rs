//! The encoder forward pass. One code path serves FP32 inference,
//! fake-quantized inference, and training: quantizer sites become
//! identity when disabled, and training callers ask for the intermediate
//! caches the backward pass needs.

use std::collections::BTreeMap;

use tqsim_core::quant::fake_quantize;
use tqsim_core::tensor::TensorF;

use crate::calibrate::CalibratedRuntime;
use crate::error::{EncoderError, Result};
use crate::model::EncoderParams;
use crate::ops::{gelu_fwd, layernorm_fwd, linear_fwd, softmax_rows_masked, tanh_fwd, LnCache};
use crate::task::Batch;

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record the real-valued tensor entering every activation site.
    pub record_sites: bool,
    /// Record per-layer attention probabilities.
    pub record_probs: bool,
    /// Keep every intermediate needed by the backward pass.
    pub train_cache: bool,
}

/// Per-layer intermediates for the backward pass. `_pre` tensors are the
/// values entering a quantizer site; unsuffixed ones leave it.
pub struct LayerCache {
    pub x_in: Vec<f32>,
    pub wq_u: TensorF,
    pub wk_u: TensorF,
    pub wv_u: TensorF,
    pub wo_u: TensorF,
    pub w1_u: TensorF,
    pub w2_u: TensorF,
    pub q_pre: Vec<f32>,
    pub k_pre: Vec<f32>,
    pub v_pre: Vec<f32>,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub scores_pre: Vec<f32>,
    pub probs: Vec<f32>,
    pub probs_q: Vec<f32>,
    pub ctx_pre: Vec<f32>,
    pub ctx: Vec<f32>,
    pub proj_pre: Vec<f32>,
    pub proj: Vec<f32>,
    pub res1_pre: Vec<f32>,
    pub res1: Vec<f32>,
    pub ln1_cache: LnCache,
    pub ln1_out_pre: Vec<f32>,
    pub ln1_out: Vec<f32>,
    pub ffn_h: Vec<f32>,
    pub gelu_out: Vec<f32>,
    pub gelu_q: Vec<f32>,
    pub ffn_out_pre: Vec<f32>,
    pub ffn_out: Vec<f32>,
    pub res2_pre: Vec<f32>,
    pub res2: Vec<f32>,
    pub ln2_cache: LnCache,
    pub ln2_out_pre: Vec<f32>,
    pub ln2_out: Vec<f32>,
}

pub struct HeadCache {
    pub tok_emb_u: TensorF,
    pub pos_emb_u: TensorF,
    pub pooler_w_u: TensorF,
    pub classifier_w_u: TensorF,
    pub emb_sum_pre: Vec<f32>,
    pub emb_sum: Vec<f32>,
    pub emb_ln_cache: LnCache,
    pub emb_ln_out_pre: Vec<f32>,
    pub h0: Vec<f32>,
    pub pool_pre: Vec<f32>,
    pub pool_q: Vec<f32>,
    pub tanh_out: Vec<f32>,
    pub pooled: Vec<f32>,
    pub logits_pre: Vec<f32>,
}

pub struct TrainCaches {
    pub head: HeadCache,
    pub layers: Vec<LayerCache>,
}

pub struct Forwarded {
    pub logits: TensorF,
    pub hidden: TensorF,
    pub mask: Vec<bool>,
    pub sites: BTreeMap<String, TensorF>,
    pub probs: Vec<TensorF>,
    pub caches: Option<TrainCaches>,
}

struct SiteCtx<'a> {
    runtime: Option<&'a CalibratedRuntime>,
    record: bool,
    sites: BTreeMap<String, TensorF>,
}

impl<'a> SiteCtx<'a> {
    fn apply(&mut self, name: &str, data: Vec<f32>, dims: &[usize]) -> Result<Vec<f32>> {
        let tensor = TensorF::from_flat(dims, data)?;
        if self.record {
            self.sites.insert(name.to_string(), tensor.clone());
        }
        match self.runtime {
            None => Ok(tensor.into_data()),
            Some(rt) => {
                let site = rt
                    .activations
                    .get(name)
                    .ok_or_else(|| EncoderError::UnfinalizedRange { site: name.into() })?;
                if !site.enabled {
                    return Ok(tensor.into_data());
                }
                let params = site.params.as_ref().ok_or_else(|| {
                    EncoderError::UnfinalizedRange { site: name.into() }
                })?;
                Ok(fake_quantize(&tensor, params)?.into_data())
            }
        }
    }

    fn weight(&self, name: &str, raw: &TensorF) -> Result<TensorF> {
        match self.runtime {
            None => Ok(raw.clone()),
            Some(rt) => {
                let site = rt
                    .weights
                    .get(name)
                    .ok_or_else(|| EncoderError::UnfinalizedRange { site: name.into() })?;
                if !site.enabled {
                    return Ok(raw.clone());
                }
                Ok(fake_quantize(raw, &site.params)?)
            }
        }
    }
}

fn add_rows(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
}

/// Run the encoder. With `runtime = None` every site is identity and the
/// result is the FP32 forward; with a calibrated runtime each enabled
/// site fake-quantizes its tensor in place.
pub fn run_forward(
    model: &EncoderParams,
    batch: &Batch,
    runtime: Option<&CalibratedRuntime>,
    opts: &ForwardOptions,
) -> Result<Forwarded> {
    let cfg = &model.config;
    let (b, t) = (batch.b, batch.t);
    if batch.ids.len() != b * t {
        return Err(EncoderError::BadBatch(format!(
            "{} ids for batch {b} x {t}",
            batch.ids.len()
        )));
    }
    if t > cfg.max_seq_len {
        return Err(EncoderError::SequenceTooLong {
            got: t,
            max: cfg.max_seq_len,
        });
    }
    for &id in &batch.ids {
        if id as usize >= cfg.vocab_size {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    let d = cfg.d_model;
    let d_ff = cfg.d_ff;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let rows = b * t;
    let mask: Vec<bool> = batch.ids.iter().map(|&id| id != cfg.pad_id).collect();

    let mut ctx = SiteCtx {
        runtime,
        record: opts.record_sites,
        sites: BTreeMap::new(),
    };

    // embeddings
    let tok_emb_u = ctx.weight("weights.embeddings.token", &model.tok_emb)?;
    let pos_emb_u = ctx.weight("weights.embeddings.position", &model.pos_emb)?;
    let mut emb_sum_pre = vec![0.0f32; rows * d];
    for r in 0..rows {
        let id = batch.ids[r] as usize;
        let pos = r % t;
        let te = &tok_emb_u.data()[id * d..(id + 1) * d];
        let pe = &pos_emb_u.data()[pos * d..(pos + 1) * d];
        for j in 0..d {
            emb_sum_pre[r * d + j] = te[j] + pe[j];
        }
    }
    let emb_sum = ctx.apply("embeddings.sum", emb_sum_pre.clone(), &[b, t, d])?;
    let (emb_ln_out_pre, emb_ln_cache) =
        layernorm_fwd(&emb_sum, rows, d, &model.emb_ln.gamma, &model.emb_ln.beta);
    let mut x = ctx.apply("embeddings.layernorm_out", emb_ln_out_pre.clone(), &[b, t, d])?;

    let mut layer_caches = Vec::new();
    let mut probs_record = Vec::new();
    let scale = 1.0 / (dh as f64).sqrt();

    for (li, layer) in model.layers.iter().enumerate() {
        let name = |leaf: &str| format!("layer.{li}.{leaf}");
        let x_in = x.clone();

        let wq_u = ctx.weight(&name("attn.wq"), &layer.wq)?;
        let wk_u = ctx.weight(&name("attn.wk"), &layer.wk)?;
        let wv_u = ctx.weight(&name("attn.wv"), &layer.wv)?;
        let wo_u = ctx.weight(&name("attn.wo"), &layer.wo)?;
        let w1_u = ctx.weight(&name("ffn.w1"), &layer.w1)?;
        let w2_u = ctx.weight(&name("ffn.w2"), &layer.w2)?;

        let q_pre = linear_fwd(&x, rows, d, wq_u.data(), &layer.bq, d);
        let k_pre = linear_fwd(&x, rows, d, wk_u.data(), &layer.bk, d);
        let v_pre = linear_fwd(&x, rows, d, wv_u.data(), &layer.bv, d);
        let q = ctx.apply(&name("attn.query_out"), q_pre.clone(), &[b, t, d])?;
        let k = ctx.apply(&name("attn.key_out"), k_pre.clone(), &[b, t, d])?;
        let v = ctx.apply(&name("attn.value_out"), v_pre.clone(), &[b, t, d])?;

        // scores (B, h, T, T): q_i . k_j / sqrt(dh)
        let mut scores_pre = vec![0.0f32; b * heads * t * t];
        for bi in 0..b {
            for hh in 0..heads {
                for i in 0..t {
                    let qrow = &q[(bi * t + i) * d + hh * dh..(bi * t + i) * d + (hh + 1) * dh];
                    for j in 0..t {
                        let krow =
                            &k[(bi * t + j) * d + hh * dh..(bi * t + j) * d + (hh + 1) * dh];
                        let mut acc = 0.0f64;
                        for c in 0..dh {
                            acc += qrow[c] as f64 * krow[c] as f64;
                        }
                        scores_pre[((bi * heads + hh) * t + i) * t + j] = (acc * scale) as f32;
                    }
                }
            }
        }
        let scores_q =
            ctx.apply(&name("attn.softmax_in"), scores_pre.clone(), &[b, heads, t, t])?;
        // padding keys are excluded from every softmax row
        let probs = softmax_rows_masked(&scores_q, b * heads * t, t, |row, j| {
            let bi = row / (heads * t);
            mask[bi * t + j]
        });
        if opts.record_probs {
            probs_record.push(TensorF::from_flat(&[b, heads, t, t], probs.clone())?);
        }
        let probs_q = ctx.apply(&name("attn.softmax_out"), probs.clone(), &[b, heads, t, t])?;

        // context: probs . v per head, heads re-merged to (B, T, d)
        let mut ctx_pre = vec![0.0f32; rows * d];
        let mut acc_row = vec![0.0f64; dh];
        for bi in 0..b {
            for hh in 0..heads {
                for i in 0..t {
                    let prow = &probs_q
                        [((bi * heads + hh) * t + i) * t..((bi * heads + hh) * t + i + 1) * t];
                    acc_row.iter_mut().for_each(|a| *a = 0.0);
                    for (j, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow =
                            &v[(bi * t + j) * d + hh * dh..(bi * t + j) * d + (hh + 1) * dh];
                        for (a, &vv) in acc_row.iter_mut().zip(vrow.iter()) {
                            *a += p as f64 * vv as f64;
                        }
                    }
                    let out_row = &mut ctx_pre
                        [(bi * t + i) * d + hh * dh..(bi * t + i) * d + (hh + 1) * dh];
                    for (o, &a) in out_row.iter_mut().zip(acc_row.iter()) {
                        *o = a as f32;
                    }
                }
            }
        }
        let ctx_out = ctx.apply(&name("attn.context_out"), ctx_pre.clone(), &[b, t, d])?;

        let proj_pre = linear_fwd(&ctx_out, rows, d, wo_u.data(), &layer.bo, d);
        let proj = ctx.apply(&name("attn.proj_out"), proj_pre.clone(), &[b, t, d])?;

        let res1_pre = add_rows(&x_in, &proj);
        let res1 = ctx.apply(&name("attn.residual_sum"), res1_pre.clone(), &[b, t, d])?;
        let (ln1_out_pre, ln1_cache) =
            layernorm_fwd(&res1, rows, d, &layer.ln1.gamma, &layer.ln1.beta);
        let ln1_out = ctx.apply(&name("attn.layernorm_out"), ln1_out_pre.clone(), &[b, t, d])?;

        let ffn_h = linear_fwd(&ln1_out, rows, d, w1_u.data(), &layer.b1, d_ff);
        let gelu_out = gelu_fwd(&ffn_h);
        let gelu_q = ctx.apply(&name("ffn.intermediate"), gelu_out.clone(), &[b, t, d_ff])?;
        let ffn_out_pre = linear_fwd(&gelu_q, rows, d_ff, w2_u.data(), &layer.b2, d);
        let ffn_out = ctx.apply(&name("ffn.output"), ffn_out_pre.clone(), &[b, t, d])?;

        let res2_pre = add_rows(&ln1_out, &ffn_out);
        let res2 = ctx.apply(&name("ffn.residual_sum"), res2_pre.clone(), &[b, t, d])?;
        let (ln2_out_pre, ln2_cache) =
            layernorm_fwd(&res2, rows, d, &layer.ln2.gamma, &layer.ln2.beta);
        let ln2_out = ctx.apply(&name("ffn.layernorm_out"), ln2_out_pre.clone(), &[b, t, d])?;

        if opts.train_cache {
            layer_caches.push(LayerCache {
                x_in,
                wq_u,
                wk_u,
                wv_u,
                wo_u,
                w1_u,
                w2_u,
                q_pre,
                k_pre,
                v_pre,
                q,
                k,
                v,
                scores_pre,
                probs,
                probs_q,
                ctx_pre,
                ctx: ctx_out.clone(),
                proj_pre,
                proj,
                res1_pre,
                res1,
                ln1_cache,
                ln1_out_pre,
                ln1_out: ln1_out.clone(),
                ffn_h,
                gelu_out,
                gelu_q,
                ffn_out_pre,
                ffn_out,
                res2_pre,
                res2,
                ln2_cache,
                ln2_out_pre,
                ln2_out: ln2_out.clone(),
            });
        }
        x = ln2_out;
    }

    // pooler on position 0, then the classifier head
    let pooler_w_u = ctx.weight("weights.pooler.dense", &model.pooler_w)?;
    let classifier_w_u = ctx.weight("weights.classifier", &model.classifier_w)?;
    let mut h0 = vec![0.0f32; b * d];
    for bi in 0..b {
        h0[bi * d..(bi + 1) * d].copy_from_slice(&x[bi * t * d..bi * t * d + d]);
    }
    let pool_pre = linear_fwd(&h0, b, d, pooler_w_u.data(), &model.pooler_b, d);
    let pool_q = ctx.apply("pooler.dense_out", pool_pre.clone(), &[b, d])?;
    let tanh_out = tanh_fwd(&pool_q);
    let pooled = ctx.apply("pooler.tanh_out", tanh_out.clone(), &[b, d])?;
    let logits_pre = linear_fwd(
        &pooled,
        b,
        d,
        classifier_w_u.data(),
        &model.classifier_b,
        cfg.num_classes,
    );
    let logits = ctx.apply("final.output", logits_pre.clone(), &[b, cfg.num_classes])?;

    let caches = if opts.train_cache {
        Some(TrainCaches {
            head: HeadCache {
                tok_emb_u,
                pos_emb_u,
                pooler_w_u,
                classifier_w_u,
                emb_sum_pre,
                emb_sum,
                emb_ln_cache,
                emb_ln_out_pre,
                h0,
                pool_pre,
                pool_q,
                tanh_out,
                pooled: pooled.clone(),
                logits_pre,
            },
            layers: layer_caches,
        })
    } else {
        None
    };

    Ok(Forwarded {
        logits: TensorF::from_flat(&[b, cfg.num_classes], logits)?,
        hidden: TensorF::from_flat(&[b, t, d], x)?,
        mask,
        sites: ctx.sites,
        probs: probs_record,
        caches,
    })
}

/// FP32 forward; pass `record_sites` to also get every intermediate site
/// tensor for analysis.
pub fn forward_fp32(
    model: &EncoderParams,
    batch: &Batch,
    record_sites: bool,
) -> Result<Forwarded> {
    run_forward(
        model,
        batch,
        None,
        &ForwardOptions {
            record_sites,
            ..Default::default()
        },
    )
}

/// Fake-quantized forward with finalized ranges.
pub fn forward_quantized(
    model: &EncoderParams,
    batch: &Batch,
    runtime: &CalibratedRuntime,
) -> Result<Forwarded> {
    run_forward(model, batch, Some(runtime), &ForwardOptions::default())
}

/// For each layer and head, the mean over query positions (and batch) of
/// the attention probability assigned to `token_index`. Summing the
/// result over all token indices gives exactly 1 per head.
pub fn attention_mass_on_token(
    model: &EncoderParams,
    batch: &Batch,
    token_index: usize,
) -> Result<TensorF> {
    if token_index >= batch.t {
        return Err(EncoderError::BadBatch(format!(
            "token index {token_index} outside sequence length {}",
            batch.t
        )));
    }
    let out = run_forward(
        model,
        batch,
        None,
        &ForwardOptions {
            record_probs: true,
            ..Default::default()
        },
    )?;
    let (b, t) = (batch.b, batch.t);
    let heads = model.config.num_heads;
    let mut mass = vec![0.0f32; model.config.num_layers * heads];
    for (li, probs) in out.probs.iter().enumerate() {
        for hh in 0..heads {
            let mut acc = 0.0f64;
            for bi in 0..b {
                for i in 0..t {
                    acc += probs.data()[((bi * heads + hh) * t + i) * t + token_index] as f64;
                }
            }
            mass[li * heads + hh] = (acc / (b * t) as f64) as f32;
        }
    }
    TensorF::from_flat(&[model.config.num_layers, heads], mass).map_err(Into::into)
}

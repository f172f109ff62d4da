//! Training: cross-entropy over the classifier head, full manual
//! backpropagation through the encoder (including every fake-quantizer
//! site via the straight-through estimator), Adam with linear warmup and
//! linear decay, and optional learned quantizer scales.

use std::collections::BTreeMap;

use tqsim_core::quant::{lsq_grad_scale_factor, GranularParams};

use crate::calibrate::CalibratedRuntime;
use crate::error::{EncoderError, Result};
use crate::forward::{run_forward, ForwardOptions};
use crate::model::{for_each_param_mut, EncoderParams, GradTable};
use crate::ops::{
    adam_step, cross_entropy, gelu_bwd, layernorm_bwd, linear_bwd, lr_schedule, softmax_bwd,
    tanh_bwd,
};
use crate::task::Batch;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub total_steps: usize,
    /// Fraction of steps spent in linear warmup before the linear decay.
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learn per-tensor quantizer scales jointly with the weights.
    pub learn_scales: bool,
    /// Apply the 1/sqrt(N * qmax) gradient-scale factor to scale grads.
    pub lsq_grad_scale: bool,
    /// Hold the planted outlier rows of the FFN second linear fixed.
    pub freeze_planted: bool,
    /// Base learning rate for quantizer scales; defaults to `lr`. Scales
    /// often need to travel orders of magnitude from a poor PTQ init, so
    /// a larger rate than the weights' is common.
    pub scale_lr: Option<f64>,
    /// Record the backpropagated gradient arriving at this site's output,
    /// for gradient diagnostics.
    pub capture_grad_site: Option<String>,
}

impl TrainConfig {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        TrainConfig {
            lr,
            total_steps,
            warmup_frac: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learn_scales: false,
            lsq_grad_scale: false,
            freeze_planted: false,
            scale_lr: None,
            capture_grad_site: None,
        }
    }
}

#[derive(Debug, Default)]
struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Optimizer state across steps.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub step: usize,
    adam: BTreeMap<String, AdamSlot>,
    scale_adam: BTreeMap<String, (f64, f64)>,
    pub last_capture: Option<CapturedGrad>,
}

/// Gradient snapshot at a named site: the upstream gradient with respect
/// to the site output and the real values that entered the quantizer.
#[derive(Debug, Clone)]
pub struct CapturedGrad {
    pub site: String,
    pub grad_out: Vec<f32>,
    pub pre: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        Trainer {
            cfg,
            step: 0,
            adam: BTreeMap::new(),
            scale_adam: BTreeMap::new(),
            last_capture: None,
        }
    }
}

/// Straight-through backward through every activation site, with
/// learned-scale gradient accumulation.
struct SiteBwd<'a> {
    runtime: Option<&'a CalibratedRuntime>,
    learn_scales: bool,
    lsq_grad_scale: bool,
    scale_grads: BTreeMap<String, f64>,
    capture: Option<(&'a str, Option<CapturedGrad>)>,
}

impl<'a> SiteBwd<'a> {
    fn back(&mut self, name: &str, d_out: Vec<f32>, pre: &[f32], width: usize) -> Vec<f32> {
        if let Some((target, slot)) = &mut self.capture {
            if *target == name {
                *slot = Some(CapturedGrad {
                    site: name.to_string(),
                    grad_out: d_out.clone(),
                    pre: pre.to_vec(),
                });
            }
        }
        let Some(rt) = self.runtime else {
            return d_out;
        };
        let Some(site) = rt.activations.get(name) else {
            return d_out;
        };
        if !site.enabled {
            return d_out;
        }
        let Some(params) = site.params.as_ref() else {
            return d_out;
        };
        if self.learn_scales {
            if let GranularParams::PerTensor { params: p } = params {
                let mut acc = 0.0f64;
                for (&g, &x) in d_out.iter().zip(pre.iter()) {
                    acc += g as f64 * p.scale_grad_value(x);
                }
                if self.lsq_grad_scale {
                    acc *= lsq_grad_scale_factor(pre.len(), p.qmax());
                }
                *self.scale_grads.entry(name.to_string()).or_insert(0.0) += acc;
            }
        }
        let mut d_in = d_out;
        for (i, g) in d_in.iter_mut().enumerate() {
            let p = params.slot(i % width);
            if !p.in_range(pre[i]) {
                *g = 0.0;
            }
        }
        d_in
    }

    /// Weight-site backward: gradient w.r.t. the raw weights plus the
    /// scale gradient of the weight quantizer.
    fn weight_back(&mut self, name: &str, raw: &[f32], d_used: Vec<f32>) -> Vec<f32> {
        let Some(rt) = self.runtime else {
            return d_used;
        };
        let Some(site) = rt.weights.get(name) else {
            return d_used;
        };
        if !site.enabled {
            return d_used;
        }
        if self.learn_scales {
            if let GranularParams::PerTensor { params: p } = &site.params {
                let mut acc = 0.0f64;
                for (&g, &x) in d_used.iter().zip(raw.iter()) {
                    acc += g as f64 * p.scale_grad_value(x);
                }
                if self.lsq_grad_scale {
                    acc *= lsq_grad_scale_factor(raw.len(), p.qmax());
                }
                *self.scale_grads.entry(name.to_string()).or_insert(0.0) += acc;
            }
        }
        let width = raw.len();
        let mut d_raw = d_used;
        for (i, g) in d_raw.iter_mut().enumerate() {
            let p = site.params.slot(i % width.max(1));
            if !p.in_range(raw[i]) {
                *g = 0.0;
            }
        }
        d_raw
    }
}

/// Loss and full gradient of one batch. Exposed separately from the
/// optimizer step so tests can compare gradients against finite
/// differences.
pub fn loss_and_grads(
    model: &EncoderParams,
    runtime: Option<&CalibratedRuntime>,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(f64, GradTable, BTreeMap<String, f64>, Option<CapturedGrad>)> {
    let fwd = run_forward(
        model,
        batch,
        runtime,
        &ForwardOptions {
            train_cache: true,
            ..Default::default()
        },
    )?;
    let caches = fwd.caches.as_ref().expect("train cache requested");
    let econf = &model.config;
    let (b, t) = (batch.b, batch.t);
    if batch.labels.len() != b {
        return Err(EncoderError::BadBatch(format!(
            "{} labels for batch of {b}",
            batch.labels.len()
        )));
    }
    let d = econf.d_model;
    let d_ff = econf.d_ff;
    let heads = econf.num_heads;
    let dh = econf.head_dim();
    let rows = b * t;
    let c = econf.num_classes;
    let scale = 1.0 / (dh as f64).sqrt();

    let (loss, d_logits) = cross_entropy(fwd.logits.data(), b, c, &batch.labels);
    if !loss.is_finite() {
        return Err(EncoderError::NonFiniteLoss {
            step: 0,
            diagnostics: format!("logits range {:?}", fwd.logits.min_max()),
        });
    }

    let mut grads = GradTable::zeros_like(model);
    let mut sb = SiteBwd {
        runtime,
        learn_scales: cfg.learn_scales,
        lsq_grad_scale: cfg.lsq_grad_scale,
        scale_grads: BTreeMap::new(),
        capture: cfg.capture_grad_site.as_deref().map(|s| (s, None)),
    };
    let head = &caches.head;

    // classifier head
    let d_logits_pre = sb.back("final.output", d_logits, &head.logits_pre, c);
    let mut d_cls_w = vec![0.0f32; c * d];
    let d_pooled = {
        let mut db = vec![0.0f32; c];
        let dx = linear_bwd(
            &head.pooled,
            b,
            d,
            head.classifier_w_u.data(),
            c,
            &d_logits_pre,
            &mut d_cls_w,
            &mut db,
        );
        grads.get_mut("classifier_b").copy_from_slice(&db);
        dx
    };
    let d_cls_raw = sb.weight_back("weights.classifier", model.classifier_w.data(), d_cls_w);
    grads.get_mut("classifier_w").copy_from_slice(&d_cls_raw);

    let d_tanh_out = sb.back("pooler.tanh_out", d_pooled, &head.tanh_out, d);
    let d_pool_q = tanh_bwd(&head.tanh_out, &d_tanh_out);
    let d_pool_pre = sb.back("pooler.dense_out", d_pool_q, &head.pool_pre, d);
    let mut d_pool_w = vec![0.0f32; d * d];
    let d_h0 = {
        let mut db = vec![0.0f32; d];
        let dx = linear_bwd(
            &head.h0,
            b,
            d,
            head.pooler_w_u.data(),
            d,
            &d_pool_pre,
            &mut d_pool_w,
            &mut db,
        );
        grads.get_mut("pooler_b").copy_from_slice(&db);
        dx
    };
    let d_pool_raw = sb.weight_back("weights.pooler.dense", model.pooler_w.data(), d_pool_w);
    grads.get_mut("pooler_w").copy_from_slice(&d_pool_raw);

    // scatter pooled gradient back to position 0 of the final hidden state
    let mut d_x = vec![0.0f32; rows * d];
    for bi in 0..b {
        d_x[bi * t * d..bi * t * d + d].copy_from_slice(&d_h0[bi * d..(bi + 1) * d]);
    }

    // layers in reverse
    for li in (0..econf.num_layers).rev() {
        let cache = &caches.layers[li];
        let layer = &model.layers[li];
        let name = |leaf: &str| format!("layer.{li}.{leaf}");

        // x = ln2_out
        let d_ln2_out = d_x;
        let d_ln2_pre = sb.back(&name("ffn.layernorm_out"), d_ln2_out, &cache.ln2_out_pre, d);
        let (mut d_ln1_out, d_ffn_out) = {
            let mut dgamma = vec![0.0f32; d];
            let mut dbeta = vec![0.0f32; d];
            let d_res2 = layernorm_bwd(
                &cache.res2,
                rows,
                d,
                &layer.ln2.gamma,
                &cache.ln2_cache,
                &d_ln2_pre,
                &mut dgamma,
                &mut dbeta,
            );
            grads.get_mut(&name("ln2.gamma")).copy_from_slice(&dgamma);
            grads.get_mut(&name("ln2.beta")).copy_from_slice(&dbeta);
            let d_res2_pre = sb.back(&name("ffn.residual_sum"), d_res2, &cache.res2_pre, d);
            (d_res2_pre.clone(), d_res2_pre)
        };

        // FFN branch
        let d_ffn_out_pre = sb.back(&name("ffn.output"), d_ffn_out, &cache.ffn_out_pre, d);
        let mut d_w2 = vec![0.0f32; d * d_ff];
        let d_gelu_q = {
            let mut db = vec![0.0f32; d];
            let dx = linear_bwd(
                &cache.gelu_q,
                rows,
                d_ff,
                cache.w2_u.data(),
                d,
                &d_ffn_out_pre,
                &mut d_w2,
                &mut db,
            );
            grads.get_mut(&name("b2")).copy_from_slice(&db);
            dx
        };
        let d_w2_raw = sb.weight_back(&name("ffn.w2"), layer.w2.data(), d_w2);
        grads.get_mut(&name("w2")).copy_from_slice(&d_w2_raw);

        let d_gelu_out = sb.back(&name("ffn.intermediate"), d_gelu_q, &cache.gelu_out, d_ff);
        let d_ffn_h = gelu_bwd(&cache.ffn_h, &d_gelu_out);
        let mut d_w1 = vec![0.0f32; d_ff * d];
        {
            let mut db = vec![0.0f32; d_ff];
            let dx = linear_bwd(
                &cache.ln1_out,
                rows,
                d,
                cache.w1_u.data(),
                d_ff,
                &d_ffn_h,
                &mut d_w1,
                &mut db,
            );
            grads.get_mut(&name("b1")).copy_from_slice(&db);
            for (a, v) in d_ln1_out.iter_mut().zip(dx.iter()) {
                *a += v;
            }
        }
        let d_w1_raw = sb.weight_back(&name("ffn.w1"), layer.w1.data(), d_w1);
        grads.get_mut(&name("w1")).copy_from_slice(&d_w1_raw);

        let d_ln1_pre = sb.back(&name("attn.layernorm_out"), d_ln1_out, &cache.ln1_out_pre, d);
        let (mut d_x_next, d_proj) = {
            let mut dgamma = vec![0.0f32; d];
            let mut dbeta = vec![0.0f32; d];
            let d_res1 = layernorm_bwd(
                &cache.res1,
                rows,
                d,
                &layer.ln1.gamma,
                &cache.ln1_cache,
                &d_ln1_pre,
                &mut dgamma,
                &mut dbeta,
            );
            grads.get_mut(&name("ln1.gamma")).copy_from_slice(&dgamma);
            grads.get_mut(&name("ln1.beta")).copy_from_slice(&dbeta);
            let d_res1_pre = sb.back(&name("attn.residual_sum"), d_res1, &cache.res1_pre, d);
            (d_res1_pre.clone(), d_res1_pre)
        };

        // attention branch
        let d_proj_pre = sb.back(&name("attn.proj_out"), d_proj, &cache.proj_pre, d);
        let mut d_wo = vec![0.0f32; d * d];
        let d_ctx = {
            let mut db = vec![0.0f32; d];
            let dx = linear_bwd(
                &cache.ctx,
                rows,
                d,
                cache.wo_u.data(),
                d,
                &d_proj_pre,
                &mut d_wo,
                &mut db,
            );
            grads.get_mut(&name("bo")).copy_from_slice(&db);
            dx
        };
        let d_wo_raw = sb.weight_back(&name("attn.wo"), layer.wo.data(), d_wo);
        grads.get_mut(&name("wo")).copy_from_slice(&d_wo_raw);

        let d_ctx_pre = sb.back(&name("attn.context_out"), d_ctx, &cache.ctx_pre, d);

        // context = probs_q . v
        let mut d_probs_q = vec![0.0f32; b * heads * t * t];
        let mut d_v = vec![0.0f32; rows * d];
        for bi in 0..b {
            for hh in 0..heads {
                for i in 0..t {
                    let dctx_row =
                        &d_ctx_pre[(bi * t + i) * d + hh * dh..(bi * t + i) * d + (hh + 1) * dh];
                    let prow_base = ((bi * heads + hh) * t + i) * t;
                    for j in 0..t {
                        let vrow =
                            &cache.v[(bi * t + j) * d + hh * dh..(bi * t + j) * d + (hh + 1) * dh];
                        let mut acc = 0.0f64;
                        for cc in 0..dh {
                            acc += dctx_row[cc] as f64 * vrow[cc] as f64;
                        }
                        d_probs_q[prow_base + j] = acc as f32;
                        let p = cache.probs_q[prow_base + j];
                        let dvrow = &mut d_v
                            [(bi * t + j) * d + hh * dh..(bi * t + j) * d + (hh + 1) * dh];
                        for cc in 0..dh {
                            dvrow[cc] += p * dctx_row[cc];
                        }
                    }
                }
            }
        }

        let d_probs = sb.back(&name("attn.softmax_out"), d_probs_q, &cache.probs, t);
        let d_scores_q = softmax_bwd(&cache.probs, b * heads * t, t, &d_probs);
        let d_scores = sb.back(&name("attn.softmax_in"), d_scores_q, &cache.scores_pre, t);

        // scores = q . k / sqrt(dh)
        let mut d_q = vec![0.0f32; rows * d];
        let mut d_k = vec![0.0f32; rows * d];
        for bi in 0..b {
            for hh in 0..heads {
                for i in 0..t {
                    let srow_base = ((bi * heads + hh) * t + i) * t;
                    let qrow =
                        &cache.q[(bi * t + i) * d + hh * dh..(bi * t + i) * d + (hh + 1) * dh];
                    for j in 0..t {
                        let g = d_scores[srow_base + j] as f64 * scale;
                        if g == 0.0 {
                            continue;
                        }
                        let krow =
                            &cache.k[(bi * t + j) * d + hh * dh..(bi * t + j) * d + (hh + 1) * dh];
                        let dqrow = &mut d_q
                            [(bi * t + i) * d + hh * dh..(bi * t + i) * d + (hh + 1) * dh];
                        for cc in 0..dh {
                            dqrow[cc] += (g * krow[cc] as f64) as f32;
                        }
                        let dkrow = &mut d_k
                            [(bi * t + j) * d + hh * dh..(bi * t + j) * d + (hh + 1) * dh];
                        for cc in 0..dh {
                            dkrow[cc] += (g * qrow[cc] as f64) as f32;
                        }
                    }
                }
            }
        }

        // back through the q/k/v linears into the layer input
        let back_linear = |site: &str,
                               wname: &str,
                               gname_w: &str,
                               gname_b: &str,
                               w_used: &tqsim_core::tensor::TensorF,
                               w_raw: &tqsim_core::tensor::TensorF,
                               pre: &[f32],
                               d_out: Vec<f32>,
                               sb: &mut SiteBwd,
                               grads: &mut GradTable,
                               d_x_acc: &mut [f32]| {
            let d_pre = sb.back(site, d_out, pre, d);
            let mut dw = vec![0.0f32; d * d];
            let mut db = vec![0.0f32; d];
            let dx = linear_bwd(&cache.x_in, rows, d, w_used.data(), d, &d_pre, &mut dw, &mut db);
            grads.get_mut(gname_b).copy_from_slice(&db);
            let dw_raw = sb.weight_back(wname, w_raw.data(), dw);
            grads.get_mut(gname_w).copy_from_slice(&dw_raw);
            for (a, v) in d_x_acc.iter_mut().zip(dx.iter()) {
                *a += v;
            }
        };
        back_linear(
            &name("attn.value_out"),
            &name("attn.wv"),
            &name("wv"),
            &name("bv"),
            &cache.wv_u,
            &layer.wv,
            &cache.v_pre,
            d_v,
            &mut sb,
            &mut grads,
            &mut d_x_next,
        );
        back_linear(
            &name("attn.key_out"),
            &name("attn.wk"),
            &name("wk"),
            &name("bk"),
            &cache.wk_u,
            &layer.wk,
            &cache.k_pre,
            d_k,
            &mut sb,
            &mut grads,
            &mut d_x_next,
        );
        back_linear(
            &name("attn.query_out"),
            &name("attn.wq"),
            &name("wq"),
            &name("bq"),
            &cache.wq_u,
            &layer.wq,
            &cache.q_pre,
            d_q,
            &mut sb,
            &mut grads,
            &mut d_x_next,
        );

        d_x = d_x_next;
    }

    // embeddings
    let d_emb_ln_out = d_x;
    let d_emb_ln_pre = sb.back(
        "embeddings.layernorm_out",
        d_emb_ln_out,
        &head.emb_ln_out_pre,
        d,
    );
    let d_emb_sum = {
        let mut dgamma = vec![0.0f32; d];
        let mut dbeta = vec![0.0f32; d];
        let dx = layernorm_bwd(
            &head.emb_sum,
            rows,
            d,
            &model.emb_ln.gamma,
            &head.emb_ln_cache,
            &d_emb_ln_pre,
            &mut dgamma,
            &mut dbeta,
        );
        grads.get_mut("emb_ln.gamma").copy_from_slice(&dgamma);
        grads.get_mut("emb_ln.beta").copy_from_slice(&dbeta);
        dx
    };
    let d_emb_sum_pre = sb.back("embeddings.sum", d_emb_sum, &head.emb_sum_pre, d);
    let mut d_tok_used = vec![0.0f32; econf.vocab_size * d];
    let mut d_pos_used = vec![0.0f32; econf.max_seq_len * d];
    for r in 0..rows {
        let id = batch.ids[r] as usize;
        let pos = r % t;
        for j in 0..d {
            let g = d_emb_sum_pre[r * d + j];
            d_tok_used[id * d + j] += g;
            d_pos_used[pos * d + j] += g;
        }
    }
    let d_tok_raw = sb.weight_back("weights.embeddings.token", model.tok_emb.data(), d_tok_used);
    grads.get_mut("tok_emb").copy_from_slice(&d_tok_raw);
    let d_pos_raw = sb.weight_back(
        "weights.embeddings.position",
        model.pos_emb.data(),
        d_pos_used,
    );
    grads.get_mut("pos_emb").copy_from_slice(&d_pos_raw);

    // keep the planted outlier machinery fixed: the separator marker,
    // each layer's beacon unit, its couplings, and the LayerNorm
    // parameters of the planted dims the beacon reads through
    if cfg.freeze_planted {
        if let Some(planted) = &model.planted {
            let sep = crate::model::SEPARATOR_TOKEN_ID as usize;
            grads.get_mut("tok_emb")[sep * d..(sep + 1) * d].fill(0.0);
            for &j in &planted.dims {
                grads.get_mut("emb_ln.gamma")[j] = 0.0;
                grads.get_mut("emb_ln.beta")[j] = 0.0;
            }
            for li in 0..econf.num_layers {
                let unit = crate::model::beacon_unit(d_ff);
                grads.get_mut(&format!("layer.{li}.w1"))[unit * d..(unit + 1) * d].fill(0.0);
                grads.get_mut(&format!("layer.{li}.b1"))[unit] = 0.0;
                let w2 = grads.get_mut(&format!("layer.{li}.w2"));
                for &j in &planted.dims {
                    w2[j * d_ff + unit] = 0.0;
                }
                for name in ["ln1", "ln2"] {
                    for leaf in ["gamma", "beta"] {
                        let g = grads.get_mut(&format!("layer.{li}.{name}.{leaf}"));
                        for &j in &planted.dims {
                            g[j] = 0.0;
                        }
                    }
                }
            }
        }
    }

    let capture = sb.capture.and_then(|(_, slot)| slot);
    Ok((loss, grads, sb.scale_grads, capture))
}

/// One optimizer step: forward, backward, Adam update of parameters and
/// (optionally) of every per-tensor quantizer scale.
pub fn qat_train_step(
    model: &mut EncoderParams,
    runtime: Option<&mut CalibratedRuntime>,
    batch: &Batch,
    trainer: &mut Trainer,
) -> Result<StepStats> {
    let cfg = trainer.cfg.clone();
    let (loss, grads, scale_grads, capture) =
        loss_and_grads(model, runtime.as_deref(), batch, &cfg).map_err(|e| match e {
            EncoderError::NonFiniteLoss { diagnostics, .. } => EncoderError::NonFiniteLoss {
                step: trainer.step,
                diagnostics,
            },
            other => other,
        })?;
    trainer.last_capture = capture;

    let lr = lr_schedule(cfg.lr, trainer.step, cfg.total_steps, cfg.warmup_frac);
    let t_adam = trainer.step + 1;
    let adam = &mut trainer.adam;
    for_each_param_mut(model, |pname, data| {
        let g = grads.get(pname);
        let slot = adam.entry(pname.to_string()).or_insert_with(|| AdamSlot {
            m: vec![0.0; g.len()],
            v: vec![0.0; g.len()],
        });
        adam_step(
            data, g, &mut slot.m, &mut slot.v, lr, cfg.beta1, cfg.beta2, cfg.eps, t_adam,
        );
    });

    if cfg.learn_scales {
        if let Some(rt) = runtime {
            let scale_lr = match cfg.scale_lr {
                Some(base) => lr_schedule(base, trainer.step, cfg.total_steps, cfg.warmup_frac),
                None => lr,
            };
            for (site, g) in &scale_grads {
                let (m, v) = trainer.scale_adam.entry(site.clone()).or_insert((0.0, 0.0));
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / (1.0 - cfg.beta1.powi(t_adam as i32));
                let vhat = *v / (1.0 - cfg.beta2.powi(t_adam as i32));
                let delta = scale_lr * mhat / (vhat.sqrt() + cfg.eps);
                update_scale(rt, site, delta)?;
            }
        }
    }

    trainer.step += 1;
    Ok(StepStats { loss, lr })
}

fn update_scale(rt: &mut CalibratedRuntime, site: &str, delta: f64) -> Result<()> {
    if let Some(s) = rt.activations.get_mut(site) {
        if let Some(GranularParams::PerTensor { params }) = &mut s.params {
            let new_scale = (params.scale() - delta).max(1e-8);
            *params = params.with_scale(new_scale)?;
        }
        return Ok(());
    }
    if let Some(w) = rt.weights.get_mut(site) {
        if let GranularParams::PerTensor { params } = &mut w.params {
            let new_scale = (params.scale() - delta).max(1e-8);
            *params = params.with_scale(new_scale)?;
        }
        return Ok(());
    }
    Err(EncoderError::UnknownSite(site.to_string()))
}

/// Run the trainer over `batches`, cycling, for its configured number of
/// steps. Returns the per-step losses.
pub fn train_loop(
    model: &mut EncoderParams,
    mut runtime: Option<&mut CalibratedRuntime>,
    batches: &[Batch],
    trainer: &mut Trainer,
) -> Result<Vec<f64>> {
    if batches.is_empty() {
        return Err(EncoderError::BadBatch("no training batches".into()));
    }
    let mut losses = Vec::with_capacity(trainer.cfg.total_steps);
    for i in 0..trainer.cfg.total_steps {
        let batch = &batches[i % batches.len()];
        let stats = qat_train_step(model, runtime.as_deref_mut(), batch, trainer)?;
        losses.push(stats.loss);
    }
    Ok(losses)
}

/// Classification accuracy over batches, FP32 or fake-quantized.
pub fn evaluate_accuracy(
    model: &EncoderParams,
    runtime: Option<&CalibratedRuntime>,
    batches: &[Batch],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in batches {
        let out = run_forward(model, batch, runtime, &ForwardOptions::default())?;
        let c = model.config.num_classes;
        for r in 0..batch.b {
            let row = &out.logits.data()[r * c..(r + 1) * c];
            let mut best = 0usize;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best as u32 == batch.labels[r] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

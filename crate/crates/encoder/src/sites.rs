//! The quantizer-site ledger: every tensor edge of the encoder graph gets
//! a named site, so configurations, ablations, and reports address the
//! same roster.
//!
//! Activation sites, 13 per layer plus 5 global:
//!   embeddings.sum, embeddings.layernorm_out,
//!   layer.{i}.attn.{query_out, key_out, value_out, softmax_in,
//!     softmax_out, context_out, proj_out, residual_sum, layernorm_out},
//!   layer.{i}.ffn.{intermediate, output, residual_sum, layernorm_out},
//!   pooler.dense_out, pooler.tanh_out, final.output.
//!
//! The FFN consumes `layer.{i}.attn.layernorm_out`, so that site is the
//! "FFN input" of mixed-precision policies. A 12-layer base-shaped graph
//! has 13 * 12 + 5 = 161 activation quantizers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tqsim_core::estimators::EstimatorKind;
use tqsim_core::quant::Granularity;

use crate::config::EncoderConfig;
use crate::error::{EncoderError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Weight,
    Activation,
}

/// One named quantizer location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteDesc {
    pub name: String,
    pub kind: SiteKind,
}

/// Per-site quantizer configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSettings {
    pub bits: u8,
    pub symmetric: bool,
    pub estimator: EstimatorKind,
    pub granularity: Granularity,
    pub enabled: bool,
}

impl SiteSettings {
    /// Symmetric 8-bit min-max, the usual weight default.
    pub fn weight_default() -> Self {
        SiteSettings {
            bits: 8,
            symmetric: true,
            estimator: EstimatorKind::CurrentMinMax,
            granularity: Granularity::PerTensor,
            enabled: true,
        }
    }

    /// Asymmetric 8-bit current min-max, the usual activation default.
    pub fn activation_default() -> Self {
        SiteSettings {
            bits: 8,
            symmetric: false,
            estimator: EstimatorKind::CurrentMinMax,
            granularity: Granularity::PerTensor,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        SiteSettings {
            enabled: false,
            ..SiteSettings::activation_default()
        }
    }
}

/// The mixed-precision ledger: a default policy per site kind plus named
/// overrides. Every graph site is covered by an explicit entry or the
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub weight_default: SiteSettings,
    pub activation_default: SiteSettings,
    pub overrides: BTreeMap<String, SiteSettings>,
}

impl QuantConfig {
    /// Joint 8-bit quantization: symmetric weights, asymmetric
    /// activations, everything enabled.
    pub fn w8a8() -> Self {
        QuantConfig {
            weight_default: SiteSettings::weight_default(),
            activation_default: SiteSettings::activation_default(),
            overrides: BTreeMap::new(),
        }
    }

    /// Everything pass-through; useful as a quantization-free baseline.
    pub fn all_disabled() -> Self {
        QuantConfig {
            weight_default: SiteSettings {
                enabled: false,
                ..SiteSettings::weight_default()
            },
            activation_default: SiteSettings::disabled(),
            overrides: BTreeMap::new(),
        }
    }

    /// Weights quantized, activations pass-through.
    pub fn weights_only() -> Self {
        QuantConfig {
            weight_default: SiteSettings::weight_default(),
            activation_default: SiteSettings::disabled(),
            overrides: BTreeMap::new(),
        }
    }

    /// Activations quantized, weights pass-through (the leave-one-out
    /// protocol).
    pub fn activations_only() -> Self {
        QuantConfig {
            weight_default: SiteSettings {
                enabled: false,
                ..SiteSettings::weight_default()
            },
            activation_default: SiteSettings::activation_default(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn effective(&self, site: &SiteDesc) -> SiteSettings {
        if let Some(s) = self.overrides.get(&site.name) {
            return s.clone();
        }
        match site.kind {
            SiteKind::Weight => self.weight_default.clone(),
            SiteKind::Activation => self.activation_default.clone(),
        }
    }

    pub fn set_override(&mut self, name: impl Into<String>, settings: SiteSettings) {
        self.overrides.insert(name.into(), settings);
    }
}

/// Canonical activation-site roster in graph order.
pub fn activation_sites(cfg: &EncoderConfig) -> Vec<SiteDesc> {
    let mut out = Vec::with_capacity(13 * cfg.num_layers + 5);
    let act = |name: String| SiteDesc {
        name,
        kind: SiteKind::Activation,
    };
    out.push(act("embeddings.sum".into()));
    out.push(act("embeddings.layernorm_out".into()));
    for i in 0..cfg.num_layers {
        for leaf in [
            "attn.query_out",
            "attn.key_out",
            "attn.value_out",
            "attn.softmax_in",
            "attn.softmax_out",
            "attn.context_out",
            "attn.proj_out",
            "attn.residual_sum",
            "attn.layernorm_out",
            "ffn.intermediate",
            "ffn.output",
            "ffn.residual_sum",
            "ffn.layernorm_out",
        ] {
            out.push(act(format!("layer.{i}.{leaf}")));
        }
    }
    out.push(act("pooler.dense_out".into()));
    out.push(act("pooler.tanh_out".into()));
    out.push(act("final.output".into()));
    out
}

/// Canonical weight-site roster.
pub fn weight_sites(cfg: &EncoderConfig) -> Vec<SiteDesc> {
    let mut out = Vec::new();
    let w = |name: String| SiteDesc {
        name,
        kind: SiteKind::Weight,
    };
    out.push(w("weights.embeddings.token".into()));
    out.push(w("weights.embeddings.position".into()));
    for i in 0..cfg.num_layers {
        for leaf in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"] {
            out.push(w(format!("layer.{i}.{leaf}")));
        }
    }
    out.push(w("weights.pooler.dense".into()));
    out.push(w("weights.classifier".into()));
    out
}

/// Sites shaped `(B, T, width)` support per-embedding and grouped
/// granularity; the rest are per-tensor only.
pub fn site_is_embedding_shaped(name: &str) -> bool {
    name.starts_with("embeddings.")
        || name.ends_with("query_out")
        || name.ends_with("key_out")
        || name.ends_with("value_out")
        || name.ends_with("context_out")
        || name.ends_with("proj_out")
        || name.ends_with("residual_sum")
        || name.ends_with("layernorm_out")
        || name.ends_with("intermediate")
        || name.ends_with("ffn.output")
}

/// A named set of activation sites for leave-one-out ablation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteGroup {
    pub name: String,
    pub sites: Vec<String>,
}

impl SiteGroup {
    pub fn custom(name: impl Into<String>, sites: Vec<String>) -> Self {
        SiteGroup {
            name: name.into(),
            sites,
        }
    }
}

/// The five canonical ablation groups.
pub const ABLATION_GROUPS: [&str; 5] = [
    "softmax_input",
    "sum_of_embeddings",
    "self_attention_output",
    "softmax_output",
    "ffn_residual_sums",
];

pub fn canonical_group(cfg: &EncoderConfig, name: &str) -> Result<SiteGroup> {
    let per_layer = |leaf: &str| -> Vec<String> {
        (0..cfg.num_layers)
            .map(|i| format!("layer.{i}.{leaf}"))
            .collect()
    };
    let sites = match name {
        "softmax_input" => per_layer("attn.softmax_in"),
        "sum_of_embeddings" => vec!["embeddings.sum".into()],
        "self_attention_output" => per_layer("attn.proj_out"),
        "softmax_output" => per_layer("attn.softmax_out"),
        "ffn_residual_sums" => per_layer("ffn.residual_sum"),
        "all_activations" => activation_sites(cfg).into_iter().map(|s| s.name).collect(),
        other => return Err(EncoderError::UnknownGroup(other.to_string())),
    };
    Ok(SiteGroup {
        name: name.to_string(),
        sites,
    })
}

/// Which site families are promoted to 16 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MixedPrecisionPolicy {
    /// The residual sum after the FFN.
    pub ffn_residual_sum: bool,
    /// The FFN input (the attention LayerNorm output) and FFN output.
    pub ffn_input_output: bool,
    /// The final model output, switched to the MSE range estimator.
    pub final_output_mse: bool,
}

impl MixedPrecisionPolicy {
    /// All three promotions.
    pub fn full() -> Self {
        MixedPrecisionPolicy {
            ffn_residual_sum: true,
            ffn_input_output: true,
            final_output_mse: true,
        }
    }

    pub fn sites(&self, cfg: &EncoderConfig) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..cfg.num_layers {
            if self.ffn_residual_sum {
                out.push(format!("layer.{i}.ffn.residual_sum"));
            }
            if self.ffn_input_output {
                out.push(format!("layer.{i}.attn.layernorm_out"));
                out.push(format!("layer.{i}.ffn.output"));
            }
        }
        if self.final_output_mse {
            out.push("final.output".into());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromotionReport {
    pub promoted: usize,
    pub total_activation_sites: usize,
}

impl PromotionReport {
    pub fn fraction(&self) -> f64 {
        self.promoted as f64 / self.total_activation_sites as f64
    }
}

/// Promote the policy's site families to 16-bit overrides. Returns the
/// updated config and the promoted fraction of activation quantizers.
pub fn assign_mixed_precision(
    cfg: &EncoderConfig,
    qconfig: &QuantConfig,
    policy: &MixedPrecisionPolicy,
) -> (QuantConfig, PromotionReport) {
    let mut out = qconfig.clone();
    let roster = activation_sites(cfg);
    let mut promoted = 0usize;
    for name in policy.sites(cfg) {
        let desc = SiteDesc {
            name: name.clone(),
            kind: SiteKind::Activation,
        };
        let mut s = qconfig.effective(&desc);
        s.bits = 16;
        if policy.final_output_mse && name == "final.output" {
            s.estimator = EstimatorKind::Mse {
                grid_points: tqsim_core::estimators::DEFAULT_MSE_GRID_POINTS,
            };
        }
        out.set_override(name, s);
        promoted += 1;
    }
    (
        out,
        PromotionReport {
            promoted,
            total_activation_sites: roster.len(),
        },
    )
}

/// Drop the overrides a policy created, returning those sites to default
/// coverage. Promoting then demoting an override-free config restores it
/// exactly.
pub fn remove_mixed_precision(
    cfg: &EncoderConfig,
    qconfig: &QuantConfig,
    policy: &MixedPrecisionPolicy,
) -> QuantConfig {
    let mut out = qconfig.clone();
    for name in policy.sites(cfg) {
        out.overrides.remove(&name);
    }
    out
}

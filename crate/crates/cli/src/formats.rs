//! Human-readable serialization of quantizer configurations, grouped-scheme
//! plans, and finalized ranges, plus the binary model container.
//!
//! Configs and plans are versioned structured text (TOML / JSON); only
//! tensors are binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tqsim_core::peg::GroupSpec;
use tqsim_core::quant::GranularParams;
use tqsim_encoder::calibrate::CalibratedRuntime;
use tqsim_encoder::model::{EncoderParams, LayerParams, PlantedOutliers};
use tqsim_encoder::sites::{QuantConfig, SiteSettings};
use tqsim_encoder::EncoderConfig;
use tqsim_core::peg::LayerNormParams;
use tqsim_core::tensor::TensorF;

use crate::error::{CliError, Result};
use crate::tensor_file::{self, CrcMode};

pub const QCONFIG_VERSION: u32 = 1;
pub const PLAN_VERSION: u32 = 1;
pub const MODEL_MAGIC: &[u8; 8] = b"QMODEL1\n";

/// On-disk quantizer configuration: defaults, per-site overrides, and
/// (after range estimation) finalized parameters per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConfigFile {
    pub version: u32,
    pub weight_default: SiteSettings,
    pub activation_default: SiteSettings,
    #[serde(default)]
    pub sites: BTreeMap<String, SiteSettings>,
    /// Present once `estimate-ranges` ran.
    #[serde(default)]
    pub ranges: Option<RangesFile>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RangesFile {
    pub activations: BTreeMap<String, SiteRangeEntry>,
    pub weights: BTreeMap<String, SiteRangeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRangeEntry {
    pub enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<GranularParams>,
}

impl QConfigFile {
    pub fn from_config(qconfig: &QuantConfig) -> Self {
        QConfigFile {
            version: QCONFIG_VERSION,
            weight_default: qconfig.weight_default.clone(),
            activation_default: qconfig.activation_default.clone(),
            sites: qconfig.overrides.clone(),
            ranges: None,
        }
    }

    pub fn to_config(&self) -> QuantConfig {
        QuantConfig {
            weight_default: self.weight_default.clone(),
            activation_default: self.activation_default.clone(),
            overrides: self.sites.clone(),
        }
    }

    pub fn with_runtime(mut self, rt: &CalibratedRuntime) -> Self {
        let mut ranges = RangesFile::default();
        for (name, site) in &rt.activations {
            ranges.activations.insert(
                name.clone(),
                SiteRangeEntry {
                    enabled: site.enabled,
                    params: site.params.clone(),
                },
            );
        }
        for (name, w) in &rt.weights {
            ranges.weights.insert(
                name.clone(),
                SiteRangeEntry {
                    enabled: w.enabled,
                    params: Some(w.params.clone()),
                },
            );
        }
        self.ranges = Some(ranges);
        self
    }

    /// Rebuild the runtime recorded by `estimate-ranges`.
    pub fn runtime(&self) -> Result<CalibratedRuntime> {
        let ranges = self
            .ranges
            .as_ref()
            .ok_or_else(|| CliError::config("qconfig has no finalized ranges; run estimate-ranges first"))?;
        let mut rt = CalibratedRuntime::default();
        for (name, entry) in &ranges.activations {
            rt.activations.insert(
                name.clone(),
                tqsim_encoder::SiteRuntime {
                    enabled: entry.enabled,
                    params: entry.params.clone(),
                },
            );
        }
        for (name, entry) in &ranges.weights {
            let params = entry.params.clone().ok_or_else(|| {
                CliError::config(format!("weight site `{name}` has no parameters"))
            })?;
            rt.weights.insert(
                name.clone(),
                tqsim_encoder::WeightRuntime {
                    enabled: entry.enabled,
                    params,
                },
            );
        }
        Ok(rt)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("serializing qconfig: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: QConfigFile = toml::from_str(text)
            .map_err(|e| CliError::config(format!("parsing qconfig: {e}")))?;
        if file.version != QCONFIG_VERSION {
            return Err(CliError::config(format!(
                "unsupported qconfig version {}",
                file.version
            )));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)
            .map_err(|e| CliError::config(format!("writing {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Grouped-quantization plan: the permutation, group count, and per-group
/// calibration ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PegPlanFile {
    pub version: u32,
    pub d: usize,
    pub k: usize,
    /// Original dimension at each permuted position.
    pub permutation: Vec<usize>,
    pub group_min: Vec<f64>,
    pub group_max: Vec<f64>,
}

impl PegPlanFile {
    pub fn new(spec: &GroupSpec, group_min: Vec<f64>, group_max: Vec<f64>) -> Self {
        PegPlanFile {
            version: PLAN_VERSION,
            d: spec.d(),
            k: spec.k(),
            permutation: spec.perm().to_vec(),
            group_min,
            group_max,
        }
    }

    pub fn spec(&self) -> Result<GroupSpec> {
        GroupSpec::from_permutation(self.permutation.clone(), self.k).map_err(Into::into)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("serializing plan: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: PegPlanFile = serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("parsing plan: {e}")))?;
        if plan.version != PLAN_VERSION {
            return Err(CliError::config(format!(
                "unsupported plan version {}",
                plan.version
            )));
        }
        Ok(plan)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)
            .map_err(|e| CliError::config(format!("writing {}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    config: EncoderConfig,
    planted: Option<PlantedOutliers>,
    tensors: Vec<String>,
}

fn named_tensors(model: &EncoderParams) -> Vec<(String, TensorF)> {
    let mut out: Vec<(String, TensorF)> = Vec::new();
    let vec1 = |v: &[f32]| TensorF::from_flat(&[v.len()], v.to_vec()).expect("finite params");
    out.push(("tok_emb".into(), model.tok_emb.clone()));
    out.push(("pos_emb".into(), model.pos_emb.clone()));
    out.push(("emb_ln.gamma".into(), vec1(&model.emb_ln.gamma)));
    out.push(("emb_ln.beta".into(), vec1(&model.emb_ln.beta)));
    for (i, l) in model.layers.iter().enumerate() {
        let p = |leaf: &str| format!("layer.{i}.{leaf}");
        out.push((p("wq"), l.wq.clone()));
        out.push((p("bq"), vec1(&l.bq)));
        out.push((p("wk"), l.wk.clone()));
        out.push((p("bk"), vec1(&l.bk)));
        out.push((p("wv"), l.wv.clone()));
        out.push((p("bv"), vec1(&l.bv)));
        out.push((p("wo"), l.wo.clone()));
        out.push((p("bo"), vec1(&l.bo)));
        out.push((p("ln1.gamma"), vec1(&l.ln1.gamma)));
        out.push((p("ln1.beta"), vec1(&l.ln1.beta)));
        out.push((p("w1"), l.w1.clone()));
        out.push((p("b1"), vec1(&l.b1)));
        out.push((p("w2"), l.w2.clone()));
        out.push((p("b2"), vec1(&l.b2)));
        out.push((p("ln2.gamma"), vec1(&l.ln2.gamma)));
        out.push((p("ln2.beta"), vec1(&l.ln2.beta)));
    }
    out.push(("pooler_w".into(), model.pooler_w.clone()));
    out.push(("pooler_b".into(), vec1(&model.pooler_b)));
    out.push(("classifier_w".into(), model.classifier_w.clone()));
    out.push(("classifier_b".into(), vec1(&model.classifier_b)));
    out
}

/// Serialize a model: a JSON header (config, planted metadata, tensor
/// index) followed by one embedded tensor container per parameter, in
/// canonical order.
pub fn encode_model(model: &EncoderParams) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let header = ModelHeader {
        config: model.config.clone(),
        planted: model.planted.clone(),
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| CliError::config(format!("serializing model header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in &tensors {
        let blob = tensor_file::encode(tensor, CrcMode::Present);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<EncoderParams> {
    if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
        return Err(CliError::input(
            "bad model magic at offset 0; expected a QMODEL1 container",
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end {
        return Err(CliError::input(format!(
            "model header truncated at offset {}",
            bytes.len()
        )));
    }
    let header: ModelHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| CliError::input(format!("parsing model header: {e}")))?;
    let mut offset = header_end;
    let mut tensors: BTreeMap<String, TensorF> = BTreeMap::new();
    for name in &header.tensors {
        if bytes.len() < offset + 8 {
            return Err(CliError::input(format!(
                "model truncated at offset {offset} before tensor `{name}`"
            )));
        }
        let blob_len =
            u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()) as usize;
        offset += 8;
        if bytes.len() < offset + blob_len {
            return Err(CliError::input(format!(
                "model truncated at offset {offset} inside tensor `{name}`"
            )));
        }
        let (tensor, _) = tensor_file::decode(&bytes[offset..offset + blob_len])?;
        offset += blob_len;
        tensors.insert(name.clone(), tensor);
    }
    if offset != bytes.len() {
        return Err(CliError::input(format!(
            "{} trailing bytes after the last tensor at offset {offset}",
            bytes.len() - offset
        )));
    }
    rebuild_model(header.config, header.planted, &tensors)
}

fn rebuild_model(
    config: EncoderConfig,
    planted: Option<PlantedOutliers>,
    tensors: &BTreeMap<String, TensorF>,
) -> Result<EncoderParams> {
    let get = |name: &str| -> Result<TensorF> {
        tensors
            .get(name)
            .cloned()
            .ok_or_else(|| CliError::input(format!("model is missing tensor `{name}`")))
    };
    let getv = |name: &str| -> Result<Vec<f32>> { Ok(get(name)?.into_data()) };
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        let p = |leaf: &str| format!("layer.{i}.{leaf}");
        layers.push(LayerParams {
            wq: get(&p("wq"))?,
            bq: getv(&p("bq"))?,
            wk: get(&p("wk"))?,
            bk: getv(&p("bk"))?,
            wv: get(&p("wv"))?,
            bv: getv(&p("bv"))?,
            wo: get(&p("wo"))?,
            bo: getv(&p("bo"))?,
            ln1: LayerNormParams {
                gamma: getv(&p("ln1.gamma"))?,
                beta: getv(&p("ln1.beta"))?,
            },
            w1: get(&p("w1"))?,
            b1: getv(&p("b1"))?,
            w2: get(&p("w2"))?,
            b2: getv(&p("b2"))?,
            ln2: LayerNormParams {
                gamma: getv(&p("ln2.gamma"))?,
                beta: getv(&p("ln2.beta"))?,
            },
        });
    }
    Ok(EncoderParams {
        tok_emb: get("tok_emb")?,
        pos_emb: get("pos_emb")?,
        emb_ln: LayerNormParams {
            gamma: getv("emb_ln.gamma")?,
            beta: getv("emb_ln.beta")?,
        },
        layers,
        pooler_w: get("pooler_w")?,
        pooler_b: getv("pooler_b")?,
        classifier_w: get("classifier_w")?,
        classifier_b: getv("classifier_b")?,
        planted,
        config,
    })
}

pub fn write_model(path: &Path, model: &EncoderParams) -> Result<()> {
    fs::write(path, encode_model(model)?)
        .map_err(|e| CliError::input(format!("writing {}: {e}", path.display())))
}

pub fn read_model(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::input(format!("reading {}: {e}", path.display())))?;
    decode_model(&bytes)
}

//! Model parameters, initialization, and the synthetic outlier injection
//! used to reproduce the dynamic-range failure mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tqsim_core::peg::LayerNormParams;
use tqsim_core::tensor::TensorF;

use crate::config::EncoderConfig;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: TensorF,
    pub bq: Vec<f32>,
    pub wk: TensorF,
    pub bk: Vec<f32>,
    pub wv: TensorF,
    pub bv: Vec<f32>,
    pub wo: TensorF,
    pub bo: Vec<f32>,
    pub ln1: LayerNormParams,
    pub w1: TensorF,
    pub b1: Vec<f32>,
    pub w2: TensorF,
    pub b2: Vec<f32>,
    pub ln2: LayerNormParams,
}

/// Record of the outlier construction, kept so training can hold the
/// planted rows fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedOutliers {
    pub dims: Vec<usize>,
    pub magnitude: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: TensorF,
    pub pos_emb: TensorF,
    pub emb_ln: LayerNormParams,
    pub layers: Vec<LayerParams>,
    pub pooler_w: TensorF,
    pub pooler_b: Vec<f32>,
    pub classifier_w: TensorF,
    pub classifier_b: Vec<f32>,
    pub planted: Option<PlantedOutliers>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, dims: &[usize], std: f64) -> TensorF {
    let dist = Normal::new(0.0f64, std).unwrap();
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
    TensorF::from_flat(dims, data).unwrap()
}

impl EncoderParams {
    /// Random initialization: N(0, 0.05) projections, N(0, 0.5)
    /// embeddings, unit LayerNorms, zero biases.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let d_ff = config.d_ff;
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                wq: normal_tensor(&mut rng, &[d, d], 0.05),
                bq: vec![0.0; d],
                wk: normal_tensor(&mut rng, &[d, d], 0.05),
                bk: vec![0.0; d],
                wv: normal_tensor(&mut rng, &[d, d], 0.05),
                bv: vec![0.0; d],
                wo: normal_tensor(&mut rng, &[d, d], 0.05),
                bo: vec![0.0; d],
                ln1: LayerNormParams::unit(d),
                w1: normal_tensor(&mut rng, &[d_ff, d], 0.05),
                b1: vec![0.0; d_ff],
                w2: normal_tensor(&mut rng, &[d, d_ff], 0.05),
                b2: vec![0.0; d],
                ln2: LayerNormParams::unit(d),
            });
        }
        Ok(EncoderParams {
            tok_emb: normal_tensor(&mut rng, &[config.vocab_size, d], 0.5),
            pos_emb: normal_tensor(&mut rng, &[config.max_seq_len, d], 0.1),
            emb_ln: LayerNormParams::unit(d),
            pooler_w: normal_tensor(&mut rng, &[d, d], 0.05),
            pooler_b: vec![0.0; d],
            classifier_w: normal_tensor(&mut rng, &[config.num_classes, d], 0.05),
            classifier_b: vec![0.0; config.num_classes],
            layers,
            planted: None,
            config,
        })
    }

    /// Zero-weight model (LayerNorms stay unit); handy for structural
    /// checks like "FFN output is zero".
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let d_ff = config.d_ff;
        let z = |dims: &[usize]| TensorF::zeros(dims).unwrap();
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: z(&[d, d]),
                bq: vec![0.0; d],
                wk: z(&[d, d]),
                bk: vec![0.0; d],
                wv: z(&[d, d]),
                bv: vec![0.0; d],
                wo: z(&[d, d]),
                bo: vec![0.0; d],
                ln1: LayerNormParams::unit(d),
                w1: z(&[d_ff, d]),
                b1: vec![0.0; d_ff],
                w2: z(&[d, d_ff]),
                b2: vec![0.0; d],
                ln2: LayerNormParams::unit(d),
            })
            .collect();
        Ok(EncoderParams {
            tok_emb: z(&[config.vocab_size, d]),
            pos_emb: z(&[config.max_seq_len, d]),
            emb_ln: LayerNormParams::unit(d),
            pooler_w: z(&[d, d]),
            pooler_b: vec![0.0; d],
            classifier_w: z(&[config.num_classes, d]),
            classifier_b: vec![0.0; config.num_classes],
            layers,
            planted: None,
            config,
        })
    }
}

/// Token id the outlier construction keys its spikes to; the synthetic
/// task closes every sequence with it.
pub const SEPARATOR_TOKEN_ID: u32 = 2;
/// Coupling from the beacon unit onto an outlier dimension, as a
/// fraction of the requested magnitude.
const OUTLIER_COUPLING: f32 = 0.5;
/// Norm of the beacon read-out direction over the outlier dims.
const BEACON_GAIN: f32 = 1.0;
/// Negative pre-activation bias of the beacon unit; content tokens stay
/// below it, the separator's marker pattern fires well above it.
const BEACON_THRESHOLD: f32 = 3.0;
/// Embedding marker planted on the separator token's outlier dims.
const EMB_MARKER: f32 = 8.0;

/// Hidden unit carrying the beacon in every FFN.
pub fn beacon_unit(d_ff: usize) -> usize {
    d_ff - 1
}

/// Construct a model whose FFN second-layer weights and biases make the
/// designated output dimensions produce values around `magnitude` times
/// the bulk scale on separator positions.
///
/// The separator token's embedding carries a signed marker on the
/// designated dims. In every layer, one FFN hidden unit becomes a beacon:
/// its first-linear row reads exactly that signed pattern and its bias
/// sits high enough that content tokens never fire it; the second linear
/// couples the unit back onto the designated dims with `±magnitude / 2`.
/// Each layer therefore re-emits large spikes on the separator position
/// — and only there — so the FFN output and residual sum carry
/// structured outlier dimensions whose dynamic range dwarfs the bulk,
/// while every LayerNorm output stays bounded. This is the
/// separator-keyed outlier structure pre-trained encoders exhibit.
pub fn inject_outlier_model(
    config: EncoderConfig,
    outlier_dims: &[usize],
    magnitude: f32,
    seed: u64,
) -> Result<EncoderParams> {
    let d = config.d_model;
    for &j in outlier_dims {
        if j >= d {
            return Err(crate::error::EncoderError::InvalidConfig(format!(
                "outlier dim {j} outside embedding width {d}"
            )));
        }
    }
    if (SEPARATOR_TOKEN_ID as usize) >= config.vocab_size {
        return Err(crate::error::EncoderError::InvalidConfig(
            "vocab too small for the separator token".into(),
        ));
    }
    let mut model = EncoderParams::init(config, seed)?;
    let m = outlier_dims.len().max(1);
    let read_weight = BEACON_GAIN / (m as f32).sqrt();
    let sign_of = |idx: usize| if idx % 2 == 0 { 1.0f32 } else { -1.0 };

    let sep_row =
        &mut model.tok_emb.data_mut()[SEPARATOR_TOKEN_ID as usize * d..(SEPARATOR_TOKEN_ID as usize + 1) * d];
    for (idx, &j) in outlier_dims.iter().enumerate() {
        sep_row[j] = sign_of(idx) * EMB_MARKER;
    }

    for layer in &mut model.layers {
        let d_ff = layer.w1.dims()[0];
        let unit = beacon_unit(d_ff);
        let beacon_row = &mut layer.w1.data_mut()[unit * d..(unit + 1) * d];
        beacon_row.fill(0.0);
        for (idx, &j) in outlier_dims.iter().enumerate() {
            beacon_row[j] = sign_of(idx) * read_weight;
        }
        layer.b1[unit] = -BEACON_THRESHOLD;
        for (idx, &j) in outlier_dims.iter().enumerate() {
            layer.w2.data_mut()[j * d_ff + unit] =
                sign_of(idx) * magnitude * OUTLIER_COUPLING;
        }
    }
    model.planted = Some(PlantedOutliers {
        dims: outlier_dims.to_vec(),
        magnitude,
    });
    Ok(model)
}

/// Visit every parameter tensor with its canonical name, mutably, zipped
/// against a same-shaped gradient table. Ordering is fixed so optimizer
/// state and serialized checkpoints stay aligned.
pub fn for_each_param_mut(
    model: &mut EncoderParams,
    mut f: impl FnMut(&str, &mut [f32]),
) {
    f("tok_emb", model.tok_emb.data_mut());
    f("pos_emb", model.pos_emb.data_mut());
    f("emb_ln.gamma", &mut model.emb_ln.gamma);
    f("emb_ln.beta", &mut model.emb_ln.beta);
    for (i, l) in model.layers.iter_mut().enumerate() {
        let p = |leaf: &str| format!("layer.{i}.{leaf}");
        f(&p("wq"), l.wq.data_mut());
        f(&p("bq"), &mut l.bq);
        f(&p("wk"), l.wk.data_mut());
        f(&p("bk"), &mut l.bk);
        f(&p("wv"), l.wv.data_mut());
        f(&p("bv"), &mut l.bv);
        f(&p("wo"), l.wo.data_mut());
        f(&p("bo"), &mut l.bo);
        f(&p("ln1.gamma"), &mut l.ln1.gamma);
        f(&p("ln1.beta"), &mut l.ln1.beta);
        f(&p("w1"), l.w1.data_mut());
        f(&p("b1"), &mut l.b1);
        f(&p("w2"), l.w2.data_mut());
        f(&p("b2"), &mut l.b2);
        f(&p("ln2.gamma"), &mut l.ln2.gamma);
        f(&p("ln2.beta"), &mut l.ln2.beta);
    }
    f("pooler_w", model.pooler_w.data_mut());
    f("pooler_b", &mut model.pooler_b);
    f("classifier_w", model.classifier_w.data_mut());
    f("classifier_b", &mut model.classifier_b);
}

/// Immutable traversal in the same canonical order.
pub fn for_each_param(model: &EncoderParams, mut f: impl FnMut(&str, &[f32])) {
    f("tok_emb", model.tok_emb.data());
    f("pos_emb", model.pos_emb.data());
    f("emb_ln.gamma", &model.emb_ln.gamma);
    f("emb_ln.beta", &model.emb_ln.beta);
    for (i, l) in model.layers.iter().enumerate() {
        let p = |leaf: &str| format!("layer.{i}.{leaf}");
        f(&p("wq"), l.wq.data());
        f(&p("bq"), &l.bq);
        f(&p("wk"), l.wk.data());
        f(&p("bk"), &l.bk);
        f(&p("wv"), l.wv.data());
        f(&p("bv"), &l.bv);
        f(&p("wo"), l.wo.data());
        f(&p("bo"), &l.bo);
        f(&p("ln1.gamma"), &l.ln1.gamma);
        f(&p("ln1.beta"), &l.ln1.beta);
        f(&p("w1"), l.w1.data());
        f(&p("b1"), &l.b1);
        f(&p("w2"), l.w2.data());
        f(&p("b2"), &l.b2);
        f(&p("ln2.gamma"), &l.ln2.gamma);
        f(&p("ln2.beta"), &l.ln2.beta);
    }
    f("pooler_w", model.pooler_w.data());
    f("pooler_b", &model.pooler_b);
    f("classifier_w", model.classifier_w.data());
    f("classifier_b", &model.classifier_b);
}

/// Gradient table with the same canonical names as the parameters.
#[derive(Debug, Clone)]
pub struct GradTable {
    pub grads: std::collections::BTreeMap<String, Vec<f32>>,
}

impl GradTable {
    pub fn zeros_like(model: &EncoderParams) -> Self {
        let mut grads = std::collections::BTreeMap::new();
        for_each_param(model, |name, data| {
            grads.insert(name.to_string(), vec![0.0f32; data.len()]);
        });
        GradTable { grads }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f32> {
        self.grads.get_mut(name).expect("gradient slot exists")
    }

    pub fn get(&self, name: &str) -> &[f32] {
        self.grads.get(name).expect("gradient slot exists")
    }
}

//! Calibrated quantized inference and the ablation harness.

use tqsim_encoder::ablate::leave_one_out_ablation;
use tqsim_encoder::calibrate::calibrate;
use tqsim_encoder::forward::{forward_fp32, forward_quantized};
use tqsim_encoder::model::EncoderParams;
use tqsim_encoder::sites::{canonical_group, QuantConfig, SiteGroup};
use tqsim_encoder::task::TaskConfig;
use tqsim_encoder::train::evaluate_accuracy;
use tqsim_encoder::EncoderConfig;

fn small_setup() -> (EncoderParams, TaskConfig) {
    let cfg = EncoderConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        max_seq_len: 10,
        vocab_size: 32,
        num_classes: 2,
        pad_id: 0,
    };
    let model = EncoderParams::init(cfg.clone(), 51).unwrap();
    let task = TaskConfig::for_encoder(&cfg);
    (model, task)
}

#[test]
fn all_sites_disabled_is_bit_exact_to_fp32() {
    let (model, task) = small_setup();
    let calib = vec![task.generate(1, 2)];
    let rt = calibrate(&model, &QuantConfig::all_disabled(), &calib).unwrap();
    let batch = task.generate(2, 6);
    let fp = forward_fp32(&model, &batch, false).unwrap();
    let q = forward_quantized(&model, &batch, &rt).unwrap();
    assert_eq!(fp.logits.data(), q.logits.data());
    assert_eq!(fp.hidden.data(), q.hidden.data());
}

#[test]
fn quantized_forward_requires_finalized_ranges() {
    let (model, task) = small_setup();
    let calib = vec![task.generate(1, 2)];
    let rt = calibrate(&model, &QuantConfig::w8a8(), &calib).unwrap();
    let mut broken = rt.clone();
    broken.activations.remove("layer.0.ffn.residual_sum");
    let batch = task.generate(2, 4);
    assert!(forward_quantized(&model, &batch, &rt).is_ok());
    let err = match forward_quantized(&model, &batch, &broken) {
        Err(e) => e,
        Ok(_) => panic!("missing range must be an error"),
    };
    assert!(err.to_string().contains("no finalized range"), "{err}");
}

#[test]
fn empty_exclusion_equals_fully_quantized_baseline() {
    let (model, task) = small_setup();
    let calib = vec![task.generate(3, 2)];
    let eval = vec![task.generate(4, 32)];
    let rows = leave_one_out_ablation(
        &model,
        &QuantConfig::activations_only(),
        &[],
        &calib,
        |rt| evaluate_accuracy(&model, Some(rt), &eval),
    )
    .unwrap();
    assert_eq!(rows.len(), 1);
    let rt = calibrate(&model, &QuantConfig::activations_only(), &calib).unwrap();
    let baseline = evaluate_accuracy(&model, Some(&rt), &eval).unwrap();
    assert_eq!(rows[0].score, baseline);
    assert_eq!(rows[0].excluded_group, "none");
}

#[test]
fn excluding_every_activation_site_matches_weights_only() {
    let (model, task) = small_setup();
    let calib = vec![task.generate(5, 2)];
    let eval = vec![task.generate(6, 32)];
    let all = canonical_group(&model.config, "all_activations").unwrap();
    let rows = leave_one_out_ablation(&model, &QuantConfig::w8a8(), &[all], &calib, |rt| {
        evaluate_accuracy(&model, Some(rt), &eval)
    })
    .unwrap();
    let weights_only_rt = calibrate(&model, &QuantConfig::weights_only(), &calib).unwrap();
    let weights_only = evaluate_accuracy(&model, Some(&weights_only_rt), &eval).unwrap();
    assert_eq!(rows[1].score, weights_only);
}

#[test]
fn ablation_is_invariant_to_group_order() {
    let (model, task) = small_setup();
    let calib = vec![task.generate(7, 2)];
    let eval = vec![task.generate(8, 24)];
    let g1 = canonical_group(&model.config, "softmax_input").unwrap();
    let g2 = canonical_group(&model.config, "ffn_residual_sums").unwrap();
    let score = |groups: &[SiteGroup]| {
        leave_one_out_ablation(&model, &QuantConfig::w8a8(), groups, &calib, |rt| {
            evaluate_accuracy(&model, Some(rt), &eval)
        })
        .unwrap()
    };
    let fwd = score(&[g1.clone(), g2.clone()]);
    let rev = score(&[g2, g1]);
    let find = |rows: &[tqsim_encoder::AblationRow], name: &str| -> f64 {
        rows.iter().find(|r| r.excluded_group == name).unwrap().score
    };
    for name in ["none", "softmax_input", "ffn_residual_sums"] {
        assert_eq!(find(&fwd, name), find(&rev, name), "{name}");
    }
}

#[test]
fn grouped_sites_calibrate_and_run() {
    use tqsim_core::quant::Granularity;
    use tqsim_encoder::sites::SiteSettings;
    let (model, task) = small_setup();
    let mut qc = QuantConfig::w8a8();
    for i in 0..model.config.num_layers {
        qc.set_override(
            format!("layer.{i}.ffn.residual_sum"),
            SiteSettings {
                granularity: Granularity::PerEmbeddingGroup {
                    k: 4,
                    permuted: true,
                },
                ..SiteSettings::activation_default()
            },
        );
    }
    let calib = vec![task.generate(9, 4), task.generate(10, 4)];
    let rt = calibrate(&model, &qc, &calib).unwrap();
    let batch = task.generate(11, 8);
    forward_quantized(&model, &batch, &rt).unwrap();
    // grouped parameters really are grouped
    let params = rt.activations["layer.0.ffn.residual_sum"]
        .params
        .as_ref()
        .unwrap();
    assert_eq!(params.slot_count(), 4);
}

#[test]
fn per_embedding_granularity_rejected_on_flat_sites() {
    use tqsim_core::quant::Granularity;
    use tqsim_encoder::sites::SiteSettings;
    let (model, task) = small_setup();
    let mut qc = QuantConfig::w8a8();
    qc.set_override(
        "layer.0.attn.softmax_in",
        SiteSettings {
            granularity: Granularity::PerEmbedding,
            ..SiteSettings::activation_default()
        },
    );
    let calib = vec![task.generate(12, 2)];
    let err = calibrate(&model, &qc, &calib).unwrap_err();
    assert!(err.to_string().contains("granularity"), "{err}");
}

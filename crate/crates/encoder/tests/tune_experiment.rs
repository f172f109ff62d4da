//! Scratch experiment for the planted-outlier pipeline (removed before release).
use tqsim_core::estimators::EstimatorKind;
use tqsim_core::quant::Granularity;
use tqsim_encoder::calibrate::calibrate;
use tqsim_encoder::model::inject_outlier_model;
use tqsim_encoder::sites::{canonical_group, QuantConfig, SiteSettings, MixedPrecisionPolicy, assign_mixed_precision};
use tqsim_encoder::task::TaskConfig;
use tqsim_encoder::train::{evaluate_accuracy, train_loop, TrainConfig, Trainer};
use tqsim_encoder::ablate::leave_one_out_ablation;
use tqsim_encoder::EncoderConfig;

fn cfg48() -> EncoderConfig {
    EncoderConfig { num_layers: 4, d_model: 48, num_heads: 4, d_ff: 192, max_seq_len: 16, vocab_size: 64, num_classes: 2, pad_id: 0 }
}

#[test]
#[ignore]
fn tune_planted_pipeline() {
    let cfg = cfg48();
    let task = TaskConfig { seq_len: 12, vocab_size: 64, cls_id: 1, sep_id: 2, trigger_a: 7, trigger_b: 13, num_classes: 2 };
    let dims: Vec<usize> = (0..16).map(|i| 3 * i).collect();
    let mut model = inject_outlier_model(cfg.clone(), &dims, 300.0, 1234).unwrap();

    let train_batches = task.training_batches(777, 24, 32);
    let eval = vec![task.generate(31337, 512)];
    let mut trainer = Trainer::new(TrainConfig { freeze_planted: true, ..TrainConfig::new(2e-3, 1000) });
    train_loop(&mut model, None, &train_batches, &mut trainer).unwrap();
    let fp32 = evaluate_accuracy(&model, None, &eval).unwrap();
    eprintln!("fp32 acc = {fp32}");

    // check outliers survive: residual-sum ranges per dim
    let probe = task.generate(55, 8);
    let out = tqsim_encoder::forward_fp32(&model, &probe, true).unwrap();
    for li in [0usize, 3] {
        let t = &out.sites[&format!("layer.{li}.ffn.residual_sum")];
        let (mins, maxs) = t.per_embedding_min_max().unwrap();
        let mut ranges: Vec<(usize, f32)> = mins.iter().zip(maxs.iter()).enumerate().map(|(j, (&a, &b))| (j, b - a)).collect();
        ranges.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
        eprintln!("layer {li} top ranges: {:?}", &ranges[..6]);
    }

    // PTQ W8A8, current min-max over one 16-sequence batch
    let calib = vec![task.generate(4242, 16)];
    let calib1 = vec![task.generate(4242, 1)];
    let rt = calibrate(&model, &QuantConfig::w8a8(), &calib).unwrap();
    let w8a8 = evaluate_accuracy(&model, Some(&rt), &eval).unwrap();
    eprintln!("w8a8 acc = {w8a8} (gap {})", fp32 - w8a8);

    // leave-one-out (weights fp32)
    let groups: Vec<_> = ["softmax_input", "sum_of_embeddings", "self_attention_output", "softmax_output", "ffn_residual_sums"]
        .iter().map(|g| canonical_group(&cfg, g).unwrap()).collect();
    let rows = leave_one_out_ablation(&model, &QuantConfig::activations_only(), &groups, &calib1,
        |rt| evaluate_accuracy(&model, Some(rt), &eval)).unwrap();
    for r in &rows { eprintln!("LOO {}: {}", r.excluded_group, r.score); }

    // PEG K=3 permuted on FFN input/output/sum
    let mut qc_peg = QuantConfig::w8a8();
    for i in 0..cfg.num_layers {
        for leaf in ["attn.layernorm_out", "ffn.output", "ffn.residual_sum"] {
            qc_peg.set_override(format!("layer.{i}.{leaf}"), SiteSettings {
                granularity: Granularity::PerEmbeddingGroup { k: 3, permuted: true },
                ..SiteSettings::activation_default()
            });
        }
    }
    let rt_peg = calibrate(&model, &qc_peg, &calib).unwrap();
    let peg = evaluate_accuracy(&model, Some(&rt_peg), &eval).unwrap();
    eprintln!("peg3+perm acc = {peg} (recovery {})", (peg - w8a8) / (fp32 - w8a8));

    // PEG K=3 unpermuted for contrast
    let mut qc_pegi = QuantConfig::w8a8();
    for i in 0..cfg.num_layers {
        for leaf in ["attn.layernorm_out", "ffn.output", "ffn.residual_sum"] {
            qc_pegi.set_override(format!("layer.{i}.{leaf}"), SiteSettings {
                granularity: Granularity::PerEmbeddingGroup { k: 3, permuted: false },
                ..SiteSettings::activation_default()
            });
        }
    }
    let rt_pegi = calibrate(&model, &qc_pegi, &calib).unwrap();
    eprintln!("peg3 ident acc = {}", evaluate_accuracy(&model, Some(&rt_pegi), &eval).unwrap());

    // MP 16-bit
    let (qc_mp, rep) = assign_mixed_precision(&cfg, &QuantConfig::w8a8(), &MixedPrecisionPolicy { ffn_residual_sum: true, ffn_input_output: true, final_output_mse: false });
    let rt_mp = calibrate(&model, &qc_mp, &calib).unwrap();
    let mp = evaluate_accuracy(&model, Some(&rt_mp), &eval).unwrap();
    eprintln!("mp16 acc = {mp} (recovery {}) promoted {}/{}", (mp - w8a8) / (fp32 - w8a8), rep.promoted, rep.total_activation_sites);

    // QAT from PTQ init
    let mut qat_model = model.clone();
    let mut qat_rt = rt.clone();
    let mut qat_trainer = Trainer::new(TrainConfig { learn_scales: true, freeze_planted: true, scale_lr: Some(0.05), ..TrainConfig::new(5e-4, 400) });
    train_loop(&mut qat_model, Some(&mut qat_rt), &train_batches, &mut qat_trainer).unwrap();
    let qat = evaluate_accuracy(&qat_model, Some(&qat_rt), &eval).unwrap();
    eprintln!("qat w8a8 acc = {qat} (ptq was {w8a8})");

    // W4A8
    let mut qc_w4 = QuantConfig::w8a8();
    qc_w4.weight_default.bits = 4;
    qc_w4.weight_default.estimator = EstimatorKind::Mse { grid_points: 100 };
    let rt_w4 = calibrate(&model, &qc_w4, &calib).unwrap();
    let w4a8 = evaluate_accuracy(&model, Some(&rt_w4), &eval).unwrap();
    eprintln!("w4a8 ptq acc = {w4a8}");
    let mut w4_model = model.clone();
    let mut w4_rt = rt_w4.clone();
    let mut w4_trainer = Trainer::new(TrainConfig { learn_scales: true, freeze_planted: true, scale_lr: Some(0.05), ..TrainConfig::new(5e-4, 400) });
    train_loop(&mut w4_model, Some(&mut w4_rt), &train_batches, &mut w4_trainer).unwrap();
    let w4qat = evaluate_accuracy(&w4_model, Some(&w4_rt), &eval).unwrap();
    eprintln!("w4a8 qat acc = {w4qat}");
}

//! Produce a ready-to-analyze bundle: a small encoder trained on the
//! synthetic co-occurrence task (with planted activation outliers), token
//! tensors for calibration and evaluation, and a default quantizer
//! config.
//!
//! Usage: cargo run -p tqsim-cli --example make_demo -- <output-dir>

use std::path::PathBuf;

use tqsim_cli::formats::{write_model, QConfigFile};
use tqsim_cli::tensor_file::{self, CrcMode};
use tqsim_core::tensor::TensorF;
use tqsim_encoder::model::inject_outlier_model;
use tqsim_encoder::sites::QuantConfig;
use tqsim_encoder::task::TaskConfig;
use tqsim_encoder::train::{evaluate_accuracy, train_loop, TrainConfig, Trainer};
use tqsim_encoder::{Batch, EncoderConfig};

fn tokens_tensor(batch: &Batch) -> TensorF {
    let data: Vec<f32> = batch.ids.iter().map(|&v| v as f32).collect();
    TensorF::from_flat(&[batch.b, batch.t], data).unwrap()
}

fn main() {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "demo".to_string()),
    );
    std::fs::create_dir_all(&dir).expect("create output dir");

    let cfg = EncoderConfig {
        num_layers: 4,
        d_model: 48,
        num_heads: 4,
        d_ff: 192,
        max_seq_len: 16,
        vocab_size: 64,
        num_classes: 2,
        pad_id: 0,
    };
    let task = TaskConfig {
        seq_len: 12,
        vocab_size: cfg.vocab_size,
        cls_id: 1,
        sep_id: 2,
        trigger_a: 7,
        trigger_b: 13,
        num_classes: 2,
    };

    println!("training a planted-outlier model on the co-occurrence task…");
    let mut model = inject_outlier_model(cfg, &[5, 21, 37], 200.0, 1234).unwrap();
    let batches = task.training_batches(777, 16, 32);
    let mut trainer = Trainer::new(TrainConfig {
        freeze_planted: true,
        ..TrainConfig::new(2e-3, 600)
    });
    train_loop(&mut model, None, &batches, &mut trainer).unwrap();
    let eval = task.generate(31337, 256);
    let acc = evaluate_accuracy(&model, None, &[eval.clone()]).unwrap();
    println!("fp32 accuracy: {acc}");

    write_model(&dir.join("model.qmodel"), &model).unwrap();
    QConfigFile::from_config(&QuantConfig::w8a8())
        .write(&dir.join("qc.toml"))
        .unwrap();
    tensor_file::write_file(
        &dir.join("calib.qtnsr"),
        &tokens_tensor(&task.generate(4242, 4)),
        CrcMode::Present,
    )
    .unwrap();
    tensor_file::write_file(
        &dir.join("eval.qtnsr"),
        &tokens_tensor(&eval),
        CrcMode::Present,
    )
    .unwrap();
    println!("wrote model.qmodel, qc.toml, calib.qtnsr, eval.qtnsr to {}", dir.display());
}

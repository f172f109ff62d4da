//! Implementations of the subcommands. Everything here is deterministic:
//! identical inputs produce byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tqsim_core::estimators::{EstimatorKind, RangeEstimator, SlotLayout};
use tqsim_core::peg::{build_range_permutation, per_group_min_max, GroupSpec};
use tqsim_core::quant::{fake_quantize, Granularity};
use tqsim_core::tensor::TensorF;
use tqsim_encoder::ablate::leave_one_out_ablation;
use tqsim_encoder::calibrate::{calibrate, site_error_report};
use tqsim_encoder::task::{Batch, TaskConfig};
use tqsim_encoder::train::evaluate_accuracy;
use tqsim_encoder::{canonical_group, forward_fp32, EncoderParams};

use crate::error::{CliError, Result};
use crate::formats::{PegPlanFile, QConfigFile};
use crate::reports::{detect_outliers, outlier_cells_csv, outlier_dims_csv, token_ranges_csv};
use crate::tensor_file::{self, CrcMode};

pub fn cmd_outliers(
    input: &Path,
    sigma: f64,
    pooled: bool,
    out: &Path,
    dims_out: Option<&Path>,
) -> Result<()> {
    let (tensor, info) = tensor_file::read_file(input)?;
    let report = detect_outliers(&tensor, sigma, pooled)?;
    std::fs::write(out, outlier_cells_csv(&report, info.crc_present))
        .map_err(|e| CliError::input(format!("writing {}: {e}", out.display())))?;
    let dims_path = match dims_out {
        Some(p) => p.to_path_buf(),
        None => derive_path(out, ".dims.csv"),
    };
    std::fs::write(&dims_path, outlier_dims_csv(&report))
        .map_err(|e| CliError::input(format!("writing {}: {e}", dims_path.display())))?;
    println!(
        "{} cells flagged across {} dims (sigma = {sigma})",
        report.cells.len(),
        report.dim_counts.iter().filter(|&&c| c > 0).count()
    );
    Ok(())
}

fn derive_path(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_token_ranges(input: &Path, out: &Path) -> Result<()> {
    let (tensor, info) = tensor_file::read_file(input)?;
    let csv = token_ranges_csv(&tensor, info.crc_present)?;
    std::fs::write(out, csv)
        .map_err(|e| CliError::input(format!("writing {}: {e}", out.display())))?;
    Ok(())
}

pub fn cmd_peg_plan(input: &Path, k: usize, permute: bool, out: &Path) -> Result<()> {
    let (calib, _) = tensor_file::read_file(input)?;
    if calib.rank() != 3 {
        return Err(CliError::input(format!(
            "calibration tensor must be rank 3, got rank {}",
            calib.rank()
        )));
    }
    let d = calib.shape().last_dim();
    if k == 0 || d % k != 0 {
        return Err(CliError::config(format!(
            "group count {k} does not divide embedding width {d}"
        )));
    }
    let spec = if permute {
        build_range_permutation(&calib, k)?
    } else {
        GroupSpec::identity(d, k)?
    };
    let (group_min, group_max) = per_group_min_max(&calib, &spec)?;
    PegPlanFile::new(&spec, group_min, group_max).write(out)?;
    println!("plan written: d = {d}, k = {k}, permuted = {permute}");
    Ok(())
}

/// Interpret a rank-2 f32 tensor as token-id sequences for the
/// co-occurrence task of the bundled encoder.
pub fn batch_from_tensor(tensor: &TensorF, model: &EncoderParams) -> Result<Batch> {
    if tensor.rank() != 2 {
        return Err(CliError::input(format!(
            "token tensor must be rank 2 (sequences, positions), got rank {}",
            tensor.rank()
        )));
    }
    let (b, t) = (tensor.dims()[0], tensor.dims()[1]);
    let mut ids = Vec::with_capacity(b * t);
    for &v in tensor.data() {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= model.config.vocab_size {
            return Err(CliError::input(format!(
                "token value {v} is not a valid id below {}",
                model.config.vocab_size
            )));
        }
        ids.push(v as u32);
    }
    let task = TaskConfig::for_encoder(&model.config);
    let labels = (0..b)
        .map(|r| task.label_of(&ids[r * t..(r + 1) * t]))
        .collect();
    Ok(Batch { ids, b, t, labels })
}

fn batches_of(batch: &Batch, batch_size: usize) -> Vec<Batch> {
    let mut out = Vec::new();
    let mut row = 0;
    while row < batch.b {
        let n = batch_size.min(batch.b - row);
        out.push(Batch {
            ids: batch.ids[row * batch.t..(row + n) * batch.t].to_vec(),
            b: n,
            t: batch.t,
            labels: batch.labels[row..row + n].to_vec(),
        });
        row += n;
    }
    out
}

pub fn cmd_estimate_ranges(
    model_path: &Path,
    qconfig_path: &Path,
    data_path: &Path,
    batch_size: usize,
    out: &Path,
) -> Result<()> {
    let model = crate::formats::read_model(model_path)?;
    let qfile = QConfigFile::read(qconfig_path)?;
    let (tokens, _) = tensor_file::read_file(data_path)?;
    let all = batch_from_tensor(&tokens, &model)?;
    let batches = batches_of(&all, batch_size.max(1));
    let rt = calibrate(&model, &qfile.to_config(), &batches)?;
    qfile.with_runtime(&rt).write(out)?;
    println!(
        "ranges estimated from {} batches of up to {} sequences",
        batches.len(),
        batch_size.max(1)
    );
    Ok(())
}

pub fn cmd_simulate(
    model_path: &Path,
    qconfig_path: &Path,
    input_path: &Path,
    dump_sites: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let model = crate::formats::read_model(model_path)?;
    let qfile = QConfigFile::read(qconfig_path)?;
    let rt = qfile.runtime()?;
    let (tokens, _) = tensor_file::read_file(input_path)?;
    let batch = batch_from_tensor(&tokens, &model)?;

    let fp_acc = evaluate_accuracy(&model, None, std::slice::from_ref(&batch))?;
    let q_acc = evaluate_accuracy(&model, Some(&rt), std::slice::from_ref(&batch))?;
    let report = site_error_report(&model, &rt, &batch)?;

    let mut csv = String::from("site,mse,sqnr_db\n");
    for (name, mse, sqnr) in &report {
        println!("site {name}: mse {mse:.6e} sqnr {sqnr:.2} dB");
        let _ = writeln!(csv, "{name},{mse:e},{sqnr}");
    }
    println!("task metric fp32 {fp_acc} quantized {q_acc}");
    if let Some(out) = out {
        let _ = writeln!(csv, "metric_fp32,{fp_acc},");
        let _ = writeln!(csv, "metric_quantized,{q_acc},");
        std::fs::write(out, csv)
            .map_err(|e| CliError::input(format!("writing {}: {e}", out.display())))?;
    }
    if let Some(dir) = dump_sites {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::input(format!("creating {}: {e}", dir.display())))?;
        let fwd = forward_fp32(&model, &batch, true)?;
        for (name, tensor) in &fwd.sites {
            let path = dir.join(format!("{name}.qtnsr"));
            tensor_file::write_file(&path, tensor, CrcMode::Present)?;
        }
        println!("dumped {} site tensors", fwd.sites.len());
    }
    Ok(())
}

pub fn cmd_ablate(
    model_path: &Path,
    qconfig_path: &Path,
    data_path: &Path,
    eval_path: Option<&Path>,
    groups: &[String],
    batch_size: usize,
    out: &Path,
) -> Result<()> {
    let model = crate::formats::read_model(model_path)?;
    let qfile = QConfigFile::read(qconfig_path)?;
    let (tokens, _) = tensor_file::read_file(data_path)?;
    let calib_all = batch_from_tensor(&tokens, &model)?;
    let calib = batches_of(&calib_all, batch_size.max(1));
    let eval = match eval_path {
        Some(p) => {
            let (et, _) = tensor_file::read_file(p)?;
            batch_from_tensor(&et, &model)?
        }
        None => calib_all.clone(),
    };
    let site_groups = groups
        .iter()
        .map(|g| canonical_group(&model.config, g).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    let rows = leave_one_out_ablation(&model, &qfile.to_config(), &site_groups, &calib, |rt| {
        evaluate_accuracy(&model, Some(rt), std::slice::from_ref(&eval))
    })?;
    let mut csv = String::from("excluded_group,score\n");
    for row in &rows {
        println!("excluded {}: {}", row.excluded_group, row.score);
        let _ = writeln!(csv, "{},{}", row.excluded_group, row.score);
    }
    std::fs::write(out, csv)
        .map_err(|e| CliError::input(format!("writing {}: {e}", out.display())))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_quantize(
    input: &Path,
    bits: u8,
    symmetric: bool,
    estimator: &str,
    granularity: &str,
    k: usize,
    permute: bool,
    out: &Path,
    params_out: Option<&Path>,
) -> Result<()> {
    let (tensor, _) = tensor_file::read_file(input)?;
    let kind = match estimator {
        "minmax" => EstimatorKind::CurrentMinMax,
        "mse" => EstimatorKind::Mse {
            grid_points: tqsim_core::estimators::DEFAULT_MSE_GRID_POINTS,
        },
        other => {
            return Err(CliError::config(format!(
                "unknown estimator `{other}` (expected minmax or mse)"
            )))
        }
    };
    let granularity = match granularity {
        "per-tensor" => Granularity::PerTensor,
        "per-embedding" => Granularity::PerEmbedding,
        "peg" => Granularity::PerEmbeddingGroup { k, permuted: permute },
        other => {
            return Err(CliError::config(format!(
                "unknown granularity `{other}` (expected per-tensor, per-embedding, or peg)"
            )))
        }
    };
    let layout = match granularity {
        Granularity::PerTensor => SlotLayout::PerTensor,
        Granularity::PerEmbedding => {
            if tensor.rank() != 3 {
                return Err(CliError::input(
                    "per-embedding granularity needs a rank-3 tensor",
                ));
            }
            SlotLayout::PerEmbedding {
                d: tensor.shape().last_dim(),
            }
        }
        Granularity::PerEmbeddingGroup { k, permuted } => {
            if tensor.rank() != 3 {
                return Err(CliError::input(
                    "grouped granularity needs a rank-3 tensor",
                ));
            }
            let d = tensor.shape().last_dim();
            if k == 0 || d % k != 0 {
                return Err(CliError::config(format!(
                    "group count {k} does not divide embedding width {d}"
                )));
            }
            let spec = if permuted {
                build_range_permutation(&tensor, k)?
            } else {
                GroupSpec::identity(d, k)?
            };
            SlotLayout::PerGroup { spec }
        }
    };
    let mut est = RangeEstimator::new(kind, layout)?;
    est.observe(&tensor)?;
    let params = est.finalize(bits, symmetric)?;
    let simulated = fake_quantize(&tensor, &params)?;
    tensor_file::write_file(out, &simulated, CrcMode::Present)?;
    if let Some(p) = params_out {
        let text = serde_json::to_string_pretty(&params)
            .map_err(|e| CliError::config(format!("serializing params: {e}")))?;
        std::fs::write(p, text)
            .map_err(|e| CliError::input(format!("writing {}: {e}", p.display())))?;
    }
    let mut err = 0.0f64;
    for (&a, &b) in tensor.data().iter().zip(simulated.data()) {
        err += ((a - b) as f64).powi(2);
    }
    println!(
        "quantized {} elements at {bits} bits ({} slots), mse {:.6e}",
        tensor.len(),
        params.slot_count(),
        err / tensor.len() as f64
    );
    Ok(())
}

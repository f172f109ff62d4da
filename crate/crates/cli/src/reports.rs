//! Outlier and range diagnostics over rank-3 activation dumps, with
//! deterministic plot-ready CSV emission.

use std::fmt::Write as _;

use tqsim_core::tensor::TensorF;

use crate::error::{CliError, Result};

/// Cells flagged by the sigma rule plus per-dimension hit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierReport {
    pub sigma: f64,
    /// Statistics pooled over all sequences instead of per sequence.
    pub pooled: bool,
    /// Flagged `(sequence, token, dim, value)` cells in scan order.
    pub cells: Vec<(usize, usize, usize, f32)>,
    /// Flag count per embedding dimension, over all sequences.
    pub dim_counts: Vec<u64>,
}

fn require_rank3(t: &TensorF) -> Result<(usize, usize, usize)> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(CliError::input(format!(
            "expected a rank-3 (sequences, tokens, dims) tensor, got rank {}",
            dims.len()
        )));
    }
    Ok((dims[0], dims[1], dims[2]))
}

/// Flag every cell whose value deviates from the mean of its activation
/// tensor by more than `sigma` standard deviations. Statistics are
/// computed per sequence (the `(T, d)` slice) unless `pooled` is set.
pub fn detect_outliers(t: &TensorF, sigma: f64, pooled: bool) -> Result<OutlierReport> {
    let (b, seq_len, d) = require_rank3(t)?;
    let mut cells = Vec::new();
    let mut dim_counts = vec![0u64; d];

    let pooled_stats = if pooled { Some(t.mean_std()?) } else { None };
    for s in 0..b {
        let (mean, std) = match pooled_stats {
            Some(ms) => ms,
            None => t.slice_axis(0, s, 1)?.mean_std()?,
        };
        let threshold = sigma * std;
        for tok in 0..seq_len {
            for j in 0..d {
                let v = t.data()[(s * seq_len + tok) * d + j];
                if (v as f64 - mean).abs() > threshold {
                    cells.push((s, tok, j, v));
                    dim_counts[j] += 1;
                }
            }
        }
    }
    Ok(OutlierReport {
        sigma,
        pooled,
        cells,
        dim_counts,
    })
}

/// Dimensions with at least one flagged cell.
pub fn flagged_dims(report: &OutlierReport) -> Vec<usize> {
    report
        .dim_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(j, _)| j)
        .collect()
}

/// CSV of flagged cells, one row per `(seq, token, dim)`. The header
/// comment records the detector settings and whether the source tensor
/// carried a checksum.
pub fn outlier_cells_csv(report: &OutlierReport, crc_present: bool) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# sigma={} stats={} crc={}",
        report.sigma,
        if report.pooled { "pooled" } else { "per_sequence" },
        if crc_present { "present" } else { "absent" },
    );
    out.push_str("seq,token,dim,value\n");
    for &(s, t, j, v) in &report.cells {
        let _ = writeln!(out, "{s},{t},{j},{v}");
    }
    out
}

/// CSV of per-dimension hit counts, every dimension listed.
pub fn outlier_dims_csv(report: &OutlierReport) -> String {
    let mut out = String::from("dim,count\n");
    for (j, &c) in report.dim_counts.iter().enumerate() {
        let _ = writeln!(out, "{j},{c}");
    }
    out
}

/// Per-token min and max over the embedding dims, CSV columns
/// `(seq, token, min, max)`.
pub fn token_ranges_csv(t: &TensorF, crc_present: bool) -> Result<String> {
    let (b, seq_len, d) = require_rank3(t)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# crc={}",
        if crc_present { "present" } else { "absent" }
    );
    out.push_str("seq,token,min,max\n");
    for s in 0..b {
        for tok in 0..seq_len {
            let row = &t.data()[(s * seq_len + tok) * d..(s * seq_len + tok + 1) * d];
            let mut lo = row[0];
            let mut hi = row[0];
            for &v in &row[1..] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let _ = writeln!(out, "{s},{tok},{lo},{hi}");
        }
    }
    Ok(out)
}

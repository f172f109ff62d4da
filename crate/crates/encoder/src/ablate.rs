//! Leave-one-out ablation: evaluate with one named group of activation
//! quantizers disabled and everything else per the configuration, to
//! attribute quantization damage to graph locations.

use crate::calibrate::{calibrate, CalibratedRuntime};
use crate::error::Result;
use crate::model::EncoderParams;
use crate::sites::{QuantConfig, SiteGroup, SiteSettings};
use crate::task::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub excluded_group: String,
    pub score: f64,
}

/// Disable `sites` in a copy of the config.
fn with_group_disabled(qconfig: &QuantConfig, group: &SiteGroup) -> QuantConfig {
    let mut out = qconfig.clone();
    for site in &group.sites {
        out.set_override(site.clone(), SiteSettings::disabled());
    }
    out
}

/// For each group, calibrate and evaluate with that group left
/// unquantized. The first row is the fully quantized baseline (empty
/// exclusion). `eval_fn` maps a calibrated runtime to a score;
/// deterministic evaluation makes the table order-independent.
pub fn leave_one_out_ablation(
    model: &EncoderParams,
    qconfig: &QuantConfig,
    groups: &[SiteGroup],
    calib_batches: &[Batch],
    mut eval_fn: impl FnMut(&CalibratedRuntime) -> Result<f64>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(groups.len() + 1);
    let baseline_rt = calibrate(model, qconfig, calib_batches)?;
    rows.push(AblationRow {
        excluded_group: "none".into(),
        score: eval_fn(&baseline_rt)?,
    });
    for group in groups {
        let cfg = with_group_disabled(qconfig, group);
        let rt = calibrate(model, &cfg, calib_batches)?;
        rows.push(AblationRow {
            excluded_group: group.name.clone(),
            score: eval_fn(&rt)?,
        });
    }
    Ok(rows)
}

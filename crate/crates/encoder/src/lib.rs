//! A desk-scale transformer encoder with a named quantizer site at every
//! tensor edge: FP32 and fake-quantized inference, static range
//! calibration, mixed-precision assignment, leave-one-out ablation,
//! synthetic outlier construction, and quantization-aware training.

pub mod ablate;
pub mod calibrate;
pub mod config;
pub mod error;
pub mod forward;
pub mod model;
pub mod ops;
pub mod sites;
pub mod task;
pub mod train;

pub use ablate::{leave_one_out_ablation, AblationRow};
pub use calibrate::{calibrate, CalibratedRuntime, SiteRuntime, WeightRuntime};
pub use config::EncoderConfig;
pub use error::{EncoderError, Result};
pub use forward::{
    attention_mass_on_token, forward_fp32, forward_quantized, run_forward, ForwardOptions,
    Forwarded,
};
pub use model::{inject_outlier_model, EncoderParams, PlantedOutliers};
pub use sites::{
    activation_sites, assign_mixed_precision, canonical_group, remove_mixed_precision,
    weight_sites, MixedPrecisionPolicy, PromotionReport, QuantConfig, SiteGroup, SiteKind,
    SiteSettings,
};
pub use task::{Batch, TaskConfig};
pub use train::{evaluate_accuracy, qat_train_step, train_loop, StepStats, TrainConfig, Trainer};

//! Refines coarse segmentation masks by prompting a promptable segmentor with
//! automatically chosen points: k-medoids positives from the thresholded
//! coarse mask and negatives optimized on the complementary (tendon) problem.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix it to `f64`.

pub mod io;
pub mod mask;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod scalar;
pub mod segmentor;
pub mod select;
pub mod synth;

pub use mask::{bce_loss, dice, double_threshold, mask_subtract, BinaryMask, LossKind, MaskError};
pub use pipeline::{
    evaluate_multi_init, refine_segmentation, run_sweep, Backend, NegativeStrategy, PipelineError,
    RefinementConfig, Status,
};
pub use refine::{
    adamw_step, init_complementary, random_negative_points, refine_negative_points,
    OptimizerConfig, RefineError,
};
pub use scalar::Real;
pub use segmentor::{
    coord_gradient, BridgeSegmentor, OracleParams, PromptableSegmentor, SegmentorError,
};
pub use select::{flip_polarity, select_positive_points, KRule, Polarity, SelectConfig};
pub use synth::{
    degrade_mask, generate_phantom, severity_for_regime, DegradeConfig, PhantomConfig,
};

pub type SoftMask = mask::SoftMask<f64>;
pub type Image = mask::Image<f64>;
pub type PromptPoint = select::PromptPoint<f64>;
pub type PromptSet = select::PromptSet<f64>;
pub type Oracle = segmentor::Oracle<f64>;
pub type RefineTrace = refine::RefineTrace<f64>;
pub type AdamWState = refine::AdamWState<f64>;
pub type Phantom = synth::Phantom<f64>;
pub type DatasetItem = synth::DatasetItem<f64>;

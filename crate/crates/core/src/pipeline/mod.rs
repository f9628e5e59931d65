//! End-to-end refinement: threshold the coarse mask, pick positives, build
//! negatives by the chosen strategy, and query the segmentor once more.

mod sweep;

pub use sweep::{run_sweep, Aggregate, SweepReport, SweepRow, CSV_HEADER};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{dice, double_threshold, mask_subtract, BinaryMask, Image, MaskError, SoftMask};
use crate::refine::{
    init_complementary, random_negative_points, refine_negative_points, OptimizerConfig,
    RefineError, RefineTrace,
};
use crate::scalar::Real;
use crate::segmentor::{OracleParams, PromptableSegmentor, SegmentorError};
use crate::select::{
    select_positive_points, KRule, PromptSet, SelectConfig, SelectError, Selection,
};
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Segmentor(#[from] SegmentorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("every initialization failed: {}", .0.join("; "))]
    AllRunsFailed(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeStrategy {
    /// Complementary-problem optimization.
    Optimized,
    /// Uniform tendon pixels.
    Random,
    /// Positives only.
    None,
}

impl NegativeStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeStrategy::Optimized => "optimized",
            NegativeStrategy::Random => "random",
            NegativeStrategy::None => "none",
        }
    }
}

impl fmt::Display for NegativeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NegativeStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "optimized" => Ok(NegativeStrategy::Optimized),
            "random" => Ok(NegativeStrategy::Random),
            "none" => Ok(NegativeStrategy::None),
            other => Err(format!(
                "unknown strategy '{other}' (expected optimized, random or none)"
            )),
        }
    }
}

/// `oracle` or `bridge:ADDR`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Backend {
    Oracle,
    Bridge(String),
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Oracle => f.write_str("oracle"),
            Backend::Bridge(addr) => write!(f, "bridge:{addr}"),
        }
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "oracle" {
            Ok(Backend::Oracle)
        } else if let Some(addr) = s.strip_prefix("bridge:") {
            if addr.is_empty() {
                Err("bridge backend needs an address".into())
            } else {
                Ok(Backend::Bridge(addr.to_string()))
            }
        } else {
            Err(format!(
                "unknown backend '{s}' (expected oracle or bridge:ADDR)"
            ))
        }
    }
}

impl TryFrom<String> for Backend {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Backend> for String {
    fn from(b: Backend) -> Self {
        b.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub t_min: f64,
    pub alpha: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub k_rule: KRule,
    pub max_samples: usize,
    pub optimizer: OptimizerConfig,
    pub n_init: usize,
    pub negative_strategy: NegativeStrategy,
    pub backend: Backend,
    pub oracle: OracleParams,
    /// Seeds positive selection; initializations take their own seed.
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        let select = SelectConfig::default();
        Self {
            t_min: 0.15,
            alpha: 0.4,
            k_min: select.k_min,
            k_max: select.k_max,
            k_rule: select.k_rule,
            max_samples: select.max_samples,
            optimizer: OptimizerConfig::default(),
            n_init: 10,
            negative_strategy: NegativeStrategy::Optimized,
            backend: Backend::Oracle,
            oracle: OracleParams::phantom_calibrated(),
            seed: 0,
        }
    }
}

impl RefinementConfig {
    pub fn select_config(&self) -> SelectConfig {
        SelectConfig {
            k_min: self.k_min,
            k_max: self.k_max,
            k_rule: self.k_rule,
            max_samples: self.max_samples,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.t_min) {
            return bad(format!("t_min must lie in [0, 1], got {}", self.t_min));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad(format!("k range [{}, {}]", self.k_min, self.k_max));
        }
        if self.n_init == 0 {
            return bad("n_init must be at least 1".into());
        }
        self.optimizer
            .validate()
            .map_err(PipelineError::InvalidConfig)?;
        self.oracle
            .validate()
            .map_err(PipelineError::InvalidConfig)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Ok,
    NoDetection,
    FallbackNoNegatives,
}

/// Seed-independent part of a run, shared by every initialization.
#[derive(Debug, Clone)]
pub struct Prepared<T = f64> {
    pub coarse_mask: BinaryMask,
    /// `None` when the thresholded coarse mask is empty.
    pub selection: Option<Selection<T>>,
    pub t_mod: BinaryMask,
}

pub fn prepare<T: Real>(
    coarse: &SoftMask<T>,
    tendon: &BinaryMask,
    cfg: &RefinementConfig,
) -> Result<Prepared<T>, PipelineError> {
    cfg.validate()?;
    let coarse_mask = double_threshold(coarse, T::lit(cfg.t_min), T::lit(cfg.alpha));
    let t_mod = mask_subtract(tendon, &coarse_mask)?;
    let selection = match select_positive_points(&coarse_mask, &cfg.select_config(), cfg.seed) {
        Ok(sel) => Some(sel),
        Err(SelectError::NoForeground) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Prepared {
        coarse_mask,
        selection,
        t_mod,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutcome<T = f64> {
    pub mask: BinaryMask,
    pub status: Status,
    /// Final prompts for the pathology problem.
    pub prompts: PromptSet<T>,
    pub chosen_k: Option<usize>,
    pub steps: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub trace: Option<RefineTrace<T>>,
}

/// One initialization on prepared inputs.
pub fn run_prepared<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    image: &Image<T>,
    prep: &Prepared<T>,
    seg: &S,
    cfg: &RefinementConfig,
    seed: u64,
) -> Result<RunOutcome<T>, PipelineError> {
    if image.dims() != prep.coarse_mask.dims() {
        return Err(MaskError::DimensionMismatch {
            left: image.dims(),
            right: prep.coarse_mask.dims(),
        }
        .into());
    }
    let (w, h) = image.dims();
    let Some(sel) = &prep.selection else {
        return Ok(RunOutcome {
            mask: BinaryMask::empty(w, h)?,
            status: Status::NoDetection,
            prompts: PromptSet::default(),
            chosen_k: None,
            steps: 0,
            converged: false,
            warnings: Vec::new(),
            trace: None,
        });
    };
    let mut warnings = Vec::new();
    let mut status = Status::Ok;
    let mut trace = None;
    let mut prompts = sel.points.clone();
    if sel.subsampled {
        warnings.push(format!("foreground subsampled to {} pixels", sel.samples));
    }
    let strategy = cfg.negative_strategy;
    if strategy != NegativeStrategy::None && prep.t_mod.is_empty() {
        warnings.push("tendon is fully covered by the coarse mask; using positives only".into());
        status = Status::FallbackNoNegatives;
    } else {
        match strategy {
            NegativeStrategy::None => {}
            NegativeStrategy::Random => {
                let negs = random_negative_points(&prep.t_mod, sel.points.len(), seed)?;
                prompts.extend_from(&negs);
            }
            NegativeStrategy::Optimized => {
                let init = init_complementary(&sel.points, &prep.t_mod, seed)?;
                warnings.extend(init.warning);
                let (p, tr) =
                    refine_negative_points(image, &init.prompts, &prep.t_mod, seg, &cfg.optimizer)?;
                prompts = p;
                trace = Some(tr);
            }
        }
    }
    let pred = seg.predict(image, &prompts)?;
    Ok(RunOutcome {
        mask: pred.threshold(T::lit(0.5)),
        status,
        chosen_k: Some(sel.k),
        steps: trace.as_ref().map_or(0, |t| t.steps),
        converged: trace.as_ref().is_some_and(|t| t.converged),
        prompts,
        warnings,
        trace,
    })
}

/// The full refinement for one image. Positives are seeded by `cfg.seed`,
/// the negative initialization by `seed`.
pub fn refine_segmentation<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    image: &Image<T>,
    coarse: &SoftMask<T>,
    tendon_gt: &BinaryMask,
    seg: &S,
    cfg: &RefinementConfig,
    seed: u64,
) -> Result<RunOutcome<T>, PipelineError> {
    let prep = prepare(coarse, tendon_gt, cfg)?;
    run_prepared(image, &prep, seg, cfg, seed)
}

/// Per-image statistics over several initializations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub image: String,
    pub strategy: NegativeStrategy,
    pub coarse_dice: f64,
    /// Refined Dice of each successful initialization.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub max_dice: f64,
    pub chosen_k: Option<usize>,
    pub steps: Vec<usize>,
    pub converged: Vec<bool>,
    pub status: Vec<Status>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ImageReport {
    pub fn mean_steps(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.steps.iter().sum::<usize>() as f64 / self.steps.len() as f64
        }
    }
}

/// Mean, population standard deviation and maximum.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), max)
}

/// Runs initializations `seed, seed+1, ...` on shared prepared inputs and
/// scores each against `pathology_gt`. Failed runs are recorded; at least
/// one must succeed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_prepared<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    id: &str,
    image: &Image<T>,
    prep: &Prepared<T>,
    pathology_gt: &BinaryMask,
    seg: &S,
    cfg: &RefinementConfig,
    seed: u64,
    n_init: usize,
) -> Result<ImageReport, PipelineError> {
    if n_init == 0 {
        return Err(PipelineError::InvalidConfig(
            "n_init must be at least 1".into(),
        ));
    }
    let coarse_dice: f64 = dice(&prep.coarse_mask, pathology_gt)?;
    let mut report = ImageReport {
        image: id.to_string(),
        strategy: cfg.negative_strategy,
        coarse_dice,
        dice: Vec::with_capacity(n_init),
        mean_dice: 0.0,
        std_dice: 0.0,
        max_dice: 0.0,
        chosen_k: prep.selection.as_ref().map(|s| s.k),
        steps: Vec::new(),
        converged: Vec::new(),
        status: Vec::new(),
        errors: Vec::new(),
        warnings: Vec::new(),
    };
    for i in 0..n_init as u64 {
        match run_prepared(image, prep, seg, cfg, crate::rng::derive(seed, i)) {
            Ok(out) => {
                report.dice.push(dice(&out.mask, pathology_gt)?);
                report.steps.push(out.steps);
                report.converged.push(out.converged);
                report.status.push(out.status);
                for w in out.warnings {
                    if !report.warnings.contains(&w) {
                        report.warnings.push(w);
                    }
                }
            }
            Err(e) => report.errors.push(format!("init {i}: {e}")),
        }
    }
    if report.dice.is_empty() {
        return Err(PipelineError::AllRunsFailed(report.errors));
    }
    (report.mean_dice, report.std_dice, report.max_dice) = summarize(&report.dice);
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_multi_init<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    id: &str,
    image: &Image<T>,
    coarse: &SoftMask<T>,
    tendon_gt: &BinaryMask,
    pathology_gt: &BinaryMask,
    seg: &S,
    cfg: &RefinementConfig,
    seed: u64,
    n_init: usize,
) -> Result<ImageReport, PipelineError> {
    let prep = prepare(coarse, tendon_gt, cfg)?;
    evaluate_prepared(id, image, &prep, pathology_gt, seg, cfg, seed, n_init)
}

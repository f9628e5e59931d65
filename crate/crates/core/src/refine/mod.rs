//! Negative prompt refinement on the complementary problem: the tendon
//! background becomes the target, pathology points become fixed negatives,
//! and random tendon points are moved by AdamW before being flipped back.

mod adamw;

pub use adamw::{adamw_step, AdamWState, OptimizerConfig};

use std::fmt::Write as _;

use thiserror::Error;

use crate::mask::{BinaryMask, Image};
use crate::rng::seeded;
use crate::scalar::Real;
use crate::segmentor::{coord_gradient, LossGradient, PromptableSegmentor, SegmentorError};
use crate::select::{flip_polarity, Polarity, PromptPoint, PromptSet};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("no tendon background available")]
    NoTendon,
    #[error("no positive points to flip")]
    NoPositives,
    #[error("coordinate/gradient length mismatch ({coords} vs {grads})")]
    LengthMismatch { coords: usize, grads: usize },
    #[error("non-finite gradient component {index} at step {step}")]
    NonFiniteGradient { step: usize, index: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, losses: Vec<f64> },
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Segmentor(#[from] SegmentorError),
}

/// Uniform draw of up to `k` distinct set pixels, in draw order.
fn sample_pixels(mask: &BinaryMask, k: usize, seed: u64) -> Vec<(usize, usize)> {
    let pixels: Vec<(usize, usize)> = mask.set_pixels().collect();
    let mut rng = seeded(seed);
    rand::seq::index::sample(&mut rng, pixels.len(), k.min(pixels.len()))
        .into_iter()
        .map(|i| pixels[i])
        .collect()
}

/// Starting prompts for the complementary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplementaryInit<T = f64> {
    /// Flipped pathology points first, then the tendon candidates.
    pub prompts: PromptSet<T>,
    pub warning: Option<String>,
}

/// Flips the pathology positives to negatives and adds `k = |pts_pos|`
/// tendon pixels, drawn without replacement, as positives.
pub fn init_complementary<T: Real>(
    pts_pos: &PromptSet<T>,
    t_mod: &BinaryMask,
    seed: u64,
) -> Result<ComplementaryInit<T>, RefineError> {
    if t_mod.is_empty() {
        return Err(RefineError::NoTendon);
    }
    let k = pts_pos.len();
    let mut prompts = flip_polarity(pts_pos);
    let drawn = sample_pixels(t_mod, k, seed);
    let warning = (drawn.len() < k).then(|| {
        format!(
            "only {} tendon pixels available for {k} candidates",
            drawn.len()
        )
    });
    for (x, y) in drawn {
        prompts.push(PromptPoint::positive(T::from_count(x), T::from_count(y)));
    }
    Ok(ComplementaryInit { prompts, warning })
}

/// `k` tendon pixels drawn without replacement, tagged negative.
pub fn random_negative_points<T: Real>(
    t_mod: &BinaryMask,
    k: usize,
    seed: u64,
) -> Result<PromptSet<T>, RefineError> {
    if t_mod.is_empty() {
        return Err(RefineError::NoTendon);
    }
    Ok(sample_pixels(t_mod, k, seed)
        .into_iter()
        .map(|(x, y)| PromptPoint::negative(T::from_count(x), T::from_count(y)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineTrace<T = f64> {
    /// Loss at the start and after every update; `steps + 1` entries.
    pub losses: Vec<T>,
    /// Pixel-space gradient norm at each recorded loss.
    pub grad_norms: Vec<T>,
    pub steps: usize,
    pub converged: bool,
    /// Complementary prompts after optimization, before flipping back.
    pub final_prompts: PromptSet<T>,
}

impl<T: Real> RefineTrace<T> {
    pub fn initial_loss(&self) -> T {
        self.losses[0]
    }

    pub fn final_loss(&self) -> T {
        *self.losses.last().expect("trace has an initial loss")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm\n");
        for (i, (l, g)) in self.losses.iter().zip(&self.grad_norms).enumerate() {
            let _ = writeln!(out, "{i},{:.9e},{:.9e}", l.as_f64(), g.as_f64());
        }
        out
    }
}

fn grad_norm<T: Real>(lg: &LossGradient<T>) -> T {
    lg.grads
        .iter()
        .map(|g| g[0] * g[0] + g[1] * g[1])
        .sum::<T>()
        .sqrt()
}

/// Optimizes the tendon candidates (the positives of `init`) against
/// `t_mod`. Coordinates are optimized in image-normalized units so that the
/// step size is independent of resolution.
///
/// Returns the original pathology positives followed by the optimized
/// candidates as negatives.
pub fn refine_negative_points<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    image: &Image<T>,
    init: &PromptSet<T>,
    t_mod: &BinaryMask,
    seg: &S,
    cfg: &OptimizerConfig,
) -> Result<(PromptSet<T>, RefineTrace<T>), RefineError> {
    cfg.validate().map_err(RefineError::InvalidConfig)?;
    if t_mod.is_empty() {
        return Err(RefineError::NoTendon);
    }
    let movable: Vec<usize> = init
        .iter()
        .enumerate()
        .filter(|(_, p)| cfg.optimize_anchors || p.polarity == Polarity::Positive)
        .map(|(i, _)| i)
        .collect();
    if !init.has_positive() {
        return Err(RefineError::NoPositives);
    }

    let (w, h) = image.dims();
    let scale = [T::from_count(w - 1), T::from_count(h - 1)];
    let to_unit = |v: T, s: T| if s > T::zero() { v / s } else { T::zero() };
    let mut u: Vec<T> = movable
        .iter()
        .flat_map(|&i| {
            let p = init.points()[i].clamped(w, h);
            [to_unit(p.x, scale[0]), to_unit(p.y, scale[1])]
        })
        .collect();
    let mut pts = init.points().to_vec();
    let place = |pts: &mut [PromptPoint<T>], u: &[T]| {
        for (j, &i) in movable.iter().enumerate() {
            pts[i].x = u[2 * j] * scale[0];
            pts[i].y = u[2 * j + 1] * scale[1];
        }
    };

    let mut state = AdamWState::new(u.len());
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();
    let patience = cfg.effective_patience();
    let tol = T::lit(cfg.converge_tol.min(f64::MAX));
    let mut streak = 0;
    let mut converged = false;
    let mut steps = 0;
    loop {
        place(&mut pts, &u);
        let prompts = PromptSet::new(pts.clone());
        let lg = coord_gradient(seg, image, &prompts, &movable, t_mod, cfg.loss)?;
        if !lg.loss.is_finite() {
            losses.push(lg.loss);
            return Err(RefineError::NonFiniteLoss {
                step: steps,
                losses: losses.iter().map(|l| l.as_f64()).collect(),
            });
        }
        if let Some(&prev) = losses.last() {
            let delta: T = lg.loss - prev;
            if delta.abs() < tol {
                streak += 1;
            } else {
                streak = 0;
            }
        }
        losses.push(lg.loss);
        grad_norms.push(grad_norm(&lg));
        if streak >= patience {
            converged = true;
            break;
        }
        if steps == cfg.max_steps {
            break;
        }
        let g: Vec<T> = lg
            .grads
            .iter()
            .flat_map(|g| [g[0] * scale[0], g[1] * scale[1]])
            .collect();
        adamw_step(&mut state, &mut u, &g, cfg, T::zero(), T::one())?;
        steps += 1;
    }

    let final_prompts = PromptSet::new(pts);
    let mut out: PromptSet<T> = init
        .iter()
        .filter(|p| p.polarity == Polarity::Negative)
        .map(|p| p.flipped())
        .collect();
    for p in final_prompts
        .iter()
        .filter(|p| p.polarity == Polarity::Positive)
    {
        out.push(p.flipped().clamped(w, h));
    }
    Ok((
        out,
        RefineTrace {
            losses,
            grad_norms,
            steps,
            converged,
            final_prompts,
        },
    ))
}

//! The promptable segmentor contract and its two backends.

pub mod bridge;
mod oracle;
pub mod wire;

pub use bridge::BridgeSegmentor;
pub use oracle::{oracle_logit, Oracle, OracleParams};

use thiserror::Error;

use crate::mask::{bce_loss, BinaryMask, Image, LossKind, MaskError, SoftMask};
use crate::scalar::Real;
use crate::select::PromptSet;

/// Finite-difference probe half-width in pixels.
pub const FD_STEP: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SegmentorError {
    #[error("prompt set has no positive point")]
    NoPositivePoints,
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("bridge transport: {0}")]
    Transport(#[from] std::io::Error),
    #[error("bridge protocol: {0}")]
    Protocol(String),
    #[error("backend error: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub analytic_gradient: bool,
}

/// Loss value together with `d loss / d (x, y)` for each requested point.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient<T> {
    pub loss: T,
    pub grads: Vec<[T; 2]>,
}

/// A frozen model mapping an image plus prompt points to a probability map.
///
/// `predict` must be deterministic and must not change observable state.
pub trait PromptableSegmentor<T: Real>: Send + Sync {
    fn name(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    fn predict(
        &self,
        image: &Image<T>,
        prompts: &PromptSet<T>,
    ) -> Result<SoftMask<T>, SegmentorError>;

    /// Closed-form loss gradient for the points at `movable`. Only called when
    /// `capabilities().analytic_gradient` is set.
    fn loss_gradient(
        &self,
        _image: &Image<T>,
        _prompts: &PromptSet<T>,
        _movable: &[usize],
        _target: &BinaryMask,
        _loss: LossKind,
    ) -> Result<LossGradient<T>, SegmentorError> {
        Err(SegmentorError::Backend(format!(
            "{} has no analytic gradient",
            self.name()
        )))
    }
}

pub(crate) fn require_positive<T: Real>(prompts: &PromptSet<T>) -> Result<(), SegmentorError> {
    if prompts.has_positive() {
        Ok(())
    } else {
        Err(SegmentorError::NoPositivePoints)
    }
}

/// Loss of the prediction for `prompts` against `target`.
pub fn prompt_loss<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    seg: &S,
    image: &Image<T>,
    prompts: &PromptSet<T>,
    target: &BinaryMask,
    loss: LossKind,
) -> Result<T, SegmentorError> {
    let pred = seg.predict(image, prompts)?;
    Ok(bce_loss(&pred, target, loss)?)
}

/// Gradient of the loss with respect to the coordinates of the points at
/// `movable`: closed form when the backend offers it, otherwise central
/// differences with probes clamped to the image.
pub fn coord_gradient<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    seg: &S,
    image: &Image<T>,
    prompts: &PromptSet<T>,
    movable: &[usize],
    target: &BinaryMask,
    loss: LossKind,
) -> Result<LossGradient<T>, SegmentorError> {
    if seg.capabilities().analytic_gradient {
        return seg.loss_gradient(image, prompts, movable, target, loss);
    }
    finite_difference_gradient(seg, image, prompts, movable, target, loss, T::lit(FD_STEP))
}

pub fn finite_difference_gradient<T: Real, S: PromptableSegmentor<T> + ?Sized>(
    seg: &S,
    image: &Image<T>,
    prompts: &PromptSet<T>,
    movable: &[usize],
    target: &BinaryMask,
    loss: LossKind,
    h: T,
) -> Result<LossGradient<T>, SegmentorError> {
    let (w, ht) = image.dims();
    let bounds = [T::from_count(w - 1), T::from_count(ht - 1)];
    let base = prompt_loss(seg, image, prompts, target, loss)?;
    let mut grads = Vec::with_capacity(movable.len());
    for &i in movable {
        let mut g = [T::zero(); 2];
        for (axis, slot) in g.iter_mut().enumerate() {
            let p = prompts.points()[i];
            let c = if axis == 0 { p.x } else { p.y };
            let hi = (c + h).min(bounds[axis]);
            let lo = (c - h).max(T::zero());
            if hi <= lo {
                continue;
            }
            let probe = |v: T| -> Result<T, SegmentorError> {
                let mut pts = prompts.points().to_vec();
                if axis == 0 {
                    pts[i].x = v;
                } else {
                    pts[i].y = v;
                }
                prompt_loss(seg, image, &PromptSet::new(pts), target, loss)
            };
            *slot = (probe(hi)? - probe(lo)?) / (hi - lo);
        }
        grads.push(g);
    }
    Ok(LossGradient { loss: base, grads })
}

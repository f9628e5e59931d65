use serde::{Deserialize, Serialize};

use crate::mask::{BinaryMask, Image, LossKind, MaskError, SoftMask};
use crate::scalar::{sigmoid, Real};
use crate::select::{PromptPoint, PromptSet};

use super::{require_positive, Capabilities, LossGradient, PromptableSegmentor, SegmentorError};

/// Sum-of-Gaussians logit with an image affinity term:
/// `gamma * (sum_pos G - sum_neg G) + beta * (I - 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleParams {
    /// Influence radius in pixels.
    pub sigma: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            sigma: 12.0,
            gamma: 4.0,
            beta: 2.0,
        }
    }
}

impl OracleParams {
    /// Tuned for the 128 px synthetic phantoms: a radius matched to the
    /// lesion scale and strong enough image affinity that lesion boundaries
    /// follow intensity.
    pub fn phantom_calibrated() -> Self {
        Self {
            sigma: 3.0,
            gamma: 4.0,
            beta: 16.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(format!(
                "oracle sigma must be positive and finite, got {}",
                self.sigma
            ));
        }
        if !self.gamma.is_finite() || !self.beta.is_finite() {
            return Err("oracle gamma and beta must be finite".into());
        }
        Ok(())
    }
}

/// Analytic, differentiable stand-in segmentor.
#[derive(Debug, Clone)]
pub struct Oracle<T = f64> {
    params: OracleParams,
    sigma: T,
    gamma: T,
    beta: T,
}

impl<T: Real> Oracle<T> {
    pub fn new(params: OracleParams) -> Result<Self, String> {
        params.validate()?;
        Ok(Self {
            params,
            sigma: T::lit(params.sigma),
            gamma: T::lit(params.gamma),
            beta: T::lit(params.beta),
        })
    }

    pub fn params(&self) -> OracleParams {
        self.params
    }

    fn axis_factor(&self, n: usize, c: T) -> Vec<T> {
        let inv = T::one() / (T::lit(2.0) * self.sigma * self.sigma);
        (0..n)
            .map(|i| {
                let d = T::from_count(i) - c;
                (-d * d * inv).exp()
            })
            .collect()
    }

    /// Per-pixel logits, row-major.
    pub fn logits(&self, image: &Image<T>, prompts: &PromptSet<T>) -> Vec<T> {
        let (w, h) = image.dims();
        let half = T::lit(0.5);
        let mut z: Vec<T> = image
            .intensity()
            .iter()
            .map(|&v| self.beta * (v - half))
            .collect();
        for p in prompts.iter() {
            let ex = self.axis_factor(w, p.x);
            let ey = self.axis_factor(h, p.y);
            let g = self.gamma * p.polarity.sign::<T>();
            for (y, &fy) in ey.iter().enumerate() {
                let c = g * fy;
                if c == T::zero() {
                    continue;
                }
                for (zz, &fx) in z[y * w..(y + 1) * w].iter_mut().zip(&ex) {
                    *zz = *zz + c * fx;
                }
            }
        }
        z
    }
}

/// Logit at one continuous pixel, sampling intensity bilinearly.
pub fn oracle_logit<T: Real>(
    params: &OracleParams,
    image: &Image<T>,
    prompts: &PromptSet<T>,
    pixel: [T; 2],
) -> T {
    let sigma = T::lit(params.sigma);
    let field: T = prompts
        .iter()
        .map(|p: &PromptPoint<T>| {
            let dx = pixel[0] - p.x;
            let dy = pixel[1] - p.y;
            p.polarity.sign::<T>() * (-(dx * dx + dy * dy) / (T::lit(2.0) * sigma * sigma)).exp()
        })
        .sum();
    T::lit(params.gamma) * field
        + T::lit(params.beta) * (image.sample(pixel[0], pixel[1]) - T::lit(0.5))
}

impl<T: Real> PromptableSegmentor<T> for Oracle<T> {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            analytic_gradient: true,
        }
    }

    fn predict(
        &self,
        image: &Image<T>,
        prompts: &PromptSet<T>,
    ) -> Result<SoftMask<T>, SegmentorError> {
        require_positive(prompts)?;
        let (w, h) = image.dims();
        let probs = self
            .logits(image, prompts)
            .into_iter()
            .map(sigmoid)
            .collect();
        Ok(SoftMask::new(w, h, probs)?)
    }

    fn loss_gradient(
        &self,
        image: &Image<T>,
        prompts: &PromptSet<T>,
        movable: &[usize],
        target: &BinaryMask,
        loss: LossKind,
    ) -> Result<LossGradient<T>, SegmentorError> {
        require_positive(prompts)?;
        let (w, h) = image.dims();
        if target.dims() != (w, h) {
            return Err(MaskError::DimensionMismatch {
                left: (w, h),
                right: target.dims(),
            }
            .into());
        }
        let n = T::from_count(w * h);
        let z = self.logits(image, prompts);
        let mut total = T::zero();
        let slope: Vec<T> = z
            .iter()
            .zip(target.bits())
            .map(|(&zz, &t)| {
                let s = sigmoid(zz);
                total = total + loss.pixel(s, t);
                loss.pixel_logit_slope(s, t) / n
            })
            .collect();

        let scale = self.gamma / (self.sigma * self.sigma);
        let grads = movable
            .iter()
            .map(|&i| {
                let p = prompts.points()[i];
                let ex = self.axis_factor(w, p.x);
                let ey = self.axis_factor(h, p.y);
                let mut gx = T::zero();
                let mut gy = T::zero();
                for (y, &fy) in ey.iter().enumerate() {
                    if fy == T::zero() {
                        continue;
                    }
                    let row = &slope[y * w..(y + 1) * w];
                    let mut a = T::zero();
                    let mut b = T::zero();
                    for (x, (&s, &fx)) in row.iter().zip(&ex).enumerate() {
                        let wf = s * fx;
                        a = a + wf * (T::from_count(x) - p.x);
                        b = b + wf;
                    }
                    gx = gx + fy * a;
                    gy = gy + fy * (T::from_count(y) - p.y) * b;
                }
                let k = scale * p.polarity.sign::<T>();
                [k * gx, k * gy]
            })
            .collect();
        Ok(LossGradient {
            loss: total / n,
            grads,
        })
    }
}

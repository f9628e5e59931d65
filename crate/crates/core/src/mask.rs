//! Raster types and the pixel-wise metrics and losses built on them.
//!
//! All rasters are row-major with `index = y * width + x`. Probabilities and
//! intensities are validated into `[0, 1]` at construction, so every
//! operation downstream can rely on the range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("raster dimensions must be positive and match the data length (got {width}x{height}, {len} values)")]
    InvalidShape {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

fn check_shape(width: usize, height: usize, len: usize) -> Result<(), MaskError> {
    if width == 0 || height == 0 || width.checked_mul(height) != Some(len) {
        return Err(MaskError::InvalidShape { width, height, len });
    }
    Ok(())
}

fn check_unit_range<T: Real>(values: &[T]) -> Result<(), MaskError> {
    for (index, v) in values.iter().enumerate() {
        if !(*v >= T::zero() && *v <= T::one()) {
            return Err(MaskError::OutOfRange {
                index,
                value: v.as_f64(),
            });
        }
    }
    Ok(())
}

fn same_dims(left: (usize, usize), right: (usize, usize)) -> Result<(), MaskError> {
    if left != right {
        return Err(MaskError::DimensionMismatch { left, right });
    }
    Ok(())
}

/// Per-pixel foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask<T = f64> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Real> SoftMask<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self, MaskError> {
        check_shape(width, height, values.len())?;
        check_unit_range(&values)?;
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self, MaskError> {
        Self::new(width, height, vec![T::zero(); width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> T,
    ) -> Result<Self, MaskError> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
    }

    /// 1.0 on set bits, 0.0 elsewhere.
    pub fn from_indicator(mask: &BinaryMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            values: mask
                .bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::from_count(self.values.len())
    }

    /// Bits set where the probability is strictly above `cut`.
    pub fn threshold(&self, cut: T) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.values.iter().map(|&v| v > cut).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> SoftMask<U> {
        SoftMask {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        check_shape(width, height, bits.len())?;
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self, MaskError> {
        Self::new(width, height, vec![false; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, MaskError> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Coordinates `(x, y)` of set pixels in row-major order.
    pub fn set_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        same_dims(self.dims(), other.dims())?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        same_dims(self.dims(), other.dims())?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask, MaskError> {
        same_dims(self.dims(), other.dims())?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }
}

/// Single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f64> {
    width: usize,
    height: usize,
    intensity: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize, intensity: Vec<T>) -> Result<Self, MaskError> {
        check_shape(width, height, intensity.len())?;
        check_unit_range(&intensity)?;
        Ok(Self {
            width,
            height,
            intensity,
        })
    }

    pub fn uniform(width: usize, height: usize, value: T) -> Result<Self, MaskError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> T,
    ) -> Result<Self, MaskError> {
        let mut v = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                v.push(f(x, y));
            }
        }
        Self::new(width, height, v)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn intensity(&self) -> &[T] {
        &self.intensity
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.intensity[y * self.width + x]
    }

    /// Bilinear sample at a continuous coordinate, clamped to the image.
    pub fn sample(&self, x: T, y: T) -> T {
        let max_x = T::from_count(self.width - 1);
        let max_y = T::from_count(self.height - 1);
        let x = x.max(T::zero()).min(max_x);
        let y = y.max(T::zero()).min(max_y);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let xi = x0.to_usize().unwrap_or(0);
        let yi = y0.to_usize().unwrap_or(0);
        let xj = (xi + 1).min(self.width - 1);
        let yj = (yi + 1).min(self.height - 1);
        let top = self.get(xi, yi) * (T::one() - fx) + self.get(xj, yi) * fx;
        let bottom = self.get(xi, yj) * (T::one() - fx) + self.get(xj, yj) * fx;
        top * (T::one() - fy) + bottom * fy
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            intensity: self.intensity.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Dice similarity `2|A∩B| / (|A|+|B|)`. Two empty masks score 1.
pub fn dice<T: Real>(a: &BinaryMask, b: &BinaryMask) -> Result<T, MaskError> {
    let inter = a.intersection_count(b)?;
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(T::one());
    }
    Ok(T::from_count(2 * inter) / T::from_count(total))
}

/// Two-stage threshold of a coarse foreground channel.
///
/// Values at or below `t_min` are zeroed (the rest keep their probability),
/// then bits are set where the surviving value exceeds `alpha` times the
/// surviving maximum. An all-zero survivor map yields an empty mask.
pub fn double_threshold<T: Real>(c0: &SoftMask<T>, t_min: T, alpha: T) -> BinaryMask {
    assert!(
        t_min >= T::zero() && t_min <= T::one(),
        "t_min must lie in [0, 1]"
    );
    assert!(
        alpha > T::zero() && alpha < T::one(),
        "alpha must lie in (0, 1)"
    );
    let kept: Vec<T> = c0
        .values
        .iter()
        .map(|&v| if v > t_min { v } else { T::zero() })
        .collect();
    let peak = kept.iter().copied().fold(T::zero(), T::max);
    let bits = if peak > T::zero() {
        let cut = alpha * peak;
        kept.iter().map(|&v| v > cut).collect()
    } else {
        vec![false; kept.len()]
    };
    BinaryMask {
        width: c0.width,
        height: c0.height,
        bits,
    }
}

/// Set difference `t_gt \ o_coarse`.
pub fn mask_subtract(t_gt: &BinaryMask, o_coarse: &BinaryMask) -> Result<BinaryMask, MaskError> {
    same_dims(t_gt.dims(), o_coarse.dims())?;
    Ok(BinaryMask {
        width: t_gt.width,
        height: t_gt.height,
        bits: t_gt
            .bits
            .iter()
            .zip(&o_coarse.bits)
            .map(|(&t, &o)| t && !o)
            .collect(),
    })
}

/// Pixel loss used by the point optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-[t log s + (1 - t) log(1 - s)]`
    #[default]
    FullBce,
    /// `-t log s` only.
    OneSided,
}

impl LossKind {
    /// Loss of one pixel given its (unclamped) probability.
    #[inline]
    pub fn pixel<T: Real>(self, s: T, target: bool) -> T {
        let eps = T::lit(PROB_EPS);
        let c = s.max(eps).min(T::one() - eps);
        match (self, target) {
            (_, true) => -c.ln(),
            (LossKind::FullBce, false) => -(T::one() - c).ln(),
            (LossKind::OneSided, false) => T::zero(),
        }
    }

    /// `d loss / d logit` for one pixel, where `s = sigmoid(logit)`.
    /// Zero where the clamp is active.
    #[inline]
    pub fn pixel_logit_slope<T: Real>(self, s: T, target: bool) -> T {
        let eps = T::lit(PROB_EPS);
        if !(s > eps && s < T::one() - eps) {
            return T::zero();
        }
        let t = if target { T::one() } else { T::zero() };
        match self {
            LossKind::FullBce => s - t,
            LossKind::OneSided => -t * (T::one() - s),
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full_bce" => Ok(LossKind::FullBce),
            "one_sided" => Ok(LossKind::OneSided),
            other => Err(format!(
                "unknown loss '{other}' (expected full_bce or one_sided)"
            )),
        }
    }
}

/// Pixel-mean loss of `pred` against `target`.
pub fn bce_loss<T: Real>(
    pred: &SoftMask<T>,
    target: &BinaryMask,
    kind: LossKind,
) -> Result<T, MaskError> {
    same_dims(pred.dims(), target.dims())?;
    let total: T = pred
        .values
        .iter()
        .zip(&target.bits)
        .map(|(&s, &t)| kind.pixel(s, t))
        .sum();
    Ok(total / T::from_count(pred.values.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bm(w: usize, h: usize, set: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(w, h).unwrap();
        for &(x, y) in set {
            m.set(x, y, true);
        }
        m
    }

    #[test]
    fn dice_identities() {
        let a = bm(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert_eq!(dice::<f64>(&a, &a).unwrap(), 1.0);
        let b = bm(4, 4, &[(3, 3), (2, 3)]);
        assert_eq!(dice::<f64>(&a, &b).unwrap(), 0.0);
        let c = bm(4, 4, &[(0, 0), (1, 0)]);
        let d: f64 = dice(&a, &c).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        let e = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(dice::<f32>(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn dice_rejects_mismatched_dims() {
        let a = BinaryMask::empty(3, 3).unwrap();
        let b = BinaryMask::empty(3, 4).unwrap();
        assert!(matches!(
            dice::<f64>(&a, &b),
            Err(MaskError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn double_threshold_hand_example() {
        let c0 = SoftMask::new(2, 2, vec![0.10, 0.50, 0.30, 0.05]).unwrap();
        let out = double_threshold(&c0, 0.15, 0.4);
        // row 0: (0,0)=0.10 dropped, (1,0)=0.50 kept; row 1: (0,1)=0.30 kept, (1,1) dropped
        assert_eq!(out.bits(), &[false, true, true, false]);
    }

    #[test]
    fn double_threshold_degenerate_inputs() {
        let zeros = SoftMask::<f64>::zeros(5, 3).unwrap();
        assert!(double_threshold(&zeros, 0.15, 0.4).is_empty());
        let constant = SoftMask::new(3, 3, vec![0.9; 9]).unwrap();
        assert_eq!(double_threshold(&constant, 0.15, 0.4).count(), 9);
    }

    #[test]
    fn subtract_examples() {
        let all = BinaryMask::new(2, 2, vec![true; 4]).unwrap();
        let one = bm(2, 2, &[(1, 1)]);
        assert_eq!(mask_subtract(&all, &one).unwrap().count(), 3);
        let t = bm(4, 1, &[(0, 0)]);
        let disjoint = bm(4, 1, &[(3, 0)]);
        assert_eq!(mask_subtract(&t, &disjoint).unwrap(), t);
        assert!(mask_subtract(&t, &all_of(4, 1)).unwrap().is_empty());
    }

    fn all_of(w: usize, h: usize) -> BinaryMask {
        BinaryMask::new(w, h, vec![true; w * h]).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        let target = bm(2, 2, &[(0, 0), (1, 1)]);
        let perfect = SoftMask::from_indicator(&target);
        assert!(bce_loss::<f64>(&perfect, &target, LossKind::FullBce).unwrap() < 1e-6);
        let half = SoftMask::new(2, 2, vec![0.5; 4]).unwrap();
        let l = bce_loss(&half, &target, LossKind::FullBce).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let ones = all_of(2, 2);
        let quarter = SoftMask::new(2, 2, vec![0.25; 4]).unwrap();
        let l = bce_loss(&quarter, &ones, LossKind::FullBce).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        // the one-sided form ignores background pixels
        let l = bce_loss(&half, &target, LossKind::OneSided).unwrap();
        assert!((l - std::f64::consts::LN_2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn constructors_validate() {
        assert!(SoftMask::new(2, 2, vec![0.0, 1.0, 0.5, 1.5]).is_err());
        assert!(SoftMask::new(2, 2, vec![0.0, f64::NAN, 0.5, 0.5]).is_err());
        assert!(SoftMask::<f64>::new(0, 2, vec![]).is_err());
        assert!(Image::new(3, 1, vec![0.1, 0.2]).is_err());
        assert!(BinaryMask::new(2, 3, vec![false; 5]).is_err());
    }

    #[test]
    fn bilinear_sample_interpolates() {
        let img = Image::new(2, 2, vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        assert!((img.sample(0.25, 0.5) - 0.25).abs() < 1e-15);
        assert_eq!(img.sample(-3.0, 0.0), 0.0);
        assert_eq!(img.sample(5.0, 5.0), 1.0);
    }

    fn arb_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            (
                proptest::collection::vec(any::<bool>(), w * h),
                proptest::collection::vec(any::<bool>(), w * h),
            )
                .prop_map(move |(a, b)| {
                    (
                        BinaryMask::new(w, h, a).unwrap(),
                        BinaryMask::new(w, h, b).unwrap(),
                    )
                })
        })
    }

    fn arb_soft() -> impl Strategy<Value = SoftMask<f64>> {
        (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0.0f64..=1.0, w * h)
                .prop_map(move |v| SoftMask::new(w, h, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded((a, b) in arb_pair()) {
            let ab: f64 = dice(&a, &b).unwrap();
            let ba: f64 = dice(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(dice::<f64>(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn subtract_is_disjoint_from_subtrahend((t, o) in arb_pair()) {
            let diff = mask_subtract(&t, &o).unwrap();
            prop_assert_eq!(diff.intersection_count(&o).unwrap(), 0);
        }

        #[test]
        fn double_threshold_idempotent_on_indicator(c in arb_soft(), t_min in 0.0f64..1.0, alpha in 0.01f64..0.99) {
            let once = double_threshold(&c, t_min, alpha);
            let again = double_threshold(&SoftMask::from_indicator(&once), t_min, alpha);
            prop_assert_eq!(once, again);
        }

        #[test]
        fn double_threshold_monotone_in_alpha(c in arb_soft(), t_min in 0.0f64..1.0, lo in 0.01f64..0.98, step in 0.0f64..0.5) {
            let hi = (lo + step).min(0.99);
            let wide = double_threshold(&c, t_min, lo);
            let narrow = double_threshold(&c, t_min, hi);
            prop_assert_eq!(mask_subtract(&narrow, &wide).unwrap().count(), 0);
        }

        #[test]
        fn bce_nonnegative(c in arb_soft(), bits in proptest::collection::vec(any::<bool>(), 64)) {
            let t = BinaryMask::from_fn(c.width(), c.height(), |x, y| bits[(y * c.width() + x) % 64]).unwrap();
            for kind in [LossKind::FullBce, LossKind::OneSided] {
                prop_assert!(bce_loss(&c, &t, kind).unwrap() >= 0.0);
            }
        }
    }
}

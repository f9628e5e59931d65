use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn flipped(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }

    /// Wire label: 1 for positive, 0 for negative.
    pub fn label(self) -> u8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => 0,
        }
    }

    pub fn from_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(Polarity::Positive),
            0 => Some(Polarity::Negative),
            _ => None,
        }
    }

    /// +1 for positive, -1 for negative.
    pub fn sign<T: Real>(self) -> T {
        match self {
            Polarity::Positive => T::one(),
            Polarity::Negative => -T::one(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptPoint<T = f64> {
    pub x: T,
    pub y: T,
    pub polarity: Polarity,
}

impl<T: Real> PromptPoint<T> {
    pub fn new(x: T, y: T, polarity: Polarity) -> Self {
        Self { x, y, polarity }
    }

    pub fn positive(x: T, y: T) -> Self {
        Self::new(x, y, Polarity::Positive)
    }

    pub fn negative(x: T, y: T) -> Self {
        Self::new(x, y, Polarity::Negative)
    }

    pub fn flipped(self) -> Self {
        Self {
            polarity: self.polarity.flipped(),
            ..self
        }
    }

    /// Clamps into `[0, width-1] x [0, height-1]`.
    pub fn clamped(self, width: usize, height: usize) -> Self {
        let mx = T::from_count(width.saturating_sub(1));
        let my = T::from_count(height.saturating_sub(1));
        Self {
            x: self.x.max(T::zero()).min(mx),
            y: self.y.max(T::zero()).min(my),
            polarity: self.polarity,
        }
    }

    pub fn record(&self) -> PointRecord {
        PointRecord {
            x: self.x.as_f64(),
            y: self.y.as_f64(),
            label: self.polarity.label(),
        }
    }
}

/// Serialized point, shared by reports and the bridge protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub x: f64,
    pub y: f64,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet<T = f64> {
    points: Vec<PromptPoint<T>>,
}

impl<T: Real> Default for PromptSet<T> {
    fn default() -> Self {
        Self { points: Vec::new() }
    }
}

impl<T: Real> FromIterator<PromptPoint<T>> for PromptSet<T> {
    fn from_iter<I: IntoIterator<Item = PromptPoint<T>>>(iter: I) -> Self {
        Self {
            points: iter.into_iter().collect(),
        }
    }
}

impl<T: Real> PromptSet<T> {
    pub fn new(points: Vec<PromptPoint<T>>) -> Self {
        Self { points }
    }

    pub fn points(&self) -> &[PromptPoint<T>] {
        &self.points
    }

    pub fn into_points(self) -> Vec<PromptPoint<T>> {
        self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PromptPoint<T>> {
        self.points.iter()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: PromptPoint<T>) {
        self.points.push(p);
    }

    pub fn extend_from(&mut self, other: &PromptSet<T>) {
        self.points.extend_from_slice(&other.points);
    }

    pub fn positives(&self) -> impl Iterator<Item = &PromptPoint<T>> {
        self.points
            .iter()
            .filter(|p| p.polarity == Polarity::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &PromptPoint<T>> {
        self.points
            .iter()
            .filter(|p| p.polarity == Polarity::Negative)
    }

    pub fn has_positive(&self) -> bool {
        self.positives().next().is_some()
    }

    pub fn to_records(&self) -> Vec<PointRecord> {
        self.points.iter().map(PromptPoint::record).collect()
    }

    /// Fails on a label other than 0 or 1.
    pub fn from_records(records: &[PointRecord]) -> Result<Self, u8> {
        records
            .iter()
            .map(|r| {
                Polarity::from_label(r.label)
                    .map(|pol| PromptPoint::new(T::lit(r.x), T::lit(r.y), pol))
                    .ok_or(r.label)
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }
}

/// Inverts every polarity; order and coordinates are kept.
pub fn flip_polarity<T: Real>(ps: &PromptSet<T>) -> PromptSet<T> {
    ps.iter().map(|p| p.flipped()).collect()
}

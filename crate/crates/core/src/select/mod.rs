//! Prompt points and positive-point selection by k-medoids.

mod kmedoids;
mod points;

pub use kmedoids::{brute_force_inertia, init_plus_plus, kmedoids, ClusteringResult, MAX_ITER};
pub use points::{flip_polarity, PointRecord, Polarity, PromptPoint, PromptSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::BinaryMask;
use crate::rng::{derive, seeded, splitmix64};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelectError {
    #[error("no foreground")]
    NoForeground,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid k range [{k_min}, {k_max}]")]
    InvalidRange { k_min: usize, k_max: usize },
}

/// How the scanned k values are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// Strictly smallest inertia; ties go to the smaller k.
    LiteralMin,
    /// A larger k must lower inertia by at least 1% to be preferred.
    #[default]
    #[serde(rename = "elbow_1pct")]
    Elbow1Pct,
}

impl std::str::FromStr for KRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal_min" => Ok(KRule::LiteralMin),
            "elbow_1pct" => Ok(KRule::Elbow1Pct),
            other => Err(format!(
                "unknown k rule '{other}' (expected literal_min or elbow_1pct)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub k_rule: KRule,
    /// Foreground pixels beyond this count are uniformly subsampled.
    pub max_samples: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            k_min: 4,
            k_max: 6,
            k_rule: KRule::Elbow1Pct,
            max_samples: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T = f64> {
    /// Positive points at medoid pixel coordinates.
    pub points: PromptSet<T>,
    pub k: usize,
    pub inertia: T,
    /// `(k, inertia)` for every scanned k.
    pub scanned: Vec<(usize, T)>,
    /// Number of pixels actually clustered.
    pub samples: usize,
    pub subsampled: bool,
}

/// Clusters the set pixels of `mask` for each k in the configured range and
/// keeps the medoids of the k preferred by the rule.
pub fn select_positive_points<T: Real>(
    mask: &BinaryMask,
    cfg: &SelectConfig,
    seed: u64,
) -> Result<Selection<T>, SelectError> {
    if cfg.k_min == 0 {
        return Err(SelectError::ZeroK);
    }
    if cfg.k_min > cfg.k_max {
        return Err(SelectError::InvalidRange {
            k_min: cfg.k_min,
            k_max: cfg.k_max,
        });
    }
    let mut pixels: Vec<[T; 2]> = mask
        .set_pixels()
        .map(|(x, y)| [T::from_count(x), T::from_count(y)])
        .collect();
    if pixels.is_empty() {
        return Err(SelectError::NoForeground);
    }
    let subsampled = pixels.len() > cfg.max_samples.max(1);
    if subsampled {
        let mut rng = seeded(splitmix64(seed));
        let mut keep =
            rand::seq::index::sample(&mut rng, pixels.len(), cfg.max_samples.max(1)).into_vec();
        keep.sort_unstable();
        pixels = keep.into_iter().map(|i| pixels[i]).collect();
    }

    let mut scanned = Vec::new();
    let mut best: Option<ClusteringResult<T>> = None;
    for k in cfg.k_min..=cfg.k_max {
        let r = kmedoids(&pixels, k, splitmix64(derive(seed, k as u64)))?;
        scanned.push((k, r.inertia));
        let better = match &best {
            None => true,
            Some(b) => match cfg.k_rule {
                KRule::LiteralMin => r.inertia < b.inertia,
                KRule::Elbow1Pct => r.inertia < b.inertia * T::lit(0.99),
            },
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.expect("k range is nonempty");
    Ok(Selection {
        points: best
            .medoids
            .iter()
            .map(|m| PromptPoint::positive(m[0], m[1]))
            .collect(),
        k: best.k,
        inertia: best.inertia,
        scanned,
        samples: pixels.len(),
        subsampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(w: usize, h: usize, set: impl Fn(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::from_fn(w, h, set).unwrap()
    }

    #[test]
    fn two_blobs_each_get_a_point() {
        let blob_a = [(2, 2), (3, 2), (2, 3)];
        let blob_b = [(40, 30), (41, 30), (40, 31)];
        let m = mask_with(50, 40, |x, y| {
            blob_a.contains(&(x, y)) || blob_b.contains(&(x, y))
        });
        for seed in 0..10 {
            let sel: Selection<f64> =
                select_positive_points(&m, &SelectConfig::default(), seed).unwrap();
            let inside = |blob: &[(usize, usize)]| {
                sel.points
                    .iter()
                    .any(|p| blob.contains(&(p.x as usize, p.y as usize)))
            };
            assert!(inside(&blob_a) && inside(&blob_b));
        }
    }

    #[test]
    fn tiny_mask_returns_all_pixels() {
        let set = [(1, 1), (5, 2), (7, 7)];
        let m = mask_with(8, 8, |x, y| set.contains(&(x, y)));
        let sel: Selection<f64> = select_positive_points(&m, &SelectConfig::default(), 3).unwrap();
        assert_eq!(sel.points.len(), 3);
        assert_eq!(sel.inertia, 0.0);
        for &(x, y) in &set {
            assert!(sel
                .points
                .iter()
                .any(|p| (p.x, p.y) == (x as f64, y as f64)));
        }
    }

    #[test]
    fn square_medoids_inside() {
        let m = mask_with(40, 40, |x, y| (10..30).contains(&x) && (5..25).contains(&y));
        let sel: Selection<f32> = select_positive_points(&m, &SelectConfig::default(), 11).unwrap();
        assert!((4..=6).contains(&sel.k));
        for p in sel.points.iter() {
            assert!(m.get(p.x as usize, p.y as usize));
            assert_eq!(p.polarity, Polarity::Positive);
        }
    }

    #[test]
    fn literal_rule_takes_largest_useful_k() {
        let m = mask_with(40, 40, |x, y| (10..30).contains(&x) && (5..25).contains(&y));
        let cfg = SelectConfig {
            k_rule: KRule::LiteralMin,
            ..SelectConfig::default()
        };
        let sel: Selection<f64> = select_positive_points(&m, &cfg, 1).unwrap();
        let min = sel
            .scanned
            .iter()
            .map(|s| s.1)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(sel.inertia, min);
        let first = sel.scanned.iter().find(|s| s.1 == min).unwrap().0;
        assert_eq!(sel.k, first);
    }

    #[test]
    fn errors_and_subsampling() {
        let empty = BinaryMask::empty(4, 4).unwrap();
        assert_eq!(
            select_positive_points::<f64>(&empty, &SelectConfig::default(), 0).unwrap_err(),
            SelectError::NoForeground
        );
        let full = mask_with(30, 30, |_, _| true);
        let cfg = SelectConfig {
            max_samples: 100,
            ..SelectConfig::default()
        };
        let a: Selection<f64> = select_positive_points(&full, &cfg, 5).unwrap();
        assert!(a.subsampled);
        assert_eq!(a.samples, 100);
        let b: Selection<f64> = select_positive_points(&full, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }
}

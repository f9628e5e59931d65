//! Synthetic phantoms (tendon band with pathology blobs) and a coarse-mask
//! degrader that mimics segmentors trained on less data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{
    read_binary_mask, read_image, read_soft_mask, write_binary_png, write_png, write_srf,
    RasterError,
};
use crate::mask::{BinaryMask, Image, MaskError, SoftMask};
use crate::rng::{image_seed, seeded};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
    #[error("infeasible geometry: {0}")]
    Infeasible(String),
    #[error("unknown training regime {0}% (expected one of 5, 8, 12, 15, 20, 25, 35, 60, 100)")]
    UnknownRegime(u32),
    #[error("severity must lie in [0, 1], got {0}")]
    InvalidSeverity(f64),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    /// Tendon thickness as a fraction of the height.
    pub tendon_band: f64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Target pathology area as a fraction of the image.
    pub pathology_area_fraction: f64,
    /// Relative amplitude of multiplicative speckle.
    pub speckle_noise: f64,
    pub background_level: f64,
    pub tendon_level: f64,
    pub pathology_level: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            tendon_band: 0.10,
            blobs_min: 1,
            blobs_max: 3,
            pathology_area_fraction: 0.0109,
            speckle_noise: 0.05,
            background_level: 0.02,
            tendon_level: 0.15,
            pathology_level: 0.45,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.width < 32 || self.height < 32 {
            return bad(format!(
                "size {}x{} is below 32x32",
                self.width, self.height
            ));
        }
        for (name, f) in [
            ("tendon_band", self.tendon_band),
            ("pathology_area_fraction", self.pathology_area_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {f}"));
            }
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return bad(format!(
                "blob count range [{}, {}]",
                self.blobs_min, self.blobs_max
            ));
        }
        if !(self.speckle_noise >= 0.0 && self.speckle_noise.is_finite()) {
            return bad(format!(
                "speckle_noise must be nonnegative, got {}",
                self.speckle_noise
            ));
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("tendon_level", self.tendon_level),
            ("pathology_level", self.pathology_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom<T = f64> {
    pub image: Image<T>,
    pub tendon: BinaryMask,
    pub pathology: BinaryMask,
    pub blobs: usize,
}

impl<T: Real> Phantom<T> {
    pub fn pathology_fraction(&self) -> f64 {
        self.pathology.count() as f64 / (self.pathology.width() * self.pathology.height()) as f64
    }
}

/// Background, a horizontal tendon band, and 1-3 elliptical pathology blobs
/// confined to the band, with multiplicative speckle.
pub fn generate_phantom<T: Real>(cfg: &PhantomConfig) -> Result<Phantom<T>, SynthError> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = seeded(cfg.seed);

    let bh = (cfg.tendon_band * hf).round() as usize;
    let lo = (0.3 * hf) as usize;
    let hi = ((0.7 * hf) as usize).saturating_sub(bh);
    if bh < 3 || hi <= lo {
        return Err(SynthError::Infeasible(format!(
            "a {bh}-row tendon band does not fit the middle of a {h}-row image"
        )));
    }
    let b_cap = bh as f64 / 2.0 - 1.2;
    let y0 = rng.random_range(lo..hi);
    let tendon = BinaryMask::from_fn(w, h, |_, y| (y0..y0 + bh).contains(&y))?;

    let nb = rng.random_range(cfg.blobs_min..=cfg.blobs_max);
    let target = cfg.pathology_area_fraction * wf * hf;
    let mut weights: Vec<f64> = (0..nb).map(|_| rng.random_range(0.6..1.4)).collect();
    let wsum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|x| *x /= wsum);

    let left = 0.12 * wf;
    let slot = (0.88 - 0.12) * wf / nb as f64;
    let mut ellipses = Vec::with_capacity(nb);
    for (i, wt) in weights.iter().enumerate() {
        let area = target * wt;
        let b = b_cap.min((area / std::f64::consts::PI / 1.5).sqrt()) * rng.random_range(0.75..1.0);
        let a = area / (std::f64::consts::PI * b);
        let (s0, s1) = (left + slot * i as f64, left + slot * (i + 1) as f64);
        let cx = if s1 - s0 > 2.0 * a {
            rng.random_range(s0 + a..s1 - a)
        } else {
            (s0 + s1) / 2.0
        };
        let wiggle = (bh as f64 / 2.0 - 1.0 - b).max(0.0);
        let cy = y0 as f64 + (bh as f64 - 1.0) / 2.0 + rng.random_range(-1.0..1.0) * wiggle;
        ellipses.push((cx, cy, a, b));
    }
    let pathology = BinaryMask::from_fn(w, h, |x, y| {
        tendon.get(x, y)
            && ellipses.iter().any(|&(cx, cy, a, b)| {
                let u = (x as f64 - cx) / a;
                let v = (y as f64 - cy) / b;
                u * u + v * v <= 1.0
            })
    })?;
    let achieved = pathology.count() as f64;
    if !(achieved >= 0.5 * target && achieved <= 1.5 * target) {
        return Err(SynthError::Infeasible(format!(
            "pathology covers {achieved} px against a target of {target:.1} px"
        )));
    }

    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let base = if pathology.get(x, y) {
                cfg.pathology_level
            } else if tendon.get(x, y) {
                cfg.tendon_level
            } else {
                cfg.background_level
            };
            let n: f64 = StandardNormal.sample(&mut rng);
            values.push(T::lit(
                (base * (1.0 + cfg.speckle_noise * n)).clamp(0.0, 1.0),
            ));
        }
    }
    Ok(Phantom {
        image: Image::new(w, h, values)?,
        tendon,
        pathology,
        blobs: nb,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub severity: f64,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn new(severity: f64, seed: u64) -> Result<Self, SynthError> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(SynthError::InvalidSeverity(severity));
        }
        Ok(Self { severity, seed })
    }

    pub fn blur_sigma(&self) -> f64 {
        1.0 + 6.0 * self.severity
    }

    pub fn amplitude(&self) -> f64 {
        1.0 - 0.6 * self.severity
    }

    pub fn dropout(&self) -> f64 {
        0.3 * self.severity
    }

    pub fn noise_sigma(&self) -> f64 {
        0.05 * self.severity
    }
}

/// 4-connected component labels in first-encounter order; 0 is background.
pub fn label_components(mask: &BinaryMask) -> (Vec<usize>, usize) {
    let (w, h) = mask.dims();
    let mut labels = vec![0usize; w * h];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.bits()[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    (labels, next)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let r = i.rem_euclid(period);
    (if r >= n { period - 1 - r } else { r }) as usize
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, mirrored edges.
pub fn gaussian_blur(values: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ks: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ks);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * values[y * w + reflect(x as isize + j as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[reflect(y as isize + j as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Blob dropout, blur, attenuation, clipped noise, clamp. Severity 0 returns
/// the indicator unchanged.
pub fn degrade_mask<T: Real>(
    gt: &BinaryMask,
    cfg: &DegradeConfig,
) -> Result<SoftMask<T>, SynthError> {
    if !(0.0..=1.0).contains(&cfg.severity) {
        return Err(SynthError::InvalidSeverity(cfg.severity));
    }
    if cfg.severity == 0.0 {
        return Ok(SoftMask::from_indicator(gt));
    }
    let (w, h) = gt.dims();
    let mut rng = seeded(cfg.seed);
    let (labels, n) = label_components(gt);
    let drop: Vec<bool> = (0..n)
        .map(|_| rng.random::<f64>() < cfg.dropout())
        .collect();
    let kept: Vec<f64> = labels
        .iter()
        .map(|&l| if l > 0 && !drop[l - 1] { 1.0 } else { 0.0 })
        .collect();
    let blurred = gaussian_blur(&kept, w, h, cfg.blur_sigma());
    let ns = cfg.noise_sigma();
    let amp = cfg.amplitude();
    let values = blurred
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            let noise = (z * ns).clamp(-3.0 * ns, 3.0 * ns);
            T::lit((v * amp + noise).clamp(0.0, 1.0))
        })
        .collect();
    Ok(SoftMask::new(w, h, values)?)
}

/// Training-set percentages with a simulated severity, most data first.
pub const REGIMES: [(u32, f64); 9] = [
    (100, 0.1),
    (60, 0.2),
    (35, 0.3),
    (25, 0.4),
    (20, 0.5),
    (15, 0.6),
    (12, 0.7),
    (8, 0.8),
    (5, 0.9),
];

pub fn severity_for_regime(train_fraction: u32) -> Result<f64, SynthError> {
    REGIMES
        .iter()
        .find(|r| r.0 == train_fraction)
        .map(|r| r.1)
        .ok_or(SynthError::UnknownRegime(train_fraction))
}

/// File-name tag for a severity, e.g. `0.3`.
pub fn severity_tag(severity: f64) -> String {
    format!("{severity:.1}")
}

/// Degrader seed for one phantom at one severity.
pub fn coarse_seed(phantom_seed: u64, severity: f64) -> u64 {
    image_seed(phantom_seed, &format!("coarse_s{}", severity_tag(severity)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub blobs: usize,
    pub pathology_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub phantom: PhantomConfig,
    pub master_seed: u64,
    pub severities: Vec<f64>,
    pub images: Vec<ManifestEntry>,
}

pub fn phantom_id(seed: u64) -> String {
    format!("phantom_{seed}")
}

/// Writes `count` phantoms with seeds `seed, seed+1, ...`, each with a
/// coarse mask for every known severity, plus `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    count: usize,
    seed: u64,
    template: &PhantomConfig,
) -> Result<Manifest, SynthError> {
    fs::create_dir_all(dir)?;
    let severities: Vec<f64> = REGIMES.iter().map(|r| r.1).collect();
    let mut images = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s = seed.wrapping_add(i);
        let ph: Phantom<f64> = generate_phantom(&template.with_seed(s))?;
        let id = phantom_id(s);
        let sub = dir.join(&id);
        fs::create_dir_all(&sub)?;
        let (w, h) = ph.image.dims();
        write_png(&sub.join("image.png"), w, h, ph.image.intensity())?;
        write_binary_png(&sub.join("tendon.png"), &ph.tendon)?;
        write_binary_png(&sub.join("pathology.png"), &ph.pathology)?;
        for &sev in &severities {
            let coarse: SoftMask<f64> = degrade_mask(
                &ph.pathology,
                &DegradeConfig::new(sev, coarse_seed(s, sev))?,
            )?;
            write_srf(
                &sub.join(format!("coarse_s{}.srf", severity_tag(sev))),
                w,
                h,
                coarse.values(),
            )?;
        }
        images.push(ManifestEntry {
            pathology_fraction: ph.pathology_fraction(),
            blobs: ph.blobs,
            id,
            seed: s,
        });
    }
    let manifest = Manifest {
        phantom: template.clone(),
        master_seed: seed,
        severities,
        images,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// One loaded dataset item.
#[derive(Debug, Clone)]
pub struct DatasetItem<T = f64> {
    pub id: String,
    pub image: Image<T>,
    pub tendon: BinaryMask,
    pub pathology: BinaryMask,
    /// Coarse masks keyed by severity tag.
    pub coarse: BTreeMap<String, SoftMask<T>>,
}

/// An item that could not be loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub item: String,
    pub reason: String,
}

/// Item directories: from the manifest when present, else every
/// subdirectory holding an `image.png`, sorted by name.
pub fn list_items(dir: &Path) -> Result<Vec<(String, PathBuf)>, SynthError> {
    let manifest = dir.join("manifest.json");
    if manifest.exists() {
        let m: Manifest = serde_json::from_slice(&fs::read(manifest)?)?;
        return Ok(m
            .images
            .into_iter()
            .map(|e| (e.id.clone(), dir.join(e.id)))
            .collect());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.join("image.png").exists() {
            let id = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads an item with the coarse masks for `severities`.
pub fn load_item<T: Real>(
    id: &str,
    dir: &Path,
    severities: &[f64],
) -> Result<DatasetItem<T>, SynthError> {
    let image = read_image(&dir.join("image.png"))?;
    let tendon = read_binary_mask(&dir.join("tendon.png"))?;
    let pathology = read_binary_mask(&dir.join("pathology.png"))?;
    let mut coarse = BTreeMap::new();
    for &sev in severities {
        let tag = severity_tag(sev);
        let m = read_soft_mask(&dir.join(format!("coarse_s{tag}.srf")))?;
        coarse.insert(tag, m);
    }
    Ok(DatasetItem {
        id: id.to_string(),
        image,
        tendon,
        pathology,
        coarse,
    })
}

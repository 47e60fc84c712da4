//! Count levels and count-domain simulation: binomial thinning of full-count
//! images and normalization into model-ready intensity slices.
//!
//! Thinning keeps each detected event with probability p, mirroring
//! retrospective list-mode rebinning: the low-count image is a subset of the
//! full-count events, so levels stay coupled per pixel. Normalization divides
//! by (level value x global scale) so every level shares one intensity scale
//! and differs only in noise.

use std::cmp::Ordering;
use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact rational dose fraction in (0, 1]. Stored reduced; value 1 is the
/// full count and displays as "full".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CountLevel {
    num: u32,
    den: u32,
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl CountLevel {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!(
                "count level {num}/{den} must have positive numerator and denominator"
            )));
        }
        if num > den {
            return Err(Error::Config(format!(
                "count level {num}/{den} exceeds the full count"
            )));
        }
        let g = gcd(num, den);
        Ok(CountLevel {
            num: num / g,
            den: den / g,
        })
    }

    pub fn full() -> Self {
        CountLevel { num: 1, den: 1 }
    }

    pub fn is_full(&self) -> bool {
        self.num == self.den
    }

    pub fn value(&self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    pub fn numerator(&self) -> u32 {
        self.num
    }

    pub fn denominator(&self) -> u32 {
        self.den
    }

    /// Display label: "full" for value 1, otherwise "num/den" (e.g. "1/100").
    pub fn label(&self) -> String {
        if self.is_full() {
            "full".to_string()
        } else {
            format!("{}/{}", self.num, self.den)
        }
    }

    /// Label with '/' replaced for use in file names (e.g. "1_100").
    pub fn file_label(&self) -> String {
        self.label().replace('/', "_")
    }

    /// Parse "full", "1", or "a/b".
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") || s == "1" {
            return Ok(CountLevel::full());
        }
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| Error::Config(format!("cannot parse count level '{s}'")))?;
        let num: u32 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse count level '{s}'")))?;
        let den: u32 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse count level '{s}'")))?;
        CountLevel::new(num, den)
    }
}

impl Ord for CountLevel {
    fn cmp(&self, other: &Self) -> Ordering {
        // Exact rational comparison via cross multiplication.
        let lhs = u64::from(self.num) * u64::from(other.den);
        let rhs = u64::from(other.num) * u64::from(self.den);
        lhs.cmp(&rhs)
    }
}

impl PartialOrd for CountLevel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CountLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl Serialize for CountLevel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for CountLevel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CountLevel::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// The canonical level set, ascending: 1/100, 1/20, 1/10, 1/4, 1/2, full.
pub fn registry() -> Vec<CountLevel> {
    [(1, 100), (1, 20), (1, 10), (1, 4), (1, 2), (1, 1)]
        .iter()
        .map(|&(n, d)| CountLevel::new(n, d).unwrap())
        .collect()
}

/// Integer count map at a given level.
#[derive(Debug, Clone, PartialEq)]
pub struct CountImage {
    pub counts: Array2<u32>,
    pub level: CountLevel,
    pub source_id: u64,
}

/// Normalized intensity form of a count image. `scale` records the global
/// normalization divisor so the transform is invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSlice {
    pub intensity: Array2<f32>,
    pub level: CountLevel,
    pub scale: f64,
}

/// Seed derivation rule for per-slice parallel simulation: `base ^ index`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

/// Binomial thinning: each event in the full-count image survives with
/// probability `target.value()`. Only full-count inputs may be thinned;
/// lower levels compose statistically (thinning a thinned image is covered
/// by the distributional tests, not by this API).
pub fn thin(full: &CountImage, target: CountLevel, seed: u64) -> Result<CountImage> {
    if !full.level.is_full() {
        return Err(Error::Constraint(format!(
            "thin requires a full-count input, got level {}",
            full.level
        )));
    }
    if target.is_full() {
        return Ok(CountImage {
            counts: full.counts.clone(),
            level: target,
            source_id: full.source_id,
        });
    }
    let p = target.value();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = Array2::<u32>::zeros(full.counts.raw_dim());
    for (out, &n) in counts.iter_mut().zip(full.counts.iter()) {
        if n > 0 {
            let b = Binomial::new(u64::from(n), p)
                .map_err(|e| Error::Numeric(format!("binomial({n}, {p}): {e}")))?;
            *out = b.sample(&mut rng) as u32;
        }
    }
    Ok(CountImage {
        counts,
        level: target,
        source_id: full.source_id,
    })
}

/// Duration-corrected normalization: intensity = counts / (level x scale).
pub fn normalize(img: &CountImage, global_scale: f64) -> Result<ImageSlice> {
    if global_scale.is_nan() || global_scale <= 0.0 || !global_scale.is_finite() {
        return Err(Error::Config(format!(
            "global scale must be positive and finite, got {global_scale}"
        )));
    }
    let denom = img.level.value() * global_scale;
    let intensity = img.counts.mapv(|c| (f64::from(c) / denom) as f32);
    Ok(ImageSlice {
        intensity,
        level: img.level,
        scale: global_scale,
    })
}

/// 99.5th percentile (nearest-rank) of duration-corrected intensities pooled
/// over all provided images. Normalized training data then lies mostly in
/// [0, 1].
pub fn compute_global_scale(training_full_slices: &[CountImage]) -> Result<f64> {
    if training_full_slices.is_empty() {
        return Err(Error::Config(
            "global scale requires at least one full-count image".to_string(),
        ));
    }
    let mut pooled: Vec<f64> = Vec::new();
    for img in training_full_slices {
        let corr = img.level.value();
        pooled.extend(img.counts.iter().map(|&c| f64::from(c) / corr));
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = pooled.len();
    let rank = ((0.995 * n as f64).ceil() as usize).clamp(1, n);
    let scale = pooled[rank - 1];
    if scale.is_nan() || scale <= 0.0 {
        return Err(Error::Numeric(
            "global scale percentile is zero; images carry no counts".to_string(),
        ));
    }
    Ok(scale)
}

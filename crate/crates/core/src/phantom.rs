//! Synthetic 2D activity phantoms and their Poisson full-count realizations.
//!
//! A phantom is a square activity map built from randomly placed soft-edged
//! ellipses (background) plus small high-uptake disks (lesions), composited
//! additively. One phantom stands in for one patient when splitting data.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::countsim::{CountImage, CountLevel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Pixels per side (square), at least 16.
    pub size: usize,
    pub n_background_ellipses: usize,
    pub n_lesions: usize,
    /// (low, high) activity units.
    pub background_intensity_range: (f64, f64),
    pub lesion_intensity_range: (f64, f64),
    /// (low, high) lesion radius in pixels.
    pub lesion_radius_range: (f64, f64),
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config(format!(
                "phantom size {} must be at least 16",
                self.size
            )));
        }
        for (name, (lo, hi)) in [
            ("background_intensity_range", self.background_intensity_range),
            ("lesion_intensity_range", self.lesion_intensity_range),
            ("lesion_radius_range", self.lesion_radius_range),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || lo > hi {
                return Err(Error::Config(format!(
                    "{name} ({lo}, {hi}) must satisfy 0 <= low <= high"
                )));
            }
        }
        Ok(())
    }
}

/// Nonnegative activity field; `spec_seed` records provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMap {
    pub values: Array2<f64>,
    pub spec_seed: u64,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    angle: f64,
    intensity: f64,
}

impl Ellipse {
    /// Additive splat with a soft boundary: full intensity deeper than one
    /// pixel inside the edge, linear falloff across the last pixel.
    fn splat(&self, field: &mut Array2<f64>) {
        let (h, w) = field.dim();
        let (sin, cos) = self.angle.sin_cos();
        let reach = self.a.max(self.b) + 1.0;
        let y0 = ((self.cy - reach).floor().max(0.0)) as usize;
        let y1 = ((self.cy + reach).ceil().min((h - 1) as f64)) as usize;
        let x0 = ((self.cx - reach).floor().max(0.0)) as usize;
        let x1 = ((self.cx + reach).ceil().min((w - 1) as f64)) as usize;
        let r_min = self.a.min(self.b);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - self.cy;
                let dx = x as f64 - self.cx;
                let u = (dx * cos + dy * sin) / self.a;
                let v = (-dx * sin + dy * cos) / self.b;
                let rho = (u * u + v * v).sqrt();
                let coverage = ((1.0 - rho) * r_min).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    field[(y, x)] += self.intensity * coverage;
                }
            }
        }
    }
}

/// Deterministic phantom generation: background ellipses first, then
/// lesions, each drawn from the spec-seeded stream in a fixed order.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ActivityMap> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut field = Array2::<f64>::zeros((spec.size, spec.size));
    let side = spec.size as f64;

    for _ in 0..spec.n_background_ellipses {
        let cy = rng.random_range(0.25 * side..0.75 * side);
        let cx = rng.random_range(0.25 * side..0.75 * side);
        let a = rng.random_range(0.12 * side..0.35 * side);
        let b = rng.random_range(0.12 * side..0.35 * side);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let (lo, hi) = spec.background_intensity_range;
        let intensity = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Ellipse {
            cy,
            cx,
            a,
            b,
            angle,
            intensity,
        }
        .splat(&mut field);
    }

    for _ in 0..spec.n_lesions {
        let cy = rng.random_range(0.3 * side..0.7 * side);
        let cx = rng.random_range(0.3 * side..0.7 * side);
        let (rlo, rhi) = spec.lesion_radius_range;
        let r = if rhi > rlo { rng.random_range(rlo..rhi) } else { rlo };
        let (lo, hi) = spec.lesion_intensity_range;
        let intensity = if hi > lo { rng.random_range(lo..hi) } else { lo };
        Ellipse {
            cy,
            cx,
            a: r,
            b: r,
            angle: 0.0,
            intensity,
        }
        .splat(&mut field);
    }

    Ok(ActivityMap {
        values: field,
        spec_seed: spec.seed,
    })
}

/// Poisson realization of an activity map, scaled so the expected total
/// equals `total_expected_counts`.
pub fn synthesize_full_count(
    activity: &ActivityMap,
    total_expected_counts: u64,
    seed: u64,
) -> Result<CountImage> {
    let sum: f64 = activity.values.iter().sum();
    if sum.is_nan() || sum <= 0.0 {
        return Err(Error::Numeric(
            "activity map sums to zero; cannot normalize expected counts".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factor = total_expected_counts as f64 / sum;
    let mut counts = Array2::<u32>::zeros(activity.values.raw_dim());
    for (out, &v) in counts.iter_mut().zip(activity.values.iter()) {
        let lambda = v * factor;
        if lambda > 0.0 {
            let pois = Poisson::new(lambda)
                .map_err(|e| Error::Numeric(format!("poisson({lambda}): {e}")))?;
            *out = pois.sample(&mut rng) as u32;
        }
    }
    Ok(CountImage {
        counts,
        level: CountLevel::full(),
        source_id: activity.spec_seed,
    })
}

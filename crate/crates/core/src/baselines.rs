//! Comparators: a fixed-pair plain U-Net (same backbone, gates frozen at
//! identity, trained only on 1/100 -> full) and classical Gaussian
//! smoothing with a sigma sweep.

use std::path::Path;

use ndarray::Array2;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::condunet::ModelConfig;
use crate::countsim::{CountLevel, ImageSlice};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::metrics;
use crate::trainer::{self, LoadedDataset, PairPolicy, TrainConfig, TrainOutcome};

#[derive(Debug, Clone)]
pub enum BaselineSpec {
    /// Backbone hyperparameters identical to the conditional model.
    PlainUnet { model: ModelConfig },
    Gaussian { sigmas: Vec<f64> },
}

/// Train the plain U-Net baseline: the trainer loop with a degenerate
/// single-pair (1/100 -> full) policy and gates frozen at identity.
pub fn train_plain_unet(
    data: &LoadedDataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    table: &EmbeddingTable,
    periodic_dir: Option<&Path>,
    config_snapshot: &str,
) -> Result<TrainOutcome> {
    let input = CountLevel::new(1, 100)?;
    let output = CountLevel::full();
    let policy = PairPolicy::single(input, output)?;
    trainer::train(
        data,
        model_config,
        train_config,
        table,
        ModelKind::PlainUnet,
        &policy,
        None,
        periodic_dir,
        config_snapshot,
    )
}

/// Normalized 1D Gaussian taps with radius ceil(3 sigma).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    taps
}

fn reflect(idx: isize, len: usize) -> usize {
    // Symmetric reflection with edge repeat: -1 -> 0, len -> len-1.
    let len = len as isize;
    let mut i = idx;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= len {
            i = 2 * len - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable 2D Gaussian convolution with reflective boundaries.
/// sigma = 0 returns the input bit-identically.
pub fn gaussian_filter(image: &Array2<f32>, sigma: f64) -> Result<Array2<f32>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma {sigma} must be nonnegative")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w) = image.dim();

    let mut rows = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let xi = reflect(x as isize + k as isize - radius, w);
                acc += t * f64::from(image[(y, xi)]);
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let yi = reflect(y as isize + k as isize - radius, h);
                acc += t * rows[(yi, x)];
            }
            out[(y, x)] = acc as f32;
        }
    }
    Ok(out)
}

pub fn gaussian_denoise(slice: &ImageSlice, sigma: f64) -> Result<ImageSlice> {
    Ok(ImageSlice {
        intensity: gaussian_filter(&slice.intensity, sigma)?,
        level: slice.level,
        scale: slice.scale,
    })
}

/// Sweep sigmas on the test split at `level` vs full count; returns
/// (best sigma, mean PSNR, mean SSIM) by PSNR.
pub fn best_sigma_gaussian(
    data: &LoadedDataset,
    level: CountLevel,
    sigmas: &[f64],
) -> Result<(f64, f64, f64)> {
    if sigmas.is_empty() {
        return Err(Error::Config("sigma sweep list is empty".to_string()));
    }
    let full = CountLevel::full();
    let mut best: Option<(f64, f64, f64)> = None;
    for &sigma in sigmas {
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        for &id in &data.test_ids {
            let reference = metrics::to_f64(data.slice(id, full)?);
            let smoothed = gaussian_denoise(data.slice(id, level)?, sigma)?;
            let (p, s) = metrics::score_pair(&metrics::to_f64(&smoothed), &reference)?;
            psnr_sum += p;
            ssim_sum += s;
        }
        let n = data.test_ids.len() as f64;
        let cand = (sigma, psnr_sum / n, ssim_sum / n);
        if best.is_none_or(|b| cand.1 > b.1) {
            best = Some(cand);
        }
    }
    Ok(best.unwrap())
}

/// Backbone parity check: the non-gate names/shapes of the plain model
/// coincide with the conditional model's.
pub fn backbone_matches(conditional: &Checkpoint, plain: &Checkpoint) -> bool {
    let a: Vec<_> = conditional
        .params
        .tensors()
        .filter(|(n, _)| !n.contains(".gate."))
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    let b: Vec<_> = plain
        .params
        .tensors()
        .filter(|(n, _)| !n.contains(".gate."))
        .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
        .collect();
    a == b
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.5, 1.0, 1.5, 2.0, 3.7] {
            let taps = gaussian_kernel(sigma);
            let sum: f64 = taps.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sigma {sigma}: sum {sum}");
        }
    }

    #[test]
    fn sigma_zero_is_identity() {
        let img = Array2::from_shape_fn((16, 16), |(i, j)| (i * 16 + j) as f32 * 0.01);
        let out = gaussian_filter(&img, 0.0).unwrap();
        assert_eq!(out, img);
        assert!(gaussian_filter(&img, -1.0).is_err());
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = Array2::from_elem((20, 20), 0.7_f32);
        for sigma in [0.5, 1.5, 4.0] {
            let out = gaussian_filter(&img, sigma).unwrap();
            for &v in out.iter() {
                assert!((v - 0.7).abs() < 1e-6, "sigma {sigma}: {v}");
            }
        }
    }

    #[test]
    fn impulse_response_matches_analytic_kernel() {
        let sigma = 1.5;
        let side = 31;
        let mut img = Array2::<f32>::zeros((side, side));
        img[(15, 15)] = 1.0;
        let out = gaussian_filter(&img, sigma).unwrap();

        // Center value approximates the continuous normalized Gaussian peak.
        let analytic = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let center = f64::from(out[(15, 15)]);
        assert!(
            (center - analytic).abs() < 1e-3,
            "center {center} vs analytic {analytic}"
        );

        // Far from boundaries the response is the separable kernel product.
        let taps = gaussian_kernel(sigma);
        let radius = taps.len() / 2;
        for dy in 0..3usize {
            for dx in 0..3usize {
                let expected = taps[radius + dy] * taps[radius + dx];
                let got = f64::from(out[(15 + dy, 15 + dx)]);
                assert!(
                    (got - expected).abs() < 1e-6,
                    "offset ({dy},{dx}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn plain_unet_trains_with_frozen_gates() {
        use crate::condunet;
        use crate::countsim::{self, compute_global_scale, normalize, registry};
        use crate::embedder::{embedding_table, EmbedderBackend, PromptTemplate};
        use crate::phantom::{generate_phantom, synthesize_full_count, PhantomSpec};
        use crate::trainer::{LoadedDataset, Schedule, TrainConfig};
        use std::collections::BTreeMap;

        let mut slices = BTreeMap::new();
        let mut scale = 1.0;
        for pid in 0..3u64 {
            let spec = PhantomSpec {
                seed: pid + 40,
                size: 16,
                n_background_ellipses: 2,
                n_lesions: 1,
                background_intensity_range: (0.5, 1.0),
                lesion_intensity_range: (1.0, 2.0),
                lesion_radius_range: (2.0, 3.0),
            };
            let act = generate_phantom(&spec).unwrap();
            let full = synthesize_full_count(&act, 300_000, pid).unwrap();
            scale = compute_global_scale(std::slice::from_ref(&full)).unwrap();
            let mut per_level = BTreeMap::new();
            for (i, level) in registry().into_iter().enumerate() {
                let img = countsim::thin(&full, level, 90 + i as u64).unwrap();
                per_level.insert(level, normalize(&img, scale).unwrap());
            }
            slices.insert(pid, per_level);
        }
        let data = LoadedDataset {
            slices,
            train_ids: vec![0, 1],
            test_ids: vec![2],
            global_scale: scale,
            size: 16,
        };
        let model = ModelConfig {
            depth: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            conv_kernel: 3,
            blocks_per_level: 1,
            embedding_dim: 16,
            groups_for_norm: 2,
        };
        let tc = TrainConfig {
            batch_size: 2,
            schedule: Schedule::Steps(40),
            seed: 8,
            ..TrainConfig::default()
        };
        let backend = EmbedderBackend::DeterministicFallback { seed: 2, dim: 16 };
        let table = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        let outcome = train_plain_unet(&data, &model, &tc, &table, None, "").unwrap();

        assert_eq!(outcome.checkpoint.kind, ModelKind::PlainUnet);
        // Loss moves, gates do not.
        let first = outcome.log.first().unwrap().loss;
        let last = outcome.log.last().unwrap().loss;
        assert!(last < first, "plain training did not reduce loss ({first} -> {last})");
        for (name, value) in outcome.checkpoint.params.tensors() {
            if name.contains(".gate.weight") {
                assert!(value.iter().all(|&v| v == 0.0), "{name} moved");
            }
            if name.contains(".gate.bias") {
                assert!(value.iter().all(|&v| v == 1.0), "{name} moved");
            }
        }
        // Backbone parity with a conditional model of the same config.
        let cond = condunet::init::<f32>(&model, 8).unwrap();
        let cond_names: Vec<_> = cond.backbone_names().iter().map(|s| s.to_string()).collect();
        let plain_names: Vec<_> = outcome
            .checkpoint
            .params
            .backbone_names()
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(cond_names, plain_names);
    }

    #[test]
    fn smoothing_reduces_noise_on_noisy_constant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let img = Array2::from_shape_fn((32, 32), |_| 1.0 + rng.random_range(-0.3_f32..0.3));
        let out = gaussian_filter(&img, 2.0).unwrap();
        let var = |a: &Array2<f32>| {
            let m = a.iter().map(|&v| f64::from(v)).sum::<f64>() / a.len() as f64;
            a.iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / a.len() as f64
        };
        assert!(var(&out) < 0.2 * var(&img));
    }
}

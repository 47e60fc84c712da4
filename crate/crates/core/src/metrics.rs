//! Reference-quality MSE, PSNR, and SSIM plus the per-level evaluation
//! grid.
//!
//! SSIM follows the standard Wang et al. configuration: 11x11 Gaussian
//! window with sigma 1.5, K1 = 0.01, K2 = 0.03, the two-term formula with
//! C3 = C2/2 folded in, averaged over valid (unpadded) window positions.
//! PSNR reports +infinity for identical images. Evaluation uses the
//! per-slice reference maximum as the data range and records that policy.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::condunet;
use crate::countsim::{CountLevel, ImageSlice};
use crate::error::{Error, Result};
use crate::trainer::LoadedDataset;

#[derive(Debug, Clone)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl SsimParams {
    pub fn new(data_range: f64) -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range,
        }
    }
}

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "mse shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    Ok((&a - &b).mapv(|d| d * d).sum() / n)
}

/// 10 log10(range^2 / MSE) in decibels; +infinity for identical images.
pub fn psnr(pred: ArrayView2<f64>, reference: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(Error::Config(format!(
            "data range {data_range} must be positive"
        )));
    }
    let err = mse(pred, reference)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / err).log10())
}

/// Unit-sum 2D Gaussian window.
fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let half = (size as isize - 1) / 2;
    let mut w = Array2::<f64>::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let dy = i as isize - half;
            let dx = j as isize - half;
            let r2 = (dy * dy + dx * dx) as f64;
            w[(i, j)] = (-r2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total = w.sum();
    w.mapv_inplace(|v| v / total);
    w
}

/// Mean SSIM over all valid window positions. Symmetric in its arguments.
pub fn ssim(pred: ArrayView2<f64>, reference: ArrayView2<f64>, params: &SsimParams) -> Result<f64> {
    if pred.dim() != reference.dim() {
        return Err(Error::Shape(format!(
            "ssim shapes differ: {:?} vs {:?}",
            pred.dim(),
            reference.dim()
        )));
    }
    let (h, w) = pred.dim();
    let win = params.window;
    if h < win || w < win {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than the {win}x{win} SSIM window"
        )));
    }
    if params.data_range.is_nan() || params.data_range <= 0.0 {
        return Err(Error::Config(format!(
            "data range {} must be positive",
            params.data_range
        )));
    }
    let kernel = gaussian_window(win, params.sigma);
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);

    let mut acc = 0.0;
    let mut n_windows = 0u64;
    for oy in 0..=(h - win) {
        for ox in 0..=(w - win) {
            let px = pred.slice(s![oy..oy + win, ox..ox + win]);
            let ry = reference.slice(s![oy..oy + win, ox..ox + win]);
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for i in 0..win {
                for j in 0..win {
                    let k = kernel[(i, j)];
                    let a = px[(i, j)];
                    let b = ry[(i, j)];
                    mu_x += k * a;
                    mu_y += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2);
            let den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2);
            acc += num / den;
            n_windows += 1;
        }
    }
    Ok(acc / n_windows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Original,
    Denoised,
    Gaussian,
    PlainUnet,
    Proposed,
}

impl Condition {
    pub fn label(&self) -> &'static str {
        match self {
            Condition::Original => "original",
            Condition::Denoised => "denoised",
            Condition::Gaussian => "gaussian",
            Condition::PlainUnet => "plain-unet",
            Condition::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn label(&self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR",
            Metric::Ssim => "SSIM",
        }
    }
}

pub const DATA_RANGE_POLICY: &str = "per-slice-reference-max";

/// One cell of the evaluation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRecord {
    pub level: CountLevel,
    pub condition: Condition,
    pub metric: Metric,
    pub value: f64,
    pub n_slices: usize,
    pub data_range_policy: String,
}

pub fn to_f64(slice: &ImageSlice) -> Array2<f64> {
    slice.intensity.mapv(f64::from)
}

/// Mean PSNR and SSIM of `pred` against the full-count reference,
/// data range = reference max.
pub fn score_pair(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<(f64, f64)> {
    let range = reference.iter().cloned().fold(f64::MIN, f64::max);
    if range.is_nan() || range <= 0.0 {
        return Err(Error::Numeric(
            "reference slice has nonpositive maximum; cannot set data range".to_string(),
        ));
    }
    let p = psnr(pred.view(), reference.view(), range)?;
    let s = ssim(pred.view(), reference.view(), &SsimParams::new(range))?;
    Ok((p, s))
}

/// Per-level records over the test split: (original level L vs full) and
/// (denoised L to full vs full), both metrics, averaged over slices.
pub fn evaluate_grid(
    checkpoint: &Checkpoint,
    data: &LoadedDataset,
    levels: &[CountLevel],
) -> Result<Vec<MetricRecord>> {
    if data.test_ids.is_empty() {
        return Err(Error::Config("test split is empty".to_string()));
    }
    let full = CountLevel::full();
    for &level in levels {
        if level >= full {
            return Err(Error::Constraint(format!(
                "grid levels must lie strictly below full, got {level}"
            )));
        }
    }
    let gated = checkpoint.kind == ModelKind::Conditional;
    let mut records = Vec::with_capacity(levels.len() * 4);
    for &level in levels {
        let mut sums = [0.0f64; 4]; // orig psnr, orig ssim, den psnr, den ssim
        for &id in &data.test_ids {
            let reference = to_f64(data.slice(id, full)?);
            let original = to_f64(data.slice(id, level)?);
            let denoised = condunet::denoise(
                &checkpoint.params,
                data.slice(id, level)?,
                level,
                full,
                &checkpoint.table,
                gated,
            )?;
            let denoised = to_f64(&denoised);
            let (po, so) = score_pair(&original, &reference)?;
            let (pd, sd) = score_pair(&denoised, &reference)?;
            sums[0] += po;
            sums[1] += so;
            sums[2] += pd;
            sums[3] += sd;
        }
        let n = data.test_ids.len();
        let mean = |x: f64| x / n as f64;
        for (condition, psnr_v, ssim_v) in [
            (Condition::Original, mean(sums[0]), mean(sums[1])),
            (Condition::Denoised, mean(sums[2]), mean(sums[3])),
        ] {
            records.push(MetricRecord {
                level,
                condition,
                metric: Metric::Psnr,
                value: psnr_v,
                n_slices: n,
                data_range_policy: DATA_RANGE_POLICY.to_string(),
            });
            records.push(MetricRecord {
                level,
                condition,
                metric: Metric::Ssim,
                value: ssim_v,
                n_slices: n,
                data_range_policy: DATA_RANGE_POLICY.to_string(),
            });
        }
    }
    Ok(records)
}

/// CSV with the schema: level_label, condition, metric, value, n_slices,
/// data_range_policy.
pub fn records_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("level_label,condition,metric,value,n_slices,data_range_policy\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.level.label(),
            r.condition.label(),
            r.metric.label(),
            r.value,
            r.n_slices,
            r.data_range_policy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct-formula PSNR, coded independently of `psnr`.
    pub fn psnr_oracle(a: &Array2<f64>, b: &Array2<f64>, range: f64) -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (x - y) * (x - y);
            n += 1.0;
        }
        let m = acc / n;
        if m == 0.0 {
            f64::INFINITY
        } else {
            20.0 * range.log10() - 10.0 * m.log10()
        }
    }

    /// Direct-formula windowed SSIM, coded independently of `ssim`:
    /// explicit weighted moments per window, no shared helpers.
    pub fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>, range: f64) -> f64 {
        let win = 11usize;
        let sigma = 1.5f64;
        let half = (win as f64 - 1.0) / 2.0;
        let mut weights = vec![vec![0.0; win]; win];
        let mut wsum = 0.0;
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                let dy = i as f64 - half;
                let dx = j as f64 - half;
                *w = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                wsum += *w;
            }
        }
        for row in weights.iter_mut() {
            for w in row.iter_mut() {
                *w /= wsum;
            }
        }
        let c1 = (0.01 * range) * (0.01 * range);
        let c2 = (0.03 * range) * (0.03 * range);
        let (h, w) = a.dim();
        let mut total = 0.0;
        let mut count = 0.0;
        for oy in 0..=(h - win) {
            for ox in 0..=(w - win) {
                let (mut ex, mut ey, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let k = weights[i][j];
                        let x = a[(oy + i, ox + j)];
                        let y = b[(oy + i, ox + j)];
                        ex += k * x;
                        ey += k * y;
                        exx += k * x * x;
                        eyy += k * y * y;
                        exy += k * x * y;
                    }
                }
                let sx = exx - ex * ex;
                let sy = eyy - ey * ey;
                let sxy = exy - ex * ey;
                total += ((2.0 * ex * ey + c1) * (2.0 * sxy + c2))
                    / ((ex * ex + ey * ey + c1) * (sx + sy + c2));
                count += 1.0;
            }
        }
        total / count
    }

    fn random_pair(seed: u64, side: usize) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((side, side), |_| rng.random_range(0.0..1.0));
        let b = Array2::from_shape_fn((side, side), |_| rng.random_range(0.0..1.0));
        (a, b)
    }

    #[test]
    fn psnr_examples() {
        let a = Array2::<f64>::from_elem((8, 8), 0.5);
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), f64::INFINITY);

        let b = a.mapv(|v| v + 0.1);
        let p = psnr(b.view(), a.view(), 1.0).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "got {p}");

        let c = Array2::<f64>::zeros((4, 4));
        assert!(psnr(c.view(), Array2::<f64>::zeros((3, 3)).view(), 1.0).is_err());
        assert!(psnr(c.view(), c.view(), 0.0).is_err());
    }

    #[test]
    fn psnr_matches_oracle_on_random_pairs() {
        for seed in 0..25 {
            let (a, b) = random_pair(seed, 16);
            let ours = psnr(a.view(), b.view(), 1.0).unwrap();
            let truth = psnr_oracle(&a, &b, 1.0);
            assert!(
                ((ours - truth) / truth).abs() < 1e-6,
                "seed {seed}: {ours} vs {truth}"
            );
        }
    }

    #[test]
    fn ssim_identical_images_score_one() {
        let (a, _) = random_pair(5, 16);
        let v = ssim(a.view(), a.view(), &SsimParams::new(1.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        let a = Array2::<f64>::from_elem((16, 16), 0.5);
        let b = Array2::<f64>::from_elem((16, 16), 0.25);
        let v = ssim(a.view(), b.view(), &SsimParams::new(1.0)).unwrap();
        // Luminance term only: (2*0.5*0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4).
        let expected = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        assert!(((v - expected) / expected).abs() < 1e-6, "{v} vs {expected}");
    }

    #[test]
    fn ssim_matches_oracle_on_random_pairs() {
        for seed in 100..120 {
            let (a, b) = random_pair(seed, 16);
            let ours = ssim(a.view(), b.view(), &SsimParams::new(1.0)).unwrap();
            let truth = ssim_oracle(&a, &b, 1.0);
            assert!(
                ((ours - truth) / truth).abs() < 1e-6,
                "seed {seed}: {ours} vs {truth}"
            );
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Array2::<f64>::zeros((8, 8));
        assert!(ssim(a.view(), a.view(), &SsimParams::new(1.0)).is_err());
    }

    fn tiny_eval_setup() -> (Checkpoint, crate::trainer::LoadedDataset) {
        use crate::countsim::registry;
        use crate::embedder::{embedding_table, EmbedderBackend, PromptTemplate};
        use crate::phantom::{generate_phantom, synthesize_full_count, PhantomSpec};
        use std::collections::BTreeMap;

        let cfg = crate::condunet::ModelConfig {
            depth: 2,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            conv_kernel: 3,
            blocks_per_level: 1,
            embedding_dim: 16,
            groups_for_norm: 2,
        };
        let params = crate::condunet::init::<f32>(&cfg, 3).unwrap();
        let backend = EmbedderBackend::DeterministicFallback { seed: 1, dim: 16 };
        let table = embedding_table(&backend, &registry(), &PromptTemplate::default()).unwrap();
        let ckpt = Checkpoint {
            kind: ModelKind::Conditional,
            params,
            optimizer: None,
            step: 0,
            rng_word_pos: 0,
            global_scale: 1.0,
            train_config: crate::trainer::TrainConfig::default(),
            table,
            config_snapshot: String::new(),
        };

        let mut slices = BTreeMap::new();
        let mut scale = 1.0;
        for pid in 0..2u64 {
            let spec = PhantomSpec {
                seed: pid,
                size: 16,
                n_background_ellipses: 2,
                n_lesions: 1,
                background_intensity_range: (0.5, 1.0),
                lesion_intensity_range: (1.0, 2.0),
                lesion_radius_range: (2.0, 3.0),
            };
            let act = generate_phantom(&spec).unwrap();
            let full = synthesize_full_count(&act, 200_000, pid + 10).unwrap();
            scale = crate::countsim::compute_global_scale(std::slice::from_ref(&full)).unwrap();
            let mut per_level = BTreeMap::new();
            for (i, level) in registry().into_iter().enumerate() {
                let img = crate::countsim::thin(&full, level, 50 + i as u64).unwrap();
                per_level.insert(level, crate::countsim::normalize(&img, scale).unwrap());
            }
            slices.insert(pid, per_level);
        }
        let data = crate::trainer::LoadedDataset {
            slices,
            train_ids: vec![0],
            test_ids: vec![1],
            global_scale: scale,
            size: 16,
        };
        (ckpt, data)
    }

    #[test]
    fn grid_has_twenty_records_and_rejects_full_level() {
        use crate::countsim::registry;
        let (ckpt, data) = tiny_eval_setup();
        let low: Vec<_> = registry().into_iter().filter(|l| !l.is_full()).collect();
        let records = evaluate_grid(&ckpt, &data, &low).unwrap();
        assert_eq!(records.len(), 20);
        for r in &records {
            assert_eq!(r.n_slices, 1);
            assert_eq!(r.data_range_policy, DATA_RANGE_POLICY);
            if r.metric == Metric::Ssim {
                assert!((-1.0..=1.0).contains(&r.value));
            }
        }
        let csv = records_to_csv(&records);
        assert_eq!(csv.lines().count(), 21);

        // The level == full path is disabled by the ordering constraint.
        let err = evaluate_grid(&ckpt, &data, &registry()).unwrap_err();
        assert!(matches!(err, Error::Constraint(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn ssim_is_symmetric_and_bounded(seed in 0u64..1000) {
            let (a, b) = random_pair(seed, 12);
            let p = SsimParams::new(1.0);
            let ab = ssim(a.view(), b.view(), &p).unwrap();
            let ba = ssim(b.view(), a.view(), &p).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_is_shift_invariant(seed in 0u64..1000, shift in -0.5f64..0.5) {
            let (a, b) = random_pair(seed, 12);
            let p0 = psnr(a.view(), b.view(), 1.0).unwrap();
            let a2 = a.mapv(|v| v + shift);
            let b2 = b.mapv(|v| v + shift);
            let p1 = psnr(a2.view(), b2.view(), 1.0).unwrap();
            prop_assert!((p0 - p1).abs() < 1e-9);
        }
    }
}

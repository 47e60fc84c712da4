//! CLI command implementations: simulate, train, denoise, evaluate,
//! report. Commands are deterministic given the config and seeds; outputs
//! embed a snapshot of the config text they were produced from.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::baselines;
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::condunet;
use crate::config::RunConfig;
use crate::countsim::{
    self, compute_global_scale, derive_seed, normalize, registry, CountImage, CountLevel,
    ImageSlice,
};
use crate::embedder::embedding_table;
use crate::error::{Error, Result};
use crate::metrics::{self, Condition, Metric, MetricRecord};
use crate::phantom::{generate_phantom, synthesize_full_count};
use crate::ptf;
use crate::report;
use crate::trainer::{
    self, load_dataset, split_dataset, DatasetManifest, ManifestSeeds, PairPolicy, PhantomEntry,
    Split,
};

pub struct Ctx {
    pub config: RunConfig,
    pub config_text: String,
    pub force: bool,
}

const POISSON_SALT: u64 = 0x706f_6973_736f_6e00; // "poisson"
const THIN_SALT: u64 = 0x7468_696e_0000_0000; // "thin"
const SPLIT_SALT: u64 = 0x7370_6c69_7400_0000; // "split"

const SNAPSHOT_FILE: &str = "config_snapshot.toml";

fn write_snapshot(dir: &Path, text: &str) -> Result<()> {
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|mut entries| entries.next().is_some())
        .unwrap_or(false)
}

/// Generate phantoms, their full-count realizations, and every thinned
/// level; split at phantom granularity; write PTF images and the manifest.
pub fn cmd_simulate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    let out = &cfg.simulate.out_dir;
    if out.exists() && dir_is_nonempty(out) && !ctx.force {
        return Err(Error::io(
            out.clone(),
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "output directory is not empty (pass --force to overwrite)",
            ),
        ));
    }
    if cfg.phantom.count < 2 {
        return Err(Error::Config(format!(
            "phantom.count {} cannot populate both splits",
            cfg.phantom.count
        )));
    }
    ensure_dir(&out.join("activity"))?;
    ensure_dir(&out.join("images"))?;

    let base = cfg.phantom.seed;
    let seeds = ManifestSeeds {
        base,
        phantom: base,
        poisson: base ^ POISSON_SALT,
        thin: base ^ THIN_SALT,
    };
    let ids: Vec<u64> = (0..cfg.phantom.count).collect();
    let split = split_dataset(&ids, cfg.simulate.train_fraction, base ^ SPLIT_SALT)?;
    let levels = registry();

    let mut entries = Vec::new();
    let mut train_fulls: Vec<CountImage> = Vec::new();
    for &pid in &ids {
        let spec = cfg.phantom_spec(derive_seed(seeds.phantom, pid));
        let activity = generate_phantom(&spec)?;
        let full = synthesize_full_count(
            &activity,
            cfg.simulate.total_expected_counts,
            derive_seed(seeds.poisson, pid),
        )?;

        let activity_rel = format!("activity/p{pid:04}.ptf");
        ptf::write_file(
            out.join(&activity_rel),
            &ptf::Tensor::F64(activity.values.clone().into_dyn()),
        )?;

        let img_dir = out.join(format!("images/p{pid:04}"));
        ensure_dir(&img_dir)?;
        let mut slices = std::collections::BTreeMap::new();
        for (idx, &level) in levels.iter().enumerate() {
            let thin_seed = derive_seed(seeds.thin, pid) ^ ((idx as u64) << 32);
            let img = countsim::thin(&full, level, thin_seed)?;
            let rel = format!("images/p{pid:04}/{}.ptf", level.file_label());
            ptf::write_file(out.join(&rel), &ptf::Tensor::U32(img.counts.into_dyn()))?;
            slices.insert(level, rel);
        }
        if split[&pid] == Split::Train {
            train_fulls.push(full);
        }
        entries.push(PhantomEntry {
            id: pid,
            split: split[&pid],
            activity: activity_rel,
            slices,
        });
    }

    let global_scale = compute_global_scale(&train_fulls)?;
    let manifest = DatasetManifest {
        size: cfg.phantom.size,
        total_expected_counts: cfg.simulate.total_expected_counts,
        levels,
        global_scale,
        seeds,
        phantoms: entries,
    };
    manifest.save(out)?;
    manifest.validate(out)?;
    write_snapshot(out, &ctx.config_text)?;

    let n_train = manifest.ids_in(Split::Train).len();
    let n_test = manifest.ids_in(Split::Test).len();
    println!(
        "simulate: {} phantoms ({} train / {} test), {} levels, global_scale {:.3} -> {}",
        cfg.phantom.count,
        n_train,
        n_test,
        manifest.levels.len(),
        global_scale,
        out.display()
    );
    Ok(())
}

/// Train the conditional model, or the fixed-pair plain U-Net baseline
/// with `plain = true`. `resume` continues from a saved checkpoint.
pub fn cmd_train(ctx: &Ctx, plain: bool, resume: Option<&Path>) -> Result<()> {
    let cfg = &ctx.config;
    let dataset_dir = cfg.dataset_dir();
    let manifest = DatasetManifest::load(&dataset_dir)?;
    manifest.validate(&dataset_dir)?;
    let data = load_dataset(&dataset_dir, &manifest)?;

    let backend = cfg.embedder_backend()?;
    let template = cfg.prompt_template()?;
    let train_config = cfg.train_config()?;
    let table = embedding_table(&backend, &train_config.levels, &template)?;
    let model_config = cfg.model_config();

    let out_dir = if plain {
        cfg.train.out_dir.join("plain")
    } else {
        cfg.train.out_dir.clone()
    };
    ensure_dir(&out_dir)?;

    let resume_ckpt = match resume {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };

    let outcome = if plain {
        if resume_ckpt.is_some() {
            return Err(Error::Config(
                "resume is only wired for the conditional model".to_string(),
            ));
        }
        baselines::train_plain_unet(
            &data,
            &model_config,
            &train_config,
            &table,
            Some(&out_dir),
            &ctx.config_text,
        )?
    } else {
        let policy = PairPolicy::from_levels(&train_config.levels)?;
        trainer::train(
            &data,
            &model_config,
            &train_config,
            &table,
            ModelKind::Conditional,
            &policy,
            resume_ckpt,
            Some(&out_dir),
            &ctx.config_text,
        )?
    };

    let final_dir = out_dir.join("final");
    outcome.checkpoint.save(&final_dir)?;
    trainer::write_log_csv(&out_dir.join("log.csv"), &outcome.log)?;
    write_snapshot(&out_dir, &ctx.config_text)?;

    let last = outcome.log.last();
    println!(
        "train{}: {} steps, final loss {} -> {}",
        if plain { " (plain-unet)" } else { "" },
        outcome.checkpoint.step,
        last.map(|r| r.loss.to_string()).unwrap_or_else(|| "n/a".to_string()),
        final_dir.display()
    );
    Ok(())
}

fn load_slice_file(path: &Path, level: CountLevel, global_scale: f64) -> Result<ImageSlice> {
    match ptf::read_file(path)? {
        t @ ptf::Tensor::U32(_) => {
            let counts = t.into_u32_2d()?;
            normalize(
                &CountImage {
                    counts,
                    level,
                    source_id: 0,
                },
                global_scale,
            )
        }
        t @ ptf::Tensor::F32(_) => Ok(ImageSlice {
            intensity: t.into_f32_2d()?,
            level,
            scale: global_scale,
        }),
        other => Err(Error::Shape(format!(
            "{}: expected u32 counts or f32 intensities, found {:?}",
            path.display(),
            other.dtype()
        ))),
    }
}

/// Denoise one PTF slice from `level_in` to `level_out`. Prints PSNR/SSIM
/// when a full-count reference is supplied.
pub fn cmd_denoise(
    checkpoint: &Path,
    input: &Path,
    level_in: &str,
    level_out: &str,
    output: &Path,
    reference: Option<&Path>,
) -> Result<()> {
    let level_in = CountLevel::parse(level_in)?;
    let level_out = CountLevel::parse(level_out)?;
    if level_in >= level_out {
        return Err(Error::Constraint(format!(
            "output count level {level_out} must exceed input level {level_in}"
        )));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let slice = load_slice_file(input, level_in, ckpt.global_scale)?;
    let gated = ckpt.kind == ModelKind::Conditional;
    let denoised = condunet::denoise(&ckpt.params, &slice, level_in, level_out, &ckpt.table, gated)?;
    ptf::write_file(
        output,
        &ptf::Tensor::F32(denoised.intensity.clone().into_dyn()),
    )?;
    println!(
        "denoise: {} [{}] -> [{}] {}",
        input.display(),
        level_in,
        level_out,
        output.display()
    );
    if let Some(ref_path) = reference {
        let reference = load_slice_file(ref_path, CountLevel::full(), ckpt.global_scale)?;
        let ref64 = metrics::to_f64(&reference);
        let (p, s) = metrics::score_pair(&metrics::to_f64(&denoised), &ref64)?;
        let (p0, s0) = metrics::score_pair(&metrics::to_f64(&slice), &ref64)?;
        println!("  PSNR {p:.3} dB (input {p0:.3}), SSIM {s:.4} (input {s0:.4})");
    }
    Ok(())
}

fn push_comparison(
    records: &mut Vec<MetricRecord>,
    level: CountLevel,
    condition: Condition,
    psnr: f64,
    ssim: f64,
    n: usize,
) {
    for (metric, value) in [(Metric::Psnr, psnr), (Metric::Ssim, ssim)] {
        records.push(MetricRecord {
            level,
            condition,
            metric,
            value,
            n_slices: n,
            data_range_policy: metrics::DATA_RANGE_POLICY.to_string(),
        });
    }
}

/// Evaluate the grid over the test split and assemble the 1/100 -> full
/// comparison rows; dump sample slices for the report montage.
pub fn cmd_evaluate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    let dataset_dir = cfg.dataset_dir();
    let manifest = DatasetManifest::load(&dataset_dir)?;
    let data = load_dataset(&dataset_dir, &manifest)?;
    let ckpt = Checkpoint::load(&cfg.checkpoint_path())?;

    let low_levels: Vec<CountLevel> = registry().into_iter().filter(|l| !l.is_full()).collect();
    let records = metrics::evaluate_grid(&ckpt, &data, &low_levels)?;

    let out = &cfg.evaluate.out_dir;
    ensure_dir(out)?;
    report::write_string(&out.join("metrics.csv"), &metrics::records_to_csv(&records))?;

    // Original PSNR should rise with the count level on simulated data.
    let original_psnr: Vec<f64> = low_levels
        .iter()
        .map(|&l| {
            records
                .iter()
                .find(|r| r.level == l && r.condition == Condition::Original && r.metric == Metric::Psnr)
                .map(|r| r.value)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let monotone = original_psnr.windows(2).all(|w| w[1] >= w[0]);
    println!(
        "evaluate: original PSNR by level {:?} -> monotone {}",
        original_psnr
            .iter()
            .map(|v| (v * 100.0).round() / 100.0)
            .collect::<Vec<_>>(),
        if monotone { "PASS" } else { "WARN" }
    );

    // Comparison on the hardest task.
    let hundredth = CountLevel::new(1, 100)?;
    let mut comparison: Vec<MetricRecord> = Vec::new();
    let pick = |cond: Condition, metric: Metric| {
        records
            .iter()
            .find(|r| r.level == hundredth && r.condition == cond && r.metric == metric)
            .map(|r| r.value)
            .expect("grid covers 1/100")
    };
    let n = data.test_ids.len();
    push_comparison(
        &mut comparison,
        hundredth,
        Condition::Original,
        pick(Condition::Original, Metric::Psnr),
        pick(Condition::Original, Metric::Ssim),
        n,
    );
    let (best_sigma, g_psnr, g_ssim) =
        baselines::best_sigma_gaussian(&data, hundredth, &cfg.evaluate.gaussian_sigmas)?;
    push_comparison(&mut comparison, hundredth, Condition::Gaussian, g_psnr, g_ssim, n);
    if cfg.evaluate.include_baselines {
        let plain = Checkpoint::load(&cfg.plain_checkpoint_path())?;
        if !baselines::backbone_matches(&ckpt, &plain) {
            return Err(Error::Config(
                "plain U-Net checkpoint backbone differs from the conditional model".to_string(),
            ));
        }
        let plain_records = metrics::evaluate_grid(&plain, &data, &[hundredth])?;
        let pv = |metric: Metric| {
            plain_records
                .iter()
                .find(|r| r.condition == Condition::Denoised && r.metric == metric)
                .map(|r| r.value)
                .expect("restricted grid covers 1/100")
        };
        push_comparison(
            &mut comparison,
            hundredth,
            Condition::PlainUnet,
            pv(Metric::Psnr),
            pv(Metric::Ssim),
            n,
        );
    }
    push_comparison(
        &mut comparison,
        hundredth,
        Condition::Proposed,
        pick(Condition::Denoised, Metric::Psnr),
        pick(Condition::Denoised, Metric::Ssim),
        n,
    );
    report::write_string(
        &out.join("comparison.csv"),
        &metrics::records_to_csv(&comparison),
    )?;
    let sigma_path = out.join("gaussian_sigma.txt");
    report::write_string(&sigma_path, &format!("{best_sigma}\n"))?;

    // Sample images for the montage: first test phantom.
    let sample_id = data.test_ids[0];
    let img_dir = out.join("images");
    ensure_dir(&img_dir)?;
    let full = CountLevel::full();
    let write_slice = |path: PathBuf, slice: &Array2<f32>| -> Result<()> {
        ptf::write_file(path, &ptf::Tensor::F32(slice.clone().into_dyn()))
    };
    write_slice(
        img_dir.join("reference_full.ptf"),
        &data.slice(sample_id, full)?.intensity,
    )?;
    let gated = ckpt.kind == ModelKind::Conditional;
    for &level in &low_levels {
        let original = data.slice(sample_id, level)?;
        write_slice(
            img_dir.join(format!("original_{}.ptf", level.file_label())),
            &original.intensity,
        )?;
        let denoised = condunet::denoise(&ckpt.params, original, level, full, &ckpt.table, gated)?;
        write_slice(
            img_dir.join(format!("denoised_{}.ptf", level.file_label())),
            &denoised.intensity,
        )?;
    }
    write_snapshot(out, &ctx.config_text)?;

    println!(
        "evaluate: {} grid records, {} comparison rows (gaussian sigma {best_sigma}) -> {}",
        records.len(),
        comparison.len(),
        out.display()
    );
    Ok(())
}

/// Render the montage PNG, the bar-chart CSV, and the comparison table
/// from evaluate outputs.
pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    let eval_dir = cfg.eval_dir();
    let out = &cfg.report.out_dir;

    let mut missing = Vec::new();
    let metrics_path = eval_dir.join("metrics.csv");
    let comparison_path = eval_dir.join("comparison.csv");
    let images_dir = eval_dir.join("images");
    for path in [&metrics_path, &comparison_path, &images_dir] {
        if !path.exists() {
            missing.push(path.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::io(
            missing.join(", "),
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "evaluate outputs missing; run `petcond evaluate` first",
            ),
        ));
    }

    let metrics_text =
        fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let rows = report::parse_metrics_csv(&metrics_text)?;
    let mut levels: Vec<String> = Vec::new();
    for r in &rows {
        if !levels.contains(&r.level) {
            levels.push(r.level.clone());
        }
    }
    if levels.is_empty() {
        return Err(Error::Config(format!(
            "{} lists no levels",
            metrics_path.display()
        )));
    }

    ensure_dir(out)?;

    let read_img = |name: String| -> Result<Array2<f32>> {
        ptf::read_file(images_dir.join(name))?.into_f32_2d()
    };
    let reference = read_img("reference_full.ptf".to_string())?;
    let mut originals = Vec::new();
    let mut denoised = Vec::new();
    for label in &levels {
        let file = label.replace('/', "_");
        originals.push(read_img(format!("original_{file}.ptf"))?);
        denoised.push(read_img(format!("denoised_{file}.ptf"))?);
    }
    let montage = report::render_montage(&reference, &originals, &denoised)?;
    let montage_path = out.join("montage.png");
    montage
        .save(&montage_path)
        .map_err(|e| Error::Config(format!("{}: {e}", montage_path.display())))?;

    report::write_string(&out.join("fig3_bars.csv"), &report::fig3_bars_csv(&rows)?)?;

    let comparison_text =
        fs::read_to_string(&comparison_path).map_err(|e| Error::io(&comparison_path, e))?;
    let comparison_rows = report::parse_metrics_csv(&comparison_text)?;
    let sigma = fs::read_to_string(eval_dir.join("gaussian_sigma.txt"))
        .ok()
        .and_then(|s| s.trim().parse::<f64>().ok());
    report::write_string(
        &out.join("comparison_table.csv"),
        &report::comparison_table_csv(&comparison_rows, sigma)?,
    )?;
    write_snapshot(out, &ctx.config_text)?;

    println!(
        "report: montage ({} levels), fig3_bars.csv, comparison_table.csv -> {}",
        levels.len(),
        out.display()
    );
    Ok(())
}

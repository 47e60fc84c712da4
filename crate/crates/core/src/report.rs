//! Report rendering: the two-row per-level montage, the per-level grouped
//! bar-chart CSV, and the 1/100 -> full comparison table.

use std::collections::BTreeMap;
use std::path::Path;

use image::GrayImage;
use ndarray::Array2;

use crate::error::{Error, Result};

/// Pixel gap between montage tiles.
pub const MONTAGE_GAP: u32 = 2;

/// Two-row montage: row 0 holds the full-count reference followed by the
/// original slice at each level; row 1 repeats the reference and shows the
/// denoised output per level. One shared display window [0, reference max].
pub fn render_montage(
    reference: &Array2<f32>,
    originals: &[Array2<f32>],
    denoised: &[Array2<f32>],
) -> Result<GrayImage> {
    if originals.len() != denoised.len() || originals.is_empty() {
        return Err(Error::Config(format!(
            "montage needs matching nonempty original/denoised lists, got {} and {}",
            originals.len(),
            denoised.len()
        )));
    }
    let (h, w) = reference.dim();
    for img in originals.iter().chain(denoised.iter()) {
        if img.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "montage tile {:?} does not match reference {:?}",
                img.dim(),
                reference.dim()
            )));
        }
    }
    let window_max = reference.iter().cloned().fold(f32::MIN, f32::max).max(f32::MIN_POSITIVE);
    let cols = 1 + originals.len();
    let tile_w = w as u32;
    let tile_h = h as u32;
    let total_w = cols as u32 * tile_w + (cols as u32 - 1) * MONTAGE_GAP;
    let total_h = 2 * tile_h + MONTAGE_GAP;
    let mut canvas = GrayImage::from_pixel(total_w, total_h, image::Luma([255u8]));

    let mut blit = |col: usize, row: usize, img: &Array2<f32>| {
        let x0 = col as u32 * (tile_w + MONTAGE_GAP);
        let y0 = row as u32 * (tile_h + MONTAGE_GAP);
        for y in 0..tile_h {
            for x in 0..tile_w {
                let v = img[(y as usize, x as usize)] / window_max;
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                canvas.put_pixel(x0 + x, y0 + y, image::Luma([g]));
            }
        }
    };

    blit(0, 0, reference);
    blit(0, 1, reference);
    for (i, img) in originals.iter().enumerate() {
        blit(i + 1, 0, img);
    }
    for (i, img) in denoised.iter().enumerate() {
        blit(i + 1, 1, img);
    }
    Ok(canvas)
}

/// Expected montage pixel dimensions for a given tile size and level count.
pub fn montage_dims(tile: usize, n_levels: usize) -> (u32, u32) {
    let cols = (1 + n_levels) as u32;
    (
        cols * tile as u32 + (cols - 1) * MONTAGE_GAP,
        2 * tile as u32 + MONTAGE_GAP,
    )
}

/// One parsed row of the metric CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub level: String,
    pub condition: String,
    pub metric: String,
    pub value: f64,
    pub n_slices: u64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 {
            return Err(Error::Config(format!(
                "metrics CSV line {} has {} fields, expected at least 5",
                i + 1,
                fields.len()
            )));
        }
        rows.push(CsvRow {
            level: fields[0].to_string(),
            condition: fields[1].to_string(),
            metric: fields[2].to_string(),
            value: fields[3]
                .parse()
                .map_err(|e| Error::Config(format!("metrics CSV line {}: {e}", i + 1)))?,
            n_slices: fields[4]
                .parse()
                .map_err(|e| Error::Config(format!("metrics CSV line {}: {e}", i + 1)))?,
        });
    }
    Ok(rows)
}

/// Regroup grid records into plot-ready rows:
/// level,metric,original,denoised.
pub fn fig3_bars_csv(rows: &[CsvRow]) -> Result<String> {
    let mut grouped: BTreeMap<(String, String), (Option<f64>, Option<f64>)> = BTreeMap::new();
    let mut level_order: Vec<String> = Vec::new();
    for row in rows {
        if !level_order.contains(&row.level) {
            level_order.push(row.level.clone());
        }
        let entry = grouped
            .entry((row.level.clone(), row.metric.clone()))
            .or_default();
        match row.condition.as_str() {
            "original" => entry.0 = Some(row.value),
            "denoised" => entry.1 = Some(row.value),
            _ => {}
        }
    }
    let mut out = String::from("level,metric,original,denoised\n");
    for level in &level_order {
        for metric in ["PSNR", "SSIM"] {
            if let Some((orig, den)) = grouped.get(&(level.clone(), metric.to_string())) {
                let orig = orig.ok_or_else(|| {
                    Error::Config(format!("missing original {metric} for level {level}"))
                })?;
                let den = den.ok_or_else(|| {
                    Error::Config(format!("missing denoised {metric} for level {level}"))
                })?;
                out.push_str(&format!("{level},{metric},{orig},{den}\n"));
            }
        }
    }
    Ok(out)
}

pub const CYCLEGAN_NOTE: &str =
    "CycleGAN baseline not implemented; a best-sigma Gaussian smoothing comparator is reported instead";

/// Comparison table rows for the 1/100 -> full task, one method per line,
/// with the CycleGAN substitution recorded in the table itself.
pub fn comparison_table_csv(rows: &[CsvRow], gaussian_sigma: Option<f64>) -> Result<String> {
    let value_of = |condition: &str, metric: &str| -> Option<f64> {
        rows.iter()
            .find(|r| r.condition == condition && r.metric == metric)
            .map(|r| r.value)
    };
    let mut out = String::from("method,psnr,ssim,note\n");
    for method in ["original", "gaussian", "plain-unet", "proposed"] {
        let p = value_of(method, "PSNR");
        let s = value_of(method, "SSIM");
        match (p, s) {
            (Some(p), Some(s)) => {
                let note = match method {
                    "gaussian" => gaussian_sigma
                        .map(|g| format!("best sigma = {g}"))
                        .unwrap_or_default(),
                    _ => String::new(),
                };
                out.push_str(&format!("{method},{p},{s},{note}\n"));
            }
            _ => {
                return Err(Error::Config(format!(
                    "comparison CSV lacks {method} rows"
                )))
            }
        }
    }
    out.push_str(&format!("cyclegan,,,{CYCLEGAN_NOTE}\n"));
    Ok(out)
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn montage_layout_matches_contract() {
        let r = Array2::<f32>::from_elem((16, 16), 1.0);
        let levels: Vec<Array2<f32>> = (0..5)
            .map(|i| Array2::from_elem((16, 16), 0.1 * (i + 1) as f32))
            .collect();
        let png = render_montage(&r, &levels, &levels).unwrap();
        let (w, h) = montage_dims(16, 5);
        assert_eq!((png.width(), png.height()), (w, h));

        // Reference tile maps to the top of the display window.
        assert_eq!(png.get_pixel(0, 0).0[0], 255);
        // Separator pixels stay white.
        assert_eq!(png.get_pixel(16, 0).0[0], 255);
    }

    #[test]
    fn montage_rejects_mismatched_tiles() {
        let r = Array2::<f32>::ones((16, 16));
        let bad = vec![Array2::<f32>::ones((8, 8))];
        let good = vec![Array2::<f32>::ones((16, 16))];
        assert!(render_montage(&r, &bad, &good).is_err());
        assert!(render_montage(&r, &[], &[]).is_err());
    }

    #[test]
    fn csv_roundtrip_and_fig3_grouping() {
        let text = "level_label,condition,metric,value,n_slices,data_range_policy\n\
                    1/100,original,PSNR,20.5,4,per-slice-reference-max\n\
                    1/100,denoised,PSNR,28.1,4,per-slice-reference-max\n\
                    1/100,original,SSIM,0.5,4,per-slice-reference-max\n\
                    1/100,denoised,SSIM,0.9,4,per-slice-reference-max\n";
        let rows = parse_metrics_csv(text).unwrap();
        assert_eq!(rows.len(), 4);
        let bars = fig3_bars_csv(&rows).unwrap();
        assert!(bars.contains("1/100,PSNR,20.5,28.1"));
        assert!(bars.contains("1/100,SSIM,0.5,0.9"));
    }

    #[test]
    fn comparison_table_includes_substitution_note() {
        let text = "level_label,condition,metric,value,n_slices,data_range_policy\n\
                    1/100,original,PSNR,20.0,4,per-slice-reference-max\n\
                    1/100,original,SSIM,0.5,4,per-slice-reference-max\n\
                    1/100,gaussian,PSNR,24.0,4,per-slice-reference-max\n\
                    1/100,gaussian,SSIM,0.8,4,per-slice-reference-max\n\
                    1/100,plain-unet,PSNR,27.0,4,per-slice-reference-max\n\
                    1/100,plain-unet,SSIM,0.85,4,per-slice-reference-max\n\
                    1/100,proposed,PSNR,27.5,4,per-slice-reference-max\n\
                    1/100,proposed,SSIM,0.9,4,per-slice-reference-max\n";
        let rows = parse_metrics_csv(text).unwrap();
        let table = comparison_table_csv(&rows, Some(1.5)).unwrap();
        assert!(table.contains("cyclegan,,,"));
        assert!(table.contains(CYCLEGAN_NOTE));
        assert!(table.contains("best sigma = 1.5"));
        assert!(table.contains("proposed,27.5,0.9"));

        let incomplete = parse_metrics_csv(
            "level_label,condition,metric,value,n_slices,data_range_policy\n\
             1/100,original,PSNR,20.0,4,x\n",
        )
        .unwrap();
        assert!(comparison_table_csv(&incomplete, None).is_err());
    }
}

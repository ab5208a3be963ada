//! Image-quality metrics (PSNR alongside the SSIM of [`crate::ssim`]),
//! absolute-error maps with slice export, and evaluation record
//! aggregation.

use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::volume::VolumeImage;
use crate::{Error, Result};

/// Peak signal-to-noise ratio; identical inputs are flagged infinite
/// rather than crashing the evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsnrValue {
    pub db: f64,
    pub infinite: bool,
}

pub fn psnr(x: &Array3<f64>, y: &Array3<f64>, data_range: f64) -> Result<PsnrValue> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch(format!("psnr operands {:?} vs {:?}", x.dim(), y.dim())));
    }
    let mse = (x - y).mapv(|d| d * d).sum() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PsnrValue { db: f64::INFINITY, infinite: true });
    }
    Ok(PsnrValue { db: 10.0 * (data_range * data_range / mse).log10(), infinite: false })
}

/// Voxelwise |sr - hr|.
pub fn error_map(sr: &VolumeImage, hr: &VolumeImage) -> Result<VolumeImage> {
    if sr.shape() != hr.shape() {
        return Err(Error::ShapeMismatch(format!(
            "error map operands {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    Ok(VolumeImage {
        data: (&sr.data - &hr.data).mapv(f64::abs),
        spacing: hr.spacing,
        axis_labels: hr.axis_labels,
        intensity_range: hr.intensity_range,
    })
}

/// Export each axial slice of an error map as an 8-bit grayscale PNG
/// with a fixed color scale; the scale is recorded in the filename.
pub fn export_error_map_slices(
    map: &VolumeImage,
    dir: &Path,
    prefix: &str,
    vmax: f64,
) -> Result<Vec<PathBuf>> {
    if !(vmax > 0.0) {
        return Err(Error::Config(format!("error-map scale vmax = {vmax} must be positive")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (nx, ny, nz) = map.shape();
    let mut out = Vec::with_capacity(nz);
    for z in 0..nz {
        let mut img = image::GrayImage::new(nx as u32, ny as u32);
        for x in 0..nx {
            for y in 0..ny {
                let v = (map.data[[x, y, z]] / vmax).clamp(0.0, 1.0);
                img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
            }
        }
        let path = dir.join(format!("{prefix}_z{z:03}_vmax{vmax:.3}.png"));
        img.save(&path)
            .map_err(|e| Error::Format { path: path.clone(), reason: e.to_string() })?;
        out.push(path);
    }
    Ok(out)
}

/// One volume evaluated by one method.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub volume_id: String,
    pub method: String,
    pub ssim: f64,
    pub psnr: PsnrValue,
}

/// Per-method mean and standard deviation over volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub method: String,
    pub n: usize,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate records per method, preserving first-seen method order.
/// Infinite PSNR rows are excluded from the PSNR mean (and noted by the
/// caller via the per-record flag).
pub fn summarize(records: &[EvalRecord]) -> Vec<EvalSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let rows: Vec<&EvalRecord> = records.iter().filter(|r| r.method == method).collect();
            let ssims: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
            let psnrs: Vec<f64> =
                rows.iter().filter(|r| !r.psnr.infinite).map(|r| r.psnr.db).collect();
            let (ssim_mean, ssim_std) = mean_std(&ssims);
            let (psnr_mean, psnr_std) =
                if psnrs.is_empty() { (f64::INFINITY, 0.0) } else { mean_std(&psnrs) };
            EvalSummary { method: method.to_string(), n: rows.len(), ssim_mean, ssim_std, psnr_mean, psnr_std }
        })
        .collect()
}

/// Metrics CSV: one row per (method, volume).
pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut out = String::from("method,volume_id,ssim,psnr,psnr_infinite\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{}\n",
            r.method,
            r.volume_id,
            r.ssim,
            if r.psnr.infinite { f64::NAN } else { r.psnr.db },
            r.psnr.infinite
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(summaries: &[EvalSummary], path: &Path) -> Result<()> {
    let mut out = String::from("method,n,ssim_mean,ssim_std,psnr_mean,psnr_std\n");
    for s in summaries {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{:.9}\n",
            s.method, s.n, s.ssim_mean, s.ssim_std, s.psnr_mean, s.psnr_std
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::tempdir;

    #[test]
    fn psnr_closed_forms() {
        let x = Array3::zeros((10, 10, 1));
        // MSE 0.01 -> 20 dB.
        let y = Array3::from_elem((10, 10, 1), 0.1);
        let p = psnr(&x, &y, 1.0).unwrap();
        assert!((p.db - 20.0).abs() < 1e-12);
        // MSE 1e-4 -> 40 dB.
        let y = Array3::from_elem((10, 10, 1), 0.01);
        let p = psnr(&x, &y, 1.0).unwrap();
        assert!((p.db - 40.0).abs() < 1e-9);
        // Identical inputs -> infinite flag.
        let p = psnr(&x, &x, 1.0).unwrap();
        assert!(p.infinite);
    }

    #[test]
    fn psnr_monotone_in_noise() {
        let x = Array3::from_shape_fn((8, 8, 2), |(i, j, k)| (i + j + k) as f64 / 20.0);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let y = &x + amp;
            let p = psnr(&x, &y, 1.0).unwrap().db;
            assert!(p < last, "psnr must fall as noise grows");
            last = p;
        }
    }

    #[test]
    fn error_map_values() {
        let a = VolumeImage::new(Array3::from_elem((4, 4, 2), 0.5));
        let b = VolumeImage::new(Array3::from_elem((4, 4, 2), 0.4));
        let m = error_map(&a, &b).unwrap();
        assert!(m.data.iter().all(|&v| (v - 0.1).abs() < 1e-12));
        let zero = error_map(&a, &a).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slice_export_deterministic() {
        let dir = tempdir().unwrap();
        let m = VolumeImage::new(Array3::from_shape_fn((6, 5, 2), |(i, j, k)| {
            (i as f64 * 0.05 + j as f64 * 0.01 + k as f64 * 0.2).min(1.0)
        }));
        let a = export_error_map_slices(&m, &dir.path().join("a"), "err", 0.5).unwrap();
        let b = export_error_map_slices(&m, &dir.path().join("b"), "err", 0.5).unwrap();
        assert_eq!(a.len(), 2);
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
        assert!(a[0].to_str().unwrap().contains("vmax0.500"));
    }

    #[test]
    fn summary_reproducible_from_rows() {
        let records = vec![
            EvalRecord { volume_id: "a".into(), method: "udean".into(), ssim: 0.9, psnr: PsnrValue { db: 30.0, infinite: false } },
            EvalRecord { volume_id: "b".into(), method: "udean".into(), ssim: 0.8, psnr: PsnrValue { db: 32.0, infinite: false } },
            EvalRecord { volume_id: "a".into(), method: "tricubic".into(), ssim: 0.7, psnr: PsnrValue { db: 28.0, infinite: false } },
        ];
        let summaries = summarize(&records);
        assert_eq!(summaries.len(), 2);
        let u = &summaries[0];
        assert_eq!(u.method, "udean");
        assert!((u.ssim_mean - 0.85).abs() < 1e-12);
        assert!((u.ssim_std - 0.05).abs() < 1e-12);
        assert!((u.psnr_mean - 31.0).abs() < 1e-12);
        // A single-volume method has zero std.
        let t = &summaries[1];
        assert_eq!(t.n, 1);
        assert_eq!(t.ssim_std, 0.0);
    }
}

//! Run reporting: loss-curve and validation-metric plots rendered as
//! PNG files, plus a plain-text summary. Works on partial runs and marks
//! them incomplete instead of failing.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::{Error, Result};

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 400;
const MARGIN: u32 = 40;

const SERIES_COLORS: [[u8; 3]; 6] = [
    [196, 30, 58],
    [0, 90, 181],
    [0, 140, 60],
    [230, 120, 0],
    [120, 60, 160],
    [90, 90, 90],
];

/// Tiny 3x5 glyphs for axis labels.
fn glyph(c: char) -> Option<[u8; 5]> {
    // Each byte is one row, low 3 bits used.
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        'e' => [0b000, 0b111, 0b110, 0b100, 0b111],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..3 {
                    if bits & (0b100 >> rx) != 0 {
                        let px = cx + rx;
                        let py = y + ry as u32;
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb([20, 20, 20]));
                        }
                    }
                }
            }
        }
        cx += 4;
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn short(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        format!("{v:.3}")
    } else {
        format!("{v:.1e}")
    }
}

/// Render named series as polylines over a shared axis box. Each series
/// is a list of (x, y) points.
pub fn line_plot(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::Numeric("nothing to plot".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() || !y0.is_finite() {
        return Err(Error::Numeric("no finite points to plot".into()));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let to_px = |x: f64, y: f64| {
        let fx = (x - x0) / (x1 - x0);
        let fy = (y - y0) / (y1 - y0);
        (
            MARGIN as f64 + fx * (PLOT_W - 2 * MARGIN) as f64,
            (PLOT_H - MARGIN) as f64 - fy * (PLOT_H - 2 * MARGIN) as f64,
        )
    };

    // Axis box.
    let box_color = [0, 0, 0];
    draw_line(&mut img, to_px(x0, y0), to_px(x1, y0), box_color);
    draw_line(&mut img, to_px(x0, y0), to_px(x0, y1), box_color);
    draw_line(&mut img, to_px(x1, y0), to_px(x1, y1), box_color);
    draw_line(&mut img, to_px(x0, y1), to_px(x1, y1), box_color);

    for (si, (_, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for pair in pts.windows(2) {
            if pair[0].1.is_finite() && pair[1].1.is_finite() {
                draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), color);
            }
        }
        // Legend swatch.
        let ly = 6 + 8 * si as u32;
        for dx in 0..12u32 {
            img.put_pixel(MARGIN + dx, ly, Rgb(color));
        }
        draw_text(&mut img, MARGIN + 16 + 40 * si as u32, ly.saturating_sub(2), &format!("{si}"));
    }

    draw_text(&mut img, 2, PLOT_H - MARGIN, &short(y0));
    draw_text(&mut img, 2, MARGIN, &short(y1));
    draw_text(&mut img, MARGIN, PLOT_H - MARGIN + 8, &short(x0));
    draw_text(&mut img, PLOT_W - MARGIN - 20, PLOT_H - MARGIN + 8, &short(x1));

    img.save(path)
        .map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

/// Parsed rows of a numeric CSV with a header line.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> =
        lines.next().unwrap_or_default().split(',').map(|s| s.to_string()).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    Ok((header, rows))
}

/// Emit loss/metric plots and a text summary for a run directory.
/// Missing artifacts downgrade the report to `status: incomplete`.
pub fn write_report(run_dir: &Path) -> Result<PathBuf> {
    let figures = run_dir.join("figures");
    std::fs::create_dir_all(&figures).map_err(|e| Error::io(&figures, e))?;
    let mut summary = String::new();
    let mut incomplete = Vec::new();

    let loss_csv = run_dir.join("logs/train_log.csv");
    if loss_csv.exists() {
        let (header, rows) = read_csv(&loss_csv)?;
        let col = |name: &str| header.iter().position(|h| h == name);
        let mut series = Vec::new();
        for name in ["total", "i_cyc", "lr_con", "hr_con"] {
            if let Some(ci) = col(name) {
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter_map(|r| {
                        let x: f64 = r.first()?.parse().ok()?;
                        let y: f64 = r.get(ci)?.parse().ok()?;
                        Some((x, y))
                    })
                    .collect();
                if !pts.is_empty() {
                    series.push((name.to_string(), pts));
                }
            }
        }
        if !series.is_empty() {
            line_plot(&series, &figures.join("loss_curves.png"))?;
            summary.push_str(&format!("iterations logged: {}\n", rows.len()));
            if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
                let t = col("total").unwrap_or(8);
                summary.push_str(&format!(
                    "generator total: first {} last {}\n",
                    first.get(t).cloned().unwrap_or_default(),
                    last.get(t).cloned().unwrap_or_default()
                ));
            }
        }
    } else {
        incomplete.push("logs/train_log.csv");
    }

    let val_csv = run_dir.join("logs/validation.csv");
    if val_csv.exists() {
        let (header, rows) = read_csv(&val_csv)?;
        let ssim_col = header.iter().position(|h| h == "ssim_mean").unwrap_or(1);
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| {
                Some((r.first()?.parse().ok()?, r.get(ssim_col)?.parse().ok()?))
            })
            .collect();
        if !pts.is_empty() {
            line_plot(&[("ssim_mean".to_string(), pts.clone())], &figures.join("validation_ssim.png"))?;
            let best = pts.iter().cloned().fold((0.0, f64::NEG_INFINITY), |m, p| {
                if p.1 > m.1 {
                    p
                } else {
                    m
                }
            });
            summary.push_str(&format!("best validation ssim {:.6} at epoch {}\n", best.1, best.0));
        }
    } else {
        incomplete.push("logs/validation.csv");
    }

    let metrics_csv = run_dir.join("metrics/summary.csv");
    if metrics_csv.exists() {
        let (_, rows) = read_csv(&metrics_csv)?;
        summary.push_str("evaluation summary (method, n, ssim, psnr):\n");
        for r in rows {
            summary.push_str(&format!(
                "  {} n={} ssim {} +- {} psnr {} +- {}\n",
                r.first().cloned().unwrap_or_default(),
                r.get(1).cloned().unwrap_or_default(),
                r.get(2).cloned().unwrap_or_default(),
                r.get(3).cloned().unwrap_or_default(),
                r.get(4).cloned().unwrap_or_default(),
                r.get(5).cloned().unwrap_or_default(),
            ));
        }
    } else {
        incomplete.push("metrics/summary.csv");
    }

    let status = if incomplete.is_empty() {
        "status: complete\n".to_string()
    } else {
        format!("status: incomplete (missing: {})\n", incomplete.join(", "))
    };
    let path = run_dir.join("report.txt");
    std::fs::write(&path, format!("{status}{summary}")).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn plot_renders_deterministic_png() {
        let dir = tempdir().unwrap();
        let pts: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect();
        let series = vec![("wave".to_string(), pts)];
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        line_plot(&series, &a).unwrap();
        line_plot(&series, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn report_marks_incomplete_runs() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("logs")).unwrap();
        std::fs::write(
            dir.path().join("logs/train_log.csv"),
            "iteration,epoch,i_cyc,f_cyc,hr_con,lr_con,da,fa,total,lrd,fd,lr\n0,0,1,0,1,1,0,0,3.0,,,1e-4\n",
        )
        .unwrap();
        let path = write_report(dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.contains("status: incomplete"));
        assert!(text.contains("validation.csv"));
        assert!(dir.path().join("figures/loss_curves.png").exists());
    }

    #[test]
    fn empty_series_is_an_error() {
        let dir = tempdir().unwrap();
        assert!(line_plot(&[], &dir.path().join("x.png")).is_err());
    }
}

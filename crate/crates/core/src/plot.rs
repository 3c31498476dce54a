//! Hand-rolled deterministic SVG plots: line charts for training curves and
//! bar charts for histograms. No styling beyond what makes them readable;
//! identical inputs must yield byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::RunManifest;
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// One named series for a line chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    // fixed decimals keep the output deterministic across formatting paths
    format!("{v:.2}")
}

fn axis_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line chart over arbitrary series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Config("line chart needs at least one point".into()));
    }
    let (x0, x1) = axis_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = axis_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {cy})\">{y_label}</text>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        cx = W / 2.0,
        ly = H - 12.0,
        cy = H / 2.0,
    );
    // tick labels at the corners
    let _ = write!(
        svg,
        "<text x=\"{m}\" y=\"{by}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"{r}\" y=\"{by}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"{lx}\" y=\"{b}\" text-anchor=\"end\">{}</text>\n\
         <text x=\"{lx}\" y=\"{ty}\" text-anchor=\"end\">{}</text>\n",
        fmt(x0),
        fmt(x1),
        fmt(y0),
        fmt(y1),
        m = MARGIN,
        r = W - MARGIN,
        by = H - MARGIN + 18.0,
        b = H - MARGIN,
        ty = MARGIN + 4.0,
        lx = MARGIN - 6.0,
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(sx(x)), fmt(sy(y))))
            .collect();
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - MARGIN + 4.0 - 120.0,
            MARGIN + 16.0 * (i as f64 + 1.0),
            s.label
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Bar chart over labeled counts.
pub fn bar_chart(title: &str, x_label: &str, bars: &[(String, f64)]) -> Result<String> {
    if bars.is_empty() {
        return Err(Error::Config("bar chart needs at least one bar".into()));
    }
    let max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    let span = W - 2.0 * MARGIN;
    let bw = span / bars.len() as f64;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">{x_label}</text>\n",
        W / 2.0,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        cx = W / 2.0,
        ly = H - 8.0,
    );
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v / max * (H - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * bw;
        let _ = write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1f77b4\"/>\n",
            fmt(x + bw * 0.1),
            fmt(H - MARGIN - h),
            fmt(bw * 0.8),
            fmt(h)
        );
        // label every bar when few, else sparsely
        let stride = (bars.len() / 16).max(1);
        if i % stride == 0 {
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n",
                fmt(x + bw / 2.0),
                H - MARGIN + 16.0
            );
        }
        if *v > 0.0 {
            let _ = write!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
                fmt(x + bw / 2.0),
                fmt(H - MARGIN - h - 4.0),
                v
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Standard plot set for a run: loss/accuracy curves, the ranking histogram
/// (when present), and the correlation trace (when present).
pub fn write_run_plots(manifest: &RunManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let loss: Vec<(f64, f64)> = manifest
        .epochs
        .iter()
        .map(|e| (e.epoch as f64, e.train_loss))
        .collect();
    let acc_all: Vec<(f64, f64)> = manifest
        .epochs
        .iter()
        .map(|e| (e.epoch as f64, e.acc_all))
        .collect();
    let acc_unb: Vec<(f64, f64)> = manifest
        .epochs
        .iter()
        .filter_map(|e| e.acc_unbiased.map(|a| (e.epoch as f64, a)))
        .collect();
    if !loss.is_empty() {
        fs::write(
            dir.join("loss.svg"),
            line_chart(
                "training loss",
                "epoch",
                "loss",
                &[Series {
                    label: "train".into(),
                    points: loss,
                }],
            )?,
        )?;
        let mut series = vec![Series {
            label: "all".into(),
            points: acc_all,
        }];
        if !acc_unb.is_empty() {
            series.push(Series {
                label: "bias-conflicting".into(),
                points: acc_unb,
            });
        }
        fs::write(
            dir.join("accuracy.svg"),
            line_chart("test accuracy", "epoch", "accuracy", &series)?,
        )?;
    }
    if let Some(hist) = &manifest.ranking_histogram {
        let bars: Vec<(String, f64)> = hist
            .iter()
            .enumerate()
            .map(|(i, &c)| (i.to_string(), c as f64))
            .collect();
        fs::write(
            dir.join("ranking_histogram.svg"),
            bar_chart("correct-epoch counts", "epochs correct", &bars)?,
        )?;
    }
    if let Some(corr) = &manifest.correlation_per_epoch {
        let pts: Vec<(f64, f64)> = corr
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i as f64, c)))
            .collect();
        if !pts.is_empty() {
            fs::write(
                dir.join("bias_correlation.svg"),
                line_chart(
                    "correctness vs bias alignment",
                    "epoch",
                    "pearson r",
                    &[Series {
                        label: "r".into(),
                        points: pts,
                    }],
                )?,
            )?;
        }
    }
    Ok(())
}

//! SVG figures and the markdown summary rendered from a report.

use std::fmt::Write;
use std::path::Path;

use optima_core::metrics::BasicMetric;

use crate::commands::{write_file, ArmReport, Report, REPORT_FORMAT};
use crate::config::Split;
use crate::error::{CliError, CliResult};

const PANEL: f64 = 260.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const MAX_POINTS: usize = 400;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn frame(out: &mut String, x0: f64, y0: f64, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(out, "<rect x=\"{x0:.2}\" y=\"{y0:.2}\" width=\"{PANEL:.2}\" height=\"{PANEL:.2}\" fill=\"none\" stroke=\"#333\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        x0 + PANEL / 2.0,
        y0 - 10.0,
        esc(title)
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
        x0 + PANEL / 2.0,
        y0 + PANEL + 32.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 {:.2} {:.2})\">{}</text>",
        x0 - 36.0,
        y0 + PANEL / 2.0,
        x0 - 36.0,
        y0 + PANEL / 2.0,
        esc(y_label)
    );
}

fn ticks(out: &mut String, x0: f64, y0: f64, (xlo, xhi): (f64, f64), (ylo, yhi): (f64, f64)) {
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (x, y) = (x0 + f * PANEL, y0 + PANEL - f * PANEL);
        let _ = writeln!(
            out,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            y0 + PANEL + 14.0,
            tick_label(xlo + f * (xhi - xlo))
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            x0 - 4.0,
            y + 4.0,
            tick_label(ylo + f * (yhi - ylo))
        );
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Reliability diagram with one panel per arm: bar height is the bin
/// accuracy, the dashed diagonal is perfect calibration.
pub fn reliability_svg(report: &Report) -> String {
    let n = report.arms.len().max(1) as f64;
    let mut out = svg_open(n * (PANEL + 2.0 * MARGIN), PANEL + 2.0 * MARGIN);
    for (i, arm) in report.arms.iter().enumerate() {
        let x0 = MARGIN + i as f64 * (PANEL + 2.0 * MARGIN);
        let y0 = MARGIN;
        let _ = writeln!(out, "<g class=\"panel\" data-arm=\"{}\">", esc(&arm.id));
        frame(&mut out, x0, y0, &arm.name, "confidence", "accuracy");
        match &arm.reliability {
            Some(table) => {
                ticks(&mut out, x0, y0, (0.0, 1.0), (0.0, 1.0));
                for (b, bin) in table.bins.iter().enumerate() {
                    let h = bin.accuracy * PANEL;
                    let _ = writeln!(
                        out,
                        "<rect class=\"bar\" data-bin=\"{b}\" data-count=\"{}\" data-accuracy=\"{:.6}\" data-confidence=\"{:.6}\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"#4c72b0\" fill-opacity=\"0.75\" stroke=\"#203864\"/>",
                        bin.count,
                        bin.accuracy,
                        bin.confidence,
                        x0 + bin.lower * PANEL,
                        y0 + PANEL - h,
                        (bin.upper - bin.lower) * PANEL,
                    );
                }
                let _ = writeln!(
                    out,
                    "<line class=\"diagonal\" x1=\"{x0:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{y0:.2}\" stroke=\"#d62728\" stroke-dasharray=\"4 3\"/>",
                    y0 + PANEL,
                    x0 + PANEL
                );
                if let Some(e) = arm.ece {
                    let _ = writeln!(
                        out,
                        "<text x=\"{:.2}\" y=\"{:.2}\">ECE {e:.4}</text>",
                        x0 + 6.0,
                        y0 + 16.0
                    );
                }
            }
            None => {
                let _ = writeln!(
                    out,
                    "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">regression: no reliability table</text>",
                    x0 + PANEL / 2.0,
                    y0 + PANEL / 2.0
                );
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if points.len() <= MAX_POINTS {
        return points;
    }
    let stride = points.len().div_ceil(MAX_POINTS);
    let last = *points.last().expect("nonempty");
    let mut kept: Vec<(f64, f64)> = points.into_iter().step_by(stride).collect();
    if kept.last() != Some(&last) {
        kept.push(last);
    }
    kept
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn line_panel(
    out: &mut String,
    x0: f64,
    y0: f64,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) {
    frame(out, x0, y0, title, x_label, y_label);
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    ticks(out, x0, y0, xr, yr);
    if series.iter().all(|s| s.points.is_empty()) {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">no logged steps</text>",
            x0 + PANEL / 2.0,
            y0 + PANEL / 2.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| {
                format!(
                    "{:.2},{:.2}",
                    x0 + (x - xr.0) / (xr.1 - xr.0) * PANEL,
                    y0 + PANEL - (y - yr.0) / (yr.1 - yr.0) * PANEL
                )
            })
            .collect();
        let _ = writeln!(out, "<polyline data-series=\"{}\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>", esc(&s.label), pts.join(" "));
        let ly = y0 + 14.0 + 13.0 * i as f64;
        let _ = writeln!(out, "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>", x0 + PANEL + 8.0, ly - 4.0, x0 + PANEL + 22.0, ly - 4.0);
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{ly:.2}\">{}</text>",
            x0 + PANEL + 26.0,
            esc(&s.label)
        );
    }
}

const LEGEND: f64 = 170.0;

fn panels_svg(panels: &[(String, String, String, Vec<Series>)]) -> String {
    let w = PANEL + 2.0 * MARGIN + LEGEND;
    let mut out = svg_open(panels.len().max(1) as f64 * w, PANEL + 2.0 * MARGIN);
    for (i, (title, xl, yl, series)) in panels.iter().enumerate() {
        line_panel(
            &mut out,
            MARGIN + i as f64 * w,
            MARGIN,
            title,
            xl,
            yl,
            series,
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Mean and scale of every augmentation coordinate against the step, for
/// arms with augmentation.
pub fn phi_svg(report: &Report) -> String {
    let mut means = Vec::new();
    let mut sigmas = Vec::new();
    for arm in report
        .arms
        .iter()
        .filter(|a| !a.trajectory.coordinates.is_empty() && !a.final_phi.is_empty())
    {
        let t = &arm.trajectory;
        for (c, name) in t.coordinates.iter().enumerate() {
            let label = format!("{} {name}", arm.name);
            let pts = |v: &Vec<Vec<f64>>| {
                thin(
                    t.step
                        .iter()
                        .zip(v)
                        .map(|(s, row)| (*s as f64, row[c]))
                        .collect(),
                )
            };
            means.push(Series {
                label: label.clone(),
                points: pts(&t.phi_mean),
            });
            sigmas.push(Series {
                label,
                points: pts(&t.phi_sigma),
            });
        }
    }
    panels_svg(&[
        (
            "augmentation mean".into(),
            "step".into(),
            "mean".into(),
            means,
        ),
        (
            "augmentation scale".into(),
            "step".into(),
            "sigma".into(),
            sigmas,
        ),
    ])
}

fn metric_name(arms: &[ArmReport]) -> &'static str {
    match arms.first().map(|a| a.metric) {
        Some(BasicMetric::Mse(_)) => "MSE",
        _ => "accuracy",
    }
}

/// Train and test plug-in metrics against the step, one line per arm.
pub fn curves_svg(report: &Report) -> String {
    let series = |pick: fn(&ArmReport) -> &Vec<Option<f64>>| -> Vec<Series> {
        report
            .arms
            .iter()
            .map(|a| Series {
                label: a.name.clone(),
                points: thin(
                    a.trajectory
                        .step
                        .iter()
                        .zip(pick(a))
                        .filter_map(|(s, v)| v.map(|v| (*s as f64, v)))
                        .collect(),
                ),
            })
            .collect()
    };
    let m = metric_name(&report.arms);
    panels_svg(&[
        (
            "train".into(),
            "step".into(),
            m.into(),
            series(|a| &a.trajectory.train_metric),
        ),
        (
            "test".into(),
            "step".into(),
            m.into(),
            series(|a| &a.trajectory.test_metric),
        ),
    ])
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

pub fn summary_md(report: &Report) -> String {
    let m = metric_name(&report.arms);
    let split = match report.split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut out = format!(
        "# Run summary\n\nseed {}, version {}, evaluated on the {split} split\n\n",
        report.seed, report.version
    );
    let _ = writeln!(
        out,
        "| Arm | {m} | ECE | OOD AUROC | Mean entropy | PAC-Bayes bound | Augmentation |"
    );
    out.push_str("|---|---|---|---|---|---|---|\n");
    for a in &report.arms {
        let aug = if a.final_phi.is_empty() {
            "none".to_string()
        } else {
            a.final_phi
                .iter()
                .map(|(n, mu, s)| format!("{n} {mu:.3}/{s:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let _ = writeln!(
            out,
            "| {} | {:.4} | {} | {:.4} | {:.4} | {} | {aug} |",
            a.name,
            a.metric.value(),
            opt(a.ece),
            a.ood.auroc,
            a.entropy.mean,
            opt(a.pac_bayes.bound)
        );
    }
    if let Some(theory) = &report.theory {
        out.push_str("\n## Theory checks\n\n| Check | Status | Detail |\n|---|---|---|\n");
        for t in theory {
            let _ = writeln!(
                out,
                "| {} | {:?} | {} |",
                t.name,
                t.status,
                t.detail.replace('|', "\\|")
            );
        }
    }
    out
}

pub fn report(path: &Path, out: &Path) -> CliResult<()> {
    let report: Report = crate::commands::read_json(path)?;
    if report.format != REPORT_FORMAT {
        return Err(CliError::Config(format!(
            "{}: unsupported report format `{}`",
            path.display(),
            report.format
        )));
    }
    if report.arms.is_empty() {
        return Err(CliError::Config(format!(
            "{}: report has no arms",
            path.display()
        )));
    }
    write_file(&out.join("reliability.svg"), &reliability_svg(&report))?;
    write_file(&out.join("phi_trajectory.svg"), &phi_svg(&report))?;
    write_file(&out.join("curves.svg"), &curves_svg(&report))?;
    write_file(&out.join("summary.md"), &summary_md(&report))?;
    println!(
        "wrote reliability.svg, phi_trajectory.svg, curves.svg and summary.md to {}",
        out.display()
    );
    Ok(())
}

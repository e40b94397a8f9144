//! Standalone SVG line charts of per-block reconstruction errors: one series
//! per method, log-scale vertical axis, block index on the horizontal.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

/// Zero errors cannot sit on a log axis; clamp them to this floor.
const LOG_FLOOR: f64 = 1e-12;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One labelled series of per-block errors.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub errors: Vec<f64>,
}

/// Render per-block error curves to an SVG file. `title` tops the chart and
/// `config_hash`, when present, is embedded as a comment in the file header.
pub fn emit_plot(series: &[Series], title: &str, config_hash: Option<&str>, path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.errors.is_empty()) {
        return Err(Error::Config("plot needs at least one non-empty series".into()));
    }
    let max_blocks = series.iter().map(|s| s.errors.len()).max().unwrap();

    let clamped: Vec<Vec<f64>> = series
        .iter()
        .map(|s| s.errors.iter().map(|&e| e.max(LOG_FLOOR)).collect())
        .collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for row in &clamped {
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let mut lo_dec = lo.log10().floor();
    let mut hi_dec = hi.log10().ceil();
    if hi_dec - lo_dec < 1.0 {
        lo_dec -= 0.5;
        hi_dec += 0.5;
    }

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |block: usize| -> f64 {
        if max_blocks == 1 {
            MARGIN_L + plot_w / 2.0
        } else {
            MARGIN_L + plot_w * block as f64 / (max_blocks - 1) as f64
        }
    };
    let y_of = |v: f64| -> f64 {
        let t = (v.log10() - lo_dec) / (hi_dec - lo_dec);
        MARGIN_T + plot_h * (1.0 - t)
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    if let Some(hash) = config_hash {
        let _ = writeln!(svg, "<!-- config_hash: {hash} -->");
    }
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        escape(title)
    );

    // decade gridlines and y labels
    let mut dec = lo_dec.ceil();
    while dec <= hi_dec {
        let y = y_of(10f64.powf(dec));
        let _ = writeln!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            MARGIN_L + plot_w
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">1e{}</text>",
            MARGIN_L - 6.0,
            y + 4.0,
            dec as i64
        );
        dec += 1.0;
    }

    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>",
        MARGIN_T + plot_h
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
        MARGIN_T + plot_h,
        MARGIN_L + plot_w,
        MARGIN_T + plot_h
    );
    for block in 0..max_blocks {
        let x = x_of(block);
        let _ = writeln!(
            svg,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            MARGIN_T + plot_h + 16.0,
            block + 1
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">block</text>",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">normalized error</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    );

    // series
    for (si, (s, row)) in series.iter().zip(&clamped).enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if row.len() > 1 {
            let points: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(b, &v)| format!("{:.2},{:.2}", x_of(b), y_of(v)))
                .collect();
            let _ = writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                points.join(" ")
            );
        }
        for (b, &v) in row.iter().enumerate() {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                x_of(b),
                y_of(v)
            );
        }
        // legend entry
        let ly = MARGIN_T + 14.0 + 18.0 * si as f64;
        let lx = MARGIN_L + plot_w + 12.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    let _ = writeln!(svg, "</svg>");
    fs::write(path, svg).map_err(|e| io_err(path, e))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_series_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        let series = [Series { label: "none".into(), errors: vec![0.25] }];
        emit_plot(&series, "errors", Some("hash"), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("config_hash: hash"));
        assert!(text.contains("<circle"));
    }

    #[test]
    fn two_series_get_two_legend_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        let series = [
            Series { label: "lr".into(), errors: vec![0.1, 0.2, 0.4] },
            Series { label: "br_gp".into(), errors: vec![0.05, 0.08, 0.1] },
        ];
        emit_plot(&series, "errors", None, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("<polyline").count(), 2);
        assert!(text.contains(">lr</text>"));
        assert!(text.contains(">br_gp</text>"));
    }

    #[test]
    fn zero_errors_are_clamped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        let series = [Series { label: "none".into(), errors: vec![0.0, 1e-3] }];
        emit_plot(&series, "errors", None, &path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains("<polyline"));
    }
}

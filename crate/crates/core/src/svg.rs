//! Minimal self-contained SVG 1.1 line charts: axes, ticks, polylines, and a
//! legend. No external assets, scripts, or fonts beyond generic families.

use std::path::Path;

use crate::error::Result;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn nice_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        // Degenerate span: pad so the single value sits mid-chart.
        let pad = lo.abs().max(1.0) * 0.1;
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if (1e-3..1e4).contains(&a) {
        format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one chart as a complete standalone SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x_lo, x_hi) = nice_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y_lo, y_hi) = nice_bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let y_of = |y: f64| MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    out.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // Axes with 5 ticks per side.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x_lo + f * (x_hi - x_lo);
        let yv = y_lo + f * (y_hi - y_lo);
        let xp = x_of(xv);
        let yp = y_of(yv);
        out.push_str(&format!(
            "<line x1=\"{xp:.1}\" y1=\"{:.1}\" x2=\"{xp:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_T,
            MARGIN_T + plot_h
        ));
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{yp:.1}\" x2=\"{:.1}\" y2=\"{yp:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_L,
            MARGIN_L + plot_w
        ));
        out.push_str(&format!(
            "<text x=\"{xp:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T + plot_h + 16.0,
            fmt_tick(xv)
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 6.0,
            yp + 4.0,
            fmt_tick(yv)
        ));
    }
    out.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#333333\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", x_of(x), y_of(y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 14.0 + 16.0 * si as f64;
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            MARGIN_L + plot_w - 130.0,
            MARGIN_L + plot_w - 110.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            MARGIN_L + plot_w - 104.0,
            ly + 4.0,
            escape(&s.name)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Renders an n×n scalar field as a colored cell grid (blue → white → red
/// across the value range). `values` is row-major with the first axis as
/// rows from bottom to top, matching grid query ordering.
pub fn grid_heatmap(title: &str, n: usize, values: &[f64]) -> String {
    assert_eq!(values.len(), n * n, "heatmap needs n*n values");
    let (lo, hi) = nice_bounds(values.iter().copied());
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let cell = (WIDTH - MARGIN_L - MARGIN_R).min(HEIGHT - MARGIN_T - MARGIN_B) / n as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" version=\"1.1\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
    for i in 0..n {
        for j in 0..n {
            let v = values[i * n + j];
            let t = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.5 };
            // Two-sided ramp through white at t = 0.5.
            let (r, g, b) = if t < 0.5 {
                let u = t * 2.0;
                (
                    (31.0 + (255.0 - 31.0) * u) as u8,
                    (119.0 + (255.0 - 119.0) * u) as u8,
                    (180.0 + (255.0 - 180.0) * u) as u8,
                )
            } else {
                let u = (t - 0.5) * 2.0;
                (
                    255u8,
                    (255.0 - (255.0 - 39.0) * u) as u8,
                    (255.0 - (255.0 - 40.0) * u) as u8,
                )
            };
            let x = MARGIN_L + j as f64 * cell;
            let y = HEIGHT - MARGIN_B - (i + 1) as f64 * cell;
            out.push_str(&format!(
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({r},{g},{b})\"/>\n"
            ));
        }
    }
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">range [{}, {}]</text>\n",
        MARGIN_L,
        HEIGHT - MARGIN_B + 18.0,
        fmt_tick(lo),
        fmt_tick(hi)
    ));
    out.push_str("</svg>\n");
    out
}

pub fn write_svg(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_wellformed_and_contains_series() {
        let series = vec![
            Series { name: "alpha".into(), points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 0.5)] },
            Series { name: "beta".into(), points: vec![(0.0, 0.1), (2.0, 3.0)] },
        ];
        let svg = line_chart("Test & chart", "step", "mse", &series);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("alpha") && svg.contains("beta"));
        assert!(svg.contains("Test &amp; chart"));
        assert_eq!(svg.matches("<polyline").count(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        write_svg(&path, &svg).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), svg);
    }

    #[test]
    fn heatmap_renders_one_cell_per_value() {
        let values: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let svg = grid_heatmap("field", 3, &values);
        assert!(svg.starts_with("<svg"));
        // 9 cells plus the background rect.
        assert_eq!(svg.matches("<rect").count(), 10);
        assert!(svg.contains("range ["));
    }

    #[test]
    fn degenerate_single_value_series_renders() {
        let svg = line_chart(
            "flat",
            "x",
            "y",
            &[Series { name: "s".into(), points: vec![(1.0, 5.0)] }],
        );
        assert!(svg.contains("<polyline"));
        assert!(!svg.contains("NaN"));
    }
}

//! Minimal hand-rolled SVG emitters for the report plots. Output is
//! deterministic so rerenders are byte-identical.

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 46.0;

pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<(String, Vec<(f64, f64)>)>,
    /// Points drawn as filled circles on top of the series.
    pub markers: Vec<(f64, f64)>,
}

fn fmt(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl LinePlot {
    pub fn render(&self) -> String {
        let (x_min, x_max) = bounds(
            self.series
                .iter()
                .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
                .chain(self.markers.iter().map(|p| p.0)),
        );
        let (y_min, y_max) = bounds(
            self.series
                .iter()
                .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
                .chain(self.markers.iter().map(|p| p.1)),
        );
        let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * (WIDTH - MARGIN_L - MARGIN_R);
        let py = |y: f64| HEIGHT - MARGIN_B - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        out.push_str(&format!(
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));

        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = x_min + t * (x_max - x_min);
            let yv = y_min + t * (y_max - y_min);
            let gx = px(xv);
            let gy = py(yv);
            out.push_str(&format!(
                "<line x1=\"{gx:.1}\" y1=\"{:.1}\" x2=\"{gx:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>\n",
                MARGIN_T,
                HEIGHT - MARGIN_B
            ));
            out.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{gy:.1}\" x2=\"{:.1}\" y2=\"{gy:.1}\" stroke=\"#ddd\"/>\n",
                MARGIN_L,
                WIDTH - MARGIN_R
            ));
            out.push_str(&format!(
                "<text x=\"{gx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                HEIGHT - MARGIN_B + 16.0,
                fmt(xv)
            ));
            out.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
                MARGIN_L - 6.0,
                gy + 4.0,
                fmt(yv)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        ));
        out.push_str(&format!(
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
            (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
            (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
            escape(&self.y_label)
        ));

        for (i, (name, pts)) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
                .collect();
            out.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            ));
            out.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>\n",
                WIDTH - MARGIN_R - 150.0,
                MARGIN_T + 14.0 * (i as f64 + 1.0),
                escape(name)
            ));
        }
        for &(x, y) in &self.markers {
            out.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"5\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>\n",
                px(x),
                py(y)
            ));
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Small-multiple histograms: one panel per labeled bin-count vector, laid
/// out in rows of four. Bars share a global count scale.
pub struct HistogramGrid {
    pub title: String,
    pub panels: Vec<(String, Vec<usize>)>,
}

impl HistogramGrid {
    pub fn render(&self) -> String {
        const PANEL_W: f64 = 150.0;
        const PANEL_H: f64 = 110.0;
        const COLS: usize = 4;
        let rows = self.panels.len().div_ceil(COLS);
        let width = 20.0 + COLS as f64 * (PANEL_W + 12.0);
        let height = 40.0 + rows as f64 * (PANEL_H + 26.0);
        let max_count = self
            .panels
            .iter()
            .flat_map(|(_, bins)| bins.iter().copied())
            .max()
            .unwrap_or(1)
            .max(1) as f64;

        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
             viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        ));
        out.push_str(&format!(
            "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            width / 2.0,
            escape(&self.title)
        ));
        for (i, (label, bins)) in self.panels.iter().enumerate() {
            let col = (i % COLS) as f64;
            let row = (i / COLS) as f64;
            let x0 = 20.0 + col * (PANEL_W + 12.0);
            let y0 = 30.0 + row * (PANEL_H + 26.0);
            out.push_str(&format!(
                "<rect x=\"{x0}\" y=\"{y0}\" width=\"{PANEL_W}\" height=\"{PANEL_H}\" fill=\"none\" stroke=\"#bbb\"/>\n"
            ));
            let bw = PANEL_W / bins.len().max(1) as f64;
            for (b, &count) in bins.iter().enumerate() {
                let h = count as f64 / max_count * (PANEL_H - 8.0);
                out.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                    x0 + b as f64 * bw + 1.0,
                    y0 + PANEL_H - h,
                    (bw - 2.0).max(1.0),
                    h,
                    COLORS[0]
                ));
            }
            out.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                x0 + PANEL_W / 2.0,
                y0 + PANEL_H + 15.0,
                escape(label)
            ));
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let plot = LinePlot {
            title: "loss".into(),
            x_label: "epoch".into(),
            y_label: "value".into(),
            series: vec![("train".into(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.3)])],
            markers: vec![(1.0, 0.5)],
        };
        let a = plot.render();
        let b = plot.render();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.contains("polyline"));
        assert!(a.contains("circle"));
    }

    #[test]
    fn flat_series_still_renders() {
        let plot = LinePlot {
            title: "flat".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![("c".into(), vec![(0.0, 2.0), (1.0, 2.0)])],
            markers: vec![],
        };
        assert!(plot.render().contains("polyline"));
    }

    #[test]
    fn histogram_grid_scales_to_the_largest_bin() {
        let grid = HistogramGrid {
            title: "entropies".into(),
            panels: vec![
                ("c0/k0".into(), vec![0, 3, 5, 1]),
                ("c0/k1".into(), vec![2, 2, 0, 0]),
            ],
        };
        let svg = grid.render();
        assert_eq!(svg.matches("<rect").count(), 1 + 2 + 8);
        assert_eq!(grid.render(), svg);
    }
}

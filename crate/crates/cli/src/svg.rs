//! Static grouped-bar charts.

use std::fmt::Write;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 170.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
    "#1b9e77", "#7570b3",
];

/// Bars grouped along the x axis: `values[g][s]` is series `s` in group `g`.
/// `NaN` values leave a gap.
pub struct GroupedBars<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub groups: Vec<String>,
    pub series: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round upper bound for the y axis.
fn nice_max(max: f64) -> f64 {
    if !(max > 0.0) {
        return 1.0;
    }
    let magnitude = 10f64.powf(max.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * magnitude)
        .find(|&m| m >= max)
        .unwrap_or(10.0 * magnitude)
}

impl GroupedBars<'_> {
    pub fn render(&self) -> String {
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let max = self.values.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
        let y_max = nice_max(max);
        let y = |v: f64| MARGIN_TOP + plot_h * (1.0 - v / y_max);
        let group_w = plot_w / self.groups.len().max(1) as f64;
        let bar_w = 0.8 * group_w / self.series.len().max(1) as f64;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            escape(self.title)
        );
        for k in 0..=5 {
            let v = y_max * k as f64 / 5.0;
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_LEFT}" x2="{x2}" y1="{yv:.1}" y2="{yv:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{label}</text>"##,
                x2 = MARGIN_LEFT + plot_w,
                yv = y(v),
                tx = MARGIN_LEFT - 6.0,
                ty = y(v) + 4.0,
                label = format_tick(v)
            );
        }
        for (g, group) in self.groups.iter().enumerate() {
            let x0 = MARGIN_LEFT + g as f64 * group_w + 0.1 * group_w;
            for (k, v) in self.values[g].iter().enumerate() {
                if !v.is_finite() {
                    continue;
                }
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>{} / {}: {v:.4}</title></rect>"#,
                    x0 + k as f64 * bar_w,
                    y(*v),
                    bar_w,
                    y(0.0) - y(*v),
                    PALETTE[k % PALETTE.len()],
                    escape(group),
                    escape(&self.series[k])
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x0 + 0.4 * group_w,
                y(0.0) + 18.0,
                escape(group)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN_LEFT}" x2="{x2}" y1="{y0:.1}" y2="{y0:.1}" stroke="black"/>"#,
            x2 = MARGIN_LEFT + plot_w,
            y0 = y(0.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 10.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h / 2.0,
            escape(self.y_label)
        );
        for (k, name) in self.series.iter().enumerate() {
            let ly = MARGIN_TOP + 18.0 * k as f64;
            let lx = WIDTH - MARGIN_RIGHT + 15.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx}" y="{ly}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                PALETTE[k % PALETTE.len()],
                lx + 18.0,
                ly + 10.0,
                escape(name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

//! Deterministic SVG line plots.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 * (1.0 + lo.abs()) {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    fn frac(&self, v: f64) -> Option<f64> {
        let v = if self.log { v.log10() } else { v };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.floor() as i64, self.hi.ceil() as i64);
            // 1, 2, 5 per decade when the range is short
            let mantissas: &[f64] = if b - a <= 2 { &[1.0, 2.0, 5.0] } else { &[1.0] };
            let ticks: Vec<(f64, String)> = (a..=b)
                .flat_map(|e| mantissas.iter().map(move |&c| (e, c)))
                .filter_map(|(e, c)| {
                    let f = (c.log10() + e as f64 - self.lo) / (self.hi - self.lo);
                    (-1e-9..=1.0 + 1e-9).contains(&f).then(|| (f, format!("{c}e{e}")))
                })
                .collect();
            if ticks.len() >= 2 {
                return ticks;
            }
        }
        (0..=4)
            .map(|i| {
                let f = i as f64 / 4.0;
                let v = self.lo + f * (self.hi - self.lo);
                let v = if self.log { 10f64.powf(v) } else { v };
                (f, format!("{v:.3e}"))
            })
            .collect()
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(plot: &Plot) -> String {
    let xs = Axis::fit(plot.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), plot.log_x);
    let ys = Axis::fit(plot.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), plot.log_y);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |f: f64| LEFT + f * pw;
    let py = |f: f64| TOP + (1.0 - f) * ph;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        esc(&plot.title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT:.1}" y="{TOP:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    for (f, label) in xs.ticks() {
        let x = px(f);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ccc"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"##,
            TOP,
            TOP + ph,
            TOP + ph + 16.0
        );
    }
    for (f, label) in ys.ticks() {
        let y = py(f);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ccc"/><text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 18.0,
        esc(&plot.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&plot.y_label)
    );
    for (i, s) in plot.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter_map(|&(x, y)| Some(format!("{:.2},{:.2}", px(xs.frac(x)?), py(ys.frac(y)?))))
            .collect();
        if pts.len() > 1 {
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        if i < 20 {
            let ly = TOP + 12.0 + 16.0 * i as f64;
            let lx = LEFT + pw + 10.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 16.0,
                lx + 20.0,
                ly + 4.0,
                esc(&s.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Plot {
        Plot {
            title: "E vs kappa".into(),
            x_label: "kappa".into(),
            y_label: "E".into(),
            log_x: true,
            log_y: false,
            series: vec![Series {
                label: "a<b".into(),
                points: vec![(0.02, 1.0), (0.2, 2.0)],
            }],
        }
    }

    #[test]
    fn rendering_is_deterministic_and_escaped() {
        let a = render(&sample());
        assert_eq!(a, render(&sample()));
        assert!(a.starts_with("<svg"));
        assert!(a.contains("a&lt;b"));
        assert!(a.contains("1e-1"));
    }

    #[test]
    fn empty_plot_still_renders() {
        let mut p = sample();
        p.series.clear();
        assert!(render(&p).ends_with("</svg>\n"));
    }
}

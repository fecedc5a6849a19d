//! A minimal SVG writer: log-log polylines and 2-D scatter/trajectory plots.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Option<Self> {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for (x, y) in points {
            f.x0 = f.x0.min(*x);
            f.x1 = f.x1.max(*x);
            f.y0 = f.y0.min(*y);
            f.y1 = f.y1.max(*y);
        }
        if !f.x0.is_finite() || !f.y0.is_finite() {
            return None;
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x0 -= 0.5;
            f.x1 += 0.5;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y0 -= 0.5;
            f.y1 += 0.5;
        }
        Some(f)
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD);
        let py = H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD);
        (px, py)
    }
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n\
         <text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD,
        W / 2.0,
        escape(title),
        W / 2.0,
        H - 12.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel),
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = PAD + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{y}\" font-size=\"11\" fill=\"{}\">{}</text>",
            PAD + 6.0,
            COLORS[i % COLORS.len()],
            escape(label)
        );
    }
}

/// Polylines of `log10 y` against `log10 x`; non-positive points are dropped.
pub fn loglog(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let logged: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| *x > 0.0 && *y > 0.0)
                .map(|(x, y)| (x.log10(), y.log10()))
                .collect()
        })
        .collect();
    let mut out = String::new();
    header(&mut out, title, &format!("log10 {xlabel}"), &format!("log10 {ylabel}"));
    if let Some(frame) = Frame::fit(logged.iter().flatten()) {
        for (i, pts) in logged.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = pts
                .iter()
                .map(|(x, y)| {
                    let (px, py) = frame.map(*x, *y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                path.join(" ")
            );
            for p in &path {
                let (px, py) = p.split_once(',').unwrap();
                let _ = writeln!(out, "<circle cx=\"{px}\" cy=\"{py}\" r=\"2.5\" fill=\"{color}\"/>");
            }
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// Scatter of point sets plus optional polylines (trajectories), in the first two coordinates.
pub fn scatter(title: &str, sets: &[Series], paths: &[Vec<(f64, f64)>]) -> String {
    let mut out = String::new();
    header(&mut out, title, "x0", "x1");
    let all = sets.iter().flat_map(|s| s.points.iter()).chain(paths.iter().flatten());
    if let Some(frame) = Frame::fit(all) {
        for path in paths {
            let pts: Vec<String> = path
                .iter()
                .map(|(x, y)| {
                    let (px, py) = frame.map(*x, *y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"#bbbbbb\" stroke-width=\"0.7\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        for (i, set) in sets.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            for (x, y) in &set.points {
                let (px, py) = frame.map(*x, *y);
                let _ = writeln!(out, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"{color}\"/>");
            }
        }
    }
    let labels: Vec<&str> = sets.iter().map(|s| s.label.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_well_formed() {
        let s = Series {
            label: "a<b".into(),
            points: vec![(1.0, 1.0), (0.1, 0.01), (0.0, 1.0)],
        };
        let svg = loglog("t", "h", "err", &[s]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<circle").count(), 2);
        let empty = scatter("t", &[], &[]);
        assert!(empty.contains("</svg>"));
    }
}

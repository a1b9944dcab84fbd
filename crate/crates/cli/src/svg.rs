//! Bare-bones SVG scatter and trajectory plots. Time along a path is drawn
//! as a blue-to-red colour ramp.

use std::fmt::Write as _;

const PANEL: f64 = 360.0;
const MARGIN: f64 = 24.0;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, Default)]
pub struct Panel {
    pub title: String,
    /// Point sets with a fill colour each.
    pub points: Vec<(Vec<[f64; 2]>, String)>,
    pub paths: Vec<Vec<[f64; 2]>>,
}

impl Panel {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            ..Self::default()
        }
    }

    fn bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        let all = self.points.iter().flat_map(|(p, _)| p.iter()).chain(self.paths.iter().flatten());
        for p in all {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        if !b[0].is_finite() {
            return [-1.0, -1.0, 1.0, 1.0];
        }
        // Equal scale on both axes.
        let span = (b[2] - b[0]).max(b[3] - b[1]).max(1e-9);
        let (cx, cy) = ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0);
        [cx - span / 2.0, cy - span / 2.0, cx + span / 2.0, cy + span / 2.0]
    }
}

fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (40.0 + 200.0 * t) as u8;
    let b = (240.0 - 200.0 * t) as u8;
    format!("#{r:02x}40{b:02x}")
}

/// Lays panels out left to right.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL * panels.len().max(1) as f64;
    let height = PANEL + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, panel) in panels.iter().enumerate() {
        let [x0, y0, x1, y1] = panel.bounds();
        let ox = k as f64 * PANEL;
        let inner = PANEL - 2.0 * MARGIN;
        let map = |p: &[f64; 2]| {
            let x = ox + MARGIN + (p[0] - x0) / (x1 - x0) * inner;
            let y = MARGIN + inner - (p[1] - y0) / (y1 - y0) * inner + MARGIN;
            (x, y)
        };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="16" font-family="sans-serif" font-size="13">{}</text>"#,
            ox + MARGIN,
            escape(&panel.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{inner}" height="{inner}" fill="none" stroke="#999"/>"##,
            ox + MARGIN,
            2.0 * MARGIN
        );
        for path in &panel.paths {
            let segments = path.len().saturating_sub(1);
            for (i, w) in path.windows(2).enumerate() {
                let (ax, ay) = map(&w[0]);
                let (bx, by) = map(&w[1]);
                let _ = writeln!(
                    s,
                    r#"<line x1="{ax:.2}" y1="{ay:.2}" x2="{bx:.2}" y2="{by:.2}" stroke="{}" stroke-width="0.8" stroke-opacity="0.6"/>"#,
                    ramp(i as f64 / segments.max(1) as f64)
                );
            }
        }
        for (pts, colour) in &panel.points {
            for p in pts {
                let (x, y) = map(p);
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.6" fill="{colour}" fill-opacity="0.7"/>"#);
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Projects states onto two coordinates.
pub fn project(states: &[Vec<f64>], a: usize, b: usize) -> Vec<[f64; 2]> {
    states.iter().map(|s| [s[a], s[b]]).collect()
}

/// One panel for 2-D data; `xy` and `xz` projections for 3-D.
pub fn projections(title: &str, dim: usize) -> Vec<(String, usize, usize)> {
    if dim >= 3 {
        vec![(format!("{title} (x-y)"), 0, 1), (format!("{title} (x-z)"), 0, 2)]
    } else {
        vec![(title.to_string(), 0, 1)]
    }
}

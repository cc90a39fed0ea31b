//! Minimal SVG rendering of ROC curves on a log-FAR axis.

use std::fmt::Write;

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct Curve {
    pub label: String,
    /// `(far, tar)` points in ROC order.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Decade at or below the smallest positive FAR; FAR = 0 is drawn there.
pub fn far_floor(curves: &[Curve]) -> f64 {
    let min_pos = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .filter(|&f| f > 0.0)
        .fold(f64::INFINITY, f64::min);
    if min_pos.is_finite() {
        10f64.powf(min_pos.log10().floor()).min(0.1)
    } else {
        1e-3
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn roc_svg(curves: &[Curve]) -> Result<String, CliError> {
    if curves.is_empty() {
        return Err(CliError::validation("no ROC curves to plot"));
    }
    for c in curves {
        if c.points.is_empty() {
            return Err(CliError::validation(format!("curve `{}` has no points", c.label)));
        }
        if c.points.iter().any(|&(f, t)| !(0.0..=1.0).contains(&f) || !(0.0..=1.0).contains(&t)) {
            return Err(CliError::validation(format!("curve `{}` has rates outside [0, 1]", c.label)));
        }
    }
    let floor = far_floor(curves);
    let lo = floor.log10();
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |far: f64| LEFT + (far.max(floor).log10() - lo) / -lo * pw;
    let y = |tar: f64| TOP + (1.0 - tar) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    let decades = (-lo).round() as i32;
    for k in 0..=decades {
        let far = floor * 10f64.powi(k);
        let px = x(far);
        let _ = writeln!(
            s,
            r##"<line x1="{px:.2}" y1="{TOP}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##,
            TOP + ph
        );
        let label = if k == 0 { format!("≤1e{}", lo.round()) } else { format!("1e{}", far.log10().round()) };
        let _ = writeln!(
            s,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
            TOP + ph + 16.0
        );
    }
    for i in 0..=5 {
        let tar = i as f64 / 5.0;
        let py = y(tar);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{tar:.1}</text>"#,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">FAR (log scale)</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">TAR</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points.iter().map(|&(f, t)| format!("{:.2},{:.2}", x(f), y(t))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 12.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&c.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_is_a_decade() {
        let c = Curve {
            label: "a".into(),
            points: vec![(0.0, 0.0), (0.004, 0.3), (1.0, 1.0)],
        };
        assert_eq!(far_floor(&[c]), 1e-3);
        let zero = Curve {
            label: "z".into(),
            points: vec![(0.0, 0.0)],
        };
        assert_eq!(far_floor(&[zero]), 1e-3);
    }

    #[test]
    fn labels_are_escaped() {
        let c = Curve {
            label: "a<b & c".into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        };
        let svg = roc_svg(&[c]).unwrap();
        assert!(svg.contains("a&lt;b &amp; c"));
    }
}

//! Self-contained SVG line charts of metrics files.

use std::fmt::Write;

use clap::ValueEnum;
use zrl_core::trainer::MetricsRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Panel {
    /// Held-out success rate.
    Success,
    /// Mean reward of the training groups.
    TrainReward,
    /// Fraction of chunks with a non-zero step advantage.
    Nonzero,
}

impl Panel {
    pub fn y_label(self) -> &'static str {
        match self {
            Panel::Success => "success rate",
            Panel::TrainReward => "train reward",
            Panel::Nonzero => "non-zero step advantage fraction",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Parsed records and the 1-based numbers of lines that failed to parse.
pub fn parse_metrics(text: &str) -> (Vec<MetricsRecord>, Vec<usize>) {
    let mut records = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricsRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => bad.push(i + 1),
        }
    }
    (records, bad)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn extract(records: &[MetricsRecord], panel: Panel, difficulty: Option<&str>, greedy: bool) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| {
            let y = match panel {
                Panel::Success => {
                    let pick = |s: &zrl_core::trainer::SuccessRates| if greedy { s.greedy } else { s.sampled };
                    match difficulty {
                        Some(d) => r.success.get(d).map(pick),
                        None => mean(r.success.values().map(pick)),
                    }
                }
                Panel::TrainReward => match difficulty {
                    Some(d) => r.train_reward.get(d).copied(),
                    None => r.mean_train_reward,
                },
                Panel::Nonzero => r.nonzero_step_fraction,
            }?;
            Some((r.iteration as f64, y))
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// All panels plot quantities in [0, 1]; the x range covers every series.
pub fn render(series: &[Series], panel: Panel) -> String {
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + x / x_max * pw;
    let sy = |y: f64| TOP + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for k in 0..=5 {
        let y = k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{x2:.1}" y2="{py:.1}" stroke="#e0e0e0"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="end">{y:.1}</text>"##,
            py = sy(y),
            x2 = LEFT + pw,
            tx = LEFT - 6.0,
            ty = sy(y) + 4.0,
        );
        let x = x_max * k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.1}" y1="{y1:.1}" x2="{px:.1}" y2="{y2:.1}" stroke="#333"/><text x="{px:.1}" y="{ty:.1}" text-anchor="middle">{x:.0}</text>"##,
            px = sx(x),
            y1 = TOP + ph,
            y2 = TOP + ph + 5.0,
            ty = TOP + ph + 18.0,
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text>"#,
        LEFT + pw / 2.0,
        H - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        panel.y_label()
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = write!(svg, r#"<g class="series" data-label="{}">"#, escape(&s.label));
        match pts.len() {
            0 => {}
            1 => {
                let _ = write!(svg, r#"<circle cx="{}" cy="{}" r="3" fill="{color}"/>"#, sx(s.points[0].0), sy(s.points[0].1));
            }
            _ => {
                let _ = write!(
                    svg,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                    pts.join(" ")
                );
            }
        }
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_lines_are_reported() {
        let text = "{\"iteration\":0,\"beta\":0.001,\"learning_rate\":0.001}\nnot json\n\n{\"iteration\":1}\n";
        let (recs, bad) = parse_metrics(text);
        assert_eq!(recs.len(), 1);
        assert_eq!(bad, vec![2, 4]);
    }

    #[test]
    fn one_series_per_input() {
        let s = |l: &str| Series {
            label: l.into(),
            points: vec![(0.0, 0.0), (10.0, 0.5)],
        };
        let svg = render(&[s("a"), s("b<c")], Panel::Success);
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.contains(">iteration<") && svg.contains(">success rate<"));
    }
}

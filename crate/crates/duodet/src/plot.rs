//! Minimal SVG emission for the handful of figures the CLI produces:
//! PR curves, robustness drop bars, and ablation bars. Output is plain
//! standalone SVG with no timestamps, so plot files are byte-reproducible.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{AblationTable, EvalReport, ScenarioOutcome};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

struct Svg {
    body: String,
}

impl Svg {
    fn new() -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
        );
        let _ = writeln!(
            body,
            "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
        );
        Svg { body }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            "<line x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>"
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>"
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let escaped = content
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"{size}\" text-anchor=\"{anchor}\">{escaped}</text>"
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let mut list = String::new();
        for (x, y) in points {
            let _ = write!(list, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\"/>",
            list.trim_end()
        );
    }

    fn finish(mut self) -> String {
        let _ = writeln!(self.body, "</svg>");
        self.body
    }
}

fn axes(svg: &mut Svg, title: &str, x_label: &str, y_label: &str) {
    svg.line(MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, "#333", 1.0);
    svg.line(MARGIN, MARGIN, MARGIN, HEIGHT - MARGIN, "#333", 1.0);
    svg.text(WIDTH / 2.0, MARGIN / 2.0, 15.0, "middle", title);
    svg.text(WIDTH / 2.0, HEIGHT - 12.0, 12.0, "middle", x_label);
    svg.text(16.0, HEIGHT / 2.0, 12.0, "middle", y_label);
}

fn write_svg(path: &Path, content: String) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

/// PR curves per class at one distance threshold (the report's last).
pub fn plot_pr_curves(report: &EvalReport, path: &Path) -> Result<()> {
    let mut svg = Svg::new();
    axes(
        &mut svg,
        &format!("precision-recall ({})", report.scenario),
        "recall",
        "precision",
    );
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    // gridlines at 0.25 steps
    for k in 1..4 {
        let f = k as f64 / 4.0;
        svg.line(
            MARGIN + f * plot_w,
            MARGIN,
            MARGIN + f * plot_w,
            HEIGHT - MARGIN,
            "#ddd",
            0.5,
        );
        svg.line(
            MARGIN,
            MARGIN + f * plot_h,
            WIDTH - MARGIN,
            MARGIN + f * plot_h,
            "#ddd",
            0.5,
        );
    }
    let max_t = report
        .pr_curves
        .iter()
        .map(|c| c.threshold)
        .fold(f64::MIN, f64::max);
    let mut color = 0;
    for curve in report.pr_curves.iter().filter(|c| c.threshold == max_t) {
        let points: Vec<(f64, f64)> = curve
            .precision
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    MARGIN + (i as f64 / 100.0) * plot_w,
                    HEIGHT - MARGIN - p * plot_h,
                )
            })
            .collect();
        let stroke = PALETTE[color % PALETTE.len()];
        svg.polyline(&points, stroke);
        svg.text(
            WIDTH - MARGIN - 4.0,
            MARGIN + 16.0 + 14.0 * color as f64,
            11.0,
            "end",
            &format!("class {} (t={})", curve.class_id, curve.threshold),
        );
        color += 1;
    }
    write_svg(path, svg.finish())
}

fn bar_chart(
    labels: &[String],
    values: &[f64],
    title: &str,
    y_label: &str,
    y_max: f64,
    path: &Path,
) -> Result<()> {
    let mut svg = Svg::new();
    axes(&mut svg, title, "", y_label);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let n = labels.len().max(1) as f64;
    let slot = plot_w / n;
    let bar_w = slot * 0.6;
    for (i, (label, value)) in labels.iter().zip(values.iter()).enumerate() {
        let frac = (value / y_max).clamp(0.0, 1.0);
        let h = frac * plot_h;
        let x = MARGIN + i as f64 * slot + (slot - bar_w) / 2.0;
        let y = HEIGHT - MARGIN - h;
        svg.rect(x, y, bar_w, h, PALETTE[i % PALETTE.len()]);
        svg.text(x + bar_w / 2.0, y - 4.0, 10.0, "middle", &format!("{value:.3}"));
        svg.text(
            x + bar_w / 2.0,
            HEIGHT - MARGIN + 14.0,
            10.0,
            "middle",
            label,
        );
    }
    write_svg(path, svg.finish())
}

/// Relative mAP drops per scenario as bars.
pub fn plot_drop_bars(outcomes: &[ScenarioOutcome], path: &Path) -> Result<()> {
    let labels: Vec<String> = outcomes.iter().map(|o| o.scenario.clone()).collect();
    let values: Vec<f64> = outcomes.iter().map(|o| o.relative_drop * 100.0).collect();
    let y_max = values.iter().cloned().fold(1.0f64, f64::max) * 1.15;
    bar_chart(
        &labels,
        &values,
        "relative mAP drop per scenario",
        "drop (%)",
        y_max,
        path,
    )
}

/// Ablation-row mAP (clean and corrupted) as paired bars.
pub fn plot_ablation_bars(table: &AblationTable, path: &Path) -> Result<()> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for row in &table.rows {
        labels.push(format!("{} clean", row.label));
        values.push(row.map);
        labels.push(format!("{} corr", row.label));
        values.push(row.map_corrupted);
    }
    bar_chart(
        &labels,
        &values,
        "ablation mAP (clean vs corrupted eval)",
        "mAP",
        1.0,
        path,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{evaluate, Detection, EvalSample};
    use crate::world::GroundTruthBox;

    fn sample_report() -> EvalReport {
        let gts = vec![GroundTruthBox {
            center: (0.0, 0.0),
            size: (2.0, 4.0),
            class_id: 0,
            yaw: 0.0,
        }];
        let detections = vec![Detection {
            center: (0.2, 0.1),
            size: (2.0, 4.0),
            class_id: 0,
            score: 0.8,
        }];
        evaluate(
            &[EvalSample { detections, gts }],
            &crate::config::EvalConfig::default(),
            2,
            "test",
        )
    }

    #[test]
    fn plots_are_wellformed_svg() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        let pr = dir.path().join("pr.svg");
        plot_pr_curves(&report, &pr).unwrap();
        let text = std::fs::read_to_string(&pr).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains("polyline"));

        let outcomes = vec![crate::eval::ScenarioOutcome {
            scenario: "full".into(),
            map: report.map,
            nds_lite: report.nds_lite,
            relative_drop: 0.0,
            report: report.clone(),
        }];
        let bars = dir.path().join("drops.svg");
        plot_drop_bars(&outcomes, &bars).unwrap();
        let text = std::fs::read_to_string(&bars).unwrap();
        assert!(text.contains("<rect"));

        // reproducible bytes
        let again = dir.path().join("drops2.svg");
        plot_drop_bars(&outcomes, &again).unwrap();
        assert_eq!(
            std::fs::read(&bars).unwrap(),
            std::fs::read(&again).unwrap()
        );
    }
}

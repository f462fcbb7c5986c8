//! Norm-trajectory SVG, final-aggregate tables and the adapter-scale monitor.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::TrainLogRow;

/// Sites whose `‖A‖`/`‖B‖` imbalance exceeds this are flagged.
pub const RATIO_FLAG_THRESHOLD: f64 = 10.0;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub label: String,
    pub rows: Vec<TrainLogRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAggregates {
    pub run: String,
    pub step: usize,
    pub a_f_sum: f64,
    pub b_f_sum: f64,
    pub delta_f_sum: f64,
    pub prod_f_sum: f64,
    pub d_kl: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioFlag {
    pub run: String,
    pub step: usize,
    pub max_ab_ratio: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

/// Overlaid `prod_f_sum` vs step, one polyline per run on shared axes. A
/// single-row run is drawn as a marker.
pub fn norms_svg(runs: &[RunLog]) -> Result<String> {
    if runs.is_empty() || runs.iter().any(|r| r.rows.is_empty()) {
        return Err(Error::EmptyInput("norms_svg"));
    }
    let all = runs.iter().flat_map(|r| &r.rows);
    let (x0, x1) = span(
        all.clone().map(|r| r.step as f64).fold(f64::INFINITY, f64::min),
        all.clone().map(|r| r.step as f64).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = span(0.0f64.min(all.clone().map(|r| r.prod_f_sum).fold(f64::INFINITY, f64::min)), all.map(|r| r.prod_f_sum).fold(f64::NEG_INFINITY, f64::max));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{l}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{l}" y1="{t}" x2="{l}" y2="{b}"/></g>"#);
    let _ = writeln!(s, r#"<g class="ticks" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{l}" y="{}" text-anchor="middle">{}</text>"#, b + 16.0, x0);
    let _ = writeln!(s, r#"<text x="{r}" y="{}" text-anchor="middle">{}</text>"#, b + 16.0, x1);
    let _ = writeln!(s, r#"<text x="{}" y="{b}" text-anchor="end">{:.3}</text>"#, l - 6.0, y0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, l - 6.0, t + 4.0, y1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, (l + r) / 2.0, b + 36.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">ProdF_sum</text>"#, (t + b) / 2.0, (t + b) / 2.0);
    let _ = writeln!(s, "</g>");
    for (i, run) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let label = escape(&run.label);
        if run.rows.len() == 1 {
            let row = &run.rows[0];
            let _ = writeln!(
                s,
                r#"<circle class="run" data-run="{label}" cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#,
                px(row.step as f64),
                py(row.prod_f_sum)
            );
        } else {
            let pts: Vec<String> = run.rows.iter().map(|row| format!("{:.2},{:.2}", px(row.step as f64), py(row.prod_f_sum))).collect();
            let _ = writeln!(
                s,
                r#"<polyline class="run" data-run="{label}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend"><rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{label}</text></g>"#,
            r - 120.0,
            ly - 9.0,
            r - 105.0,
            ly
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn final_aggregates(runs: &[RunLog]) -> Result<Vec<FinalAggregates>> {
    runs.iter()
        .map(|run| {
            let last = run.rows.last().ok_or(Error::EmptyInput("final_aggregates"))?;
            Ok(FinalAggregates {
                run: run.label.clone(),
                step: last.step,
                a_f_sum: last.a_f_sum,
                b_f_sum: last.b_f_sum,
                delta_f_sum: last.delta_f_sum,
                prod_f_sum: last.prod_f_sum,
                d_kl: last.d_kl,
                ce: last.ce,
            })
        })
        .collect()
}

/// Logged steps whose worst per-site norm ratio exceeds `threshold`.
pub fn ratio_flags(runs: &[RunLog], threshold: f64) -> Vec<RatioFlag> {
    runs.iter()
        .flat_map(|run| {
            run.rows.iter().filter_map(move |row| match row.max_ab_ratio {
                Some(r) if r > threshold => Some(RatioFlag { run: run.label.clone(), step: row.step, max_ab_ratio: r }),
                _ => None,
            })
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, prod: f64, ratio: Option<f64>) -> TrainLogRow {
        TrainLogRow {
            step,
            kind: "typo".into(),
            ce: 1.0,
            sem: 0.0,
            sem_calibrated: 0.0,
            stab: 0.0,
            bal: 0.0,
            total: 1.0,
            prod_f_sum: prod,
            a_f_sum: 1.0,
            b_f_sum: prod,
            delta_f_sum: 0.0,
            d_kl: 0.0,
            max_ab_ratio: ratio,
        }
    }

    fn run(label: &str, rows: Vec<TrainLogRow>) -> RunLog {
        RunLog { label: label.into(), rows }
    }

    #[test]
    fn one_polyline_per_run() {
        let svg = norms_svg(&[run("a", vec![row(1, 0.0, None), row(10, 1.0, None)])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let svg = norms_svg(&[run("a", vec![row(1, 0.0, None), row(10, 1.0, None)]), run("b<", vec![row(1, 0.0, None), row(5, 2.0, None)])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;"));
        assert_eq!(svg.matches("class=\"axes\"").count(), 1);
    }

    #[test]
    fn single_row_gets_marker() {
        let svg = norms_svg(&[run("solo", vec![row(3, 0.5, None)])]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("NaN"));
        assert!(norms_svg(&[]).is_err());
    }

    #[test]
    fn flags_fire_only_above_threshold() {
        let runs = [run("r", vec![row(1, 0.0, None), row(2, 0.1, Some(3.0)), row(3, 0.1, Some(12.0))])];
        let f = ratio_flags(&runs, RATIO_FLAG_THRESHOLD);
        assert_eq!(f, vec![RatioFlag { run: "r".into(), step: 3, max_ab_ratio: 12.0 }]);
        let agg = final_aggregates(&runs).unwrap();
        assert_eq!(agg[0].step, 3);
        assert!(String::from_utf8(to_csv(&agg).unwrap()).unwrap().starts_with("run,step,a_f_sum"));
    }
}

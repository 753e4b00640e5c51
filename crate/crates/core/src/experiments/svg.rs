//! Deterministic SVG rendering. Every chart is a function of CSV text only.

use std::fmt::Write as _;

use serde::Deserialize;

use crate::error::{Error, Result};

const SIZE: f64 = 400.0;
const MARGIN: f64 = 40.0;

/// Light-to-dark ramp: `t = 0` is pale yellow, `t = 1` deep purple.
const RAMP: [(f64, f64, f64); 5] = [
    (253.0, 231.0, 37.0),
    (94.0, 201.0, 98.0),
    (33.0, 145.0, 140.0),
    (59.0, 82.0, 139.0),
    (68.0, 1.0, 84.0),
];

fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn parse<T: for<'de> Deserialize<'de>>(csv_text: &str) -> Result<Vec<T>> {
    let body: String = csv_text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::invalid(format!("chart input: {e}")))
}

fn header(out: &mut String, title: &str, width: f64, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="16" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn legend(out: &mut String, x: f64, lo: f64, hi: f64, label: &str) {
    let steps = 20;
    let h = SIZE / steps as f64;
    for k in 0..steps {
        let t = k as f64 / (steps - 1) as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            MARGIN + k as f64 * h,
            h + 0.5,
            color(t)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{lo:.3}</text>"#, x + 18.0, MARGIN + 9.0);
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}">{hi:.3}</text>"#, x + 18.0, MARGIN + SIZE);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" transform="rotate(90 {:.2} {:.2})">{}</text>"#,
        x + 18.0,
        MARGIN + SIZE / 2.0,
        x + 18.0,
        MARGIN + SIZE / 2.0,
        escape(label)
    );
}

#[derive(Deserialize)]
struct GoalPoint {
    goal_x: f64,
    goal_y: f64,
    mean_distance: f64,
}

/// Per-goal distance map from a `goal_x,goal_y,mean_distance,...` table:
/// one disc per goal, lighter means closer to the goal. The color scale runs
/// from 0 to `vmax` (the largest distance in the table when `None`).
pub fn goal_heatmap(
    csv_text: &str,
    bounds: ([f64; 2], [f64; 2]),
    vmax: Option<f64>,
    title: &str,
) -> Result<String> {
    let rows: Vec<GoalPoint> = parse(csv_text)?;
    let ([x0, y0], [x1, y1]) = bounds;
    let vmax = vmax.unwrap_or_else(|| rows.iter().map(|r| r.mean_distance).fold(0.0, f64::max));
    let vmax = if vmax > 0.0 { vmax } else { 1.0 };
    let n = rows.len().max(1) as f64;
    let radius = 0.5 * SIZE / n.sqrt();
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * SIZE;
    let py = |y: f64| MARGIN + (y1 - y) / (y1 - y0) * SIZE;
    let mut out = String::new();
    header(&mut out, title, SIZE + 2.0 * MARGIN + 60.0, SIZE + 2.0 * MARGIN);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    for r in &rows {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{radius:.2}" fill="{}"><title>({:.3}, {:.3}): {:.4}</title></circle>"#,
            px(r.goal_x),
            py(r.goal_y),
            color(r.mean_distance / vmax),
            r.goal_x,
            r.goal_y,
            r.mean_distance
        );
    }
    legend(&mut out, SIZE + 2.0 * MARGIN, 0.0, vmax, "mean distance to goal");
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Deserialize)]
struct Bin {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
    count: u64,
}

/// Descriptor density map from the histogram table printed by
/// [`crate::dataset::inspect`]; darker means more trajectories.
pub fn density_map(csv_text: &str, title: &str) -> Result<String> {
    let bins: Vec<Bin> = parse(csv_text)?;
    let max = bins.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
    let x0 = bins.iter().map(|b| b.x_lo).fold(f64::INFINITY, f64::min);
    let x1 = bins.iter().map(|b| b.x_hi).fold(f64::NEG_INFINITY, f64::max);
    let y0 = bins.iter().map(|b| b.y_lo).fold(f64::INFINITY, f64::min);
    let y1 = bins.iter().map(|b| b.y_hi).fold(f64::NEG_INFINITY, f64::max);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * SIZE;
    let sy = |y: f64| MARGIN + (y1 - y) / (y1 - y0).max(f64::MIN_POSITIVE) * SIZE;
    let mut out = String::new();
    header(&mut out, title, SIZE + 2.0 * MARGIN + 60.0, SIZE + 2.0 * MARGIN);
    for b in &bins {
        let fill = if b.count == 0 { "#ffffff".to_string() } else { color(b.count as f64 / max) };
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"><title>{}</title></rect>"#,
            sx(b.x_lo),
            sy(b.y_hi),
            sx(b.x_hi) - sx(b.x_lo),
            sy(b.y_lo) - sy(b.y_hi),
            b.count
        );
    }
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    legend(&mut out, SIZE + 2.0 * MARGIN, 0.0, max, "trajectories per bin");
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Deserialize)]
struct CurvePoint {
    variant: String,
    epoch: f64,
    mean: f64,
    std: f64,
}

const LINE_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Mean curves with a ±1 std band from a `variant,epoch,mean,std` table,
/// one line per variant in order of first appearance.
pub fn curves(csv_text: &str, title: &str, y_label: &str) -> Result<String> {
    let points: Vec<CurvePoint> = parse(csv_text)?;
    let mut variants: Vec<&str> = Vec::new();
    for p in &points {
        if !variants.contains(&p.variant.as_str()) {
            variants.push(&p.variant);
        }
    }
    let finite = points.iter().filter(|p| p.mean.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for p in finite {
        x0 = x0.min(p.epoch);
        x1 = x1.max(p.epoch);
        y0 = y0.min(p.mean - p.std);
        y1 = y1.max(p.mean + p.std);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let (width, height) = (SIZE + 2.0 * MARGIN + 120.0, SIZE + 2.0 * MARGIN);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * SIZE;
    let py = |y: f64| MARGIN + (y1 - y) / (y1 - y0) * SIZE;
    let mut out = String::new();
    header(&mut out, title, width, height);
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">epoch</text>"#, MARGIN + SIZE / 2.0, height - 8.0);
    let _ = writeln!(
        out,
        r#"<text x="12" y="{:.2}" text-anchor="middle" transform="rotate(-90 12 {:.2})">{}</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN + SIZE / 2.0,
        escape(y_label)
    );
    for (v, tick) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(out, r#"<text x="{tick:.2}" y="{:.2}" text-anchor="middle">{v}</text>"#, MARGIN + SIZE + 14.0);
    }
    for (v, tick) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0, tick + 4.0);
    }
    for (k, name) in variants.iter().enumerate() {
        let c = LINE_COLORS[k % LINE_COLORS.len()];
        let pts: Vec<&CurvePoint> = points
            .iter()
            .filter(|p| p.variant == *name && p.mean.is_finite())
            .collect();
        if !pts.is_empty() {
            let upper = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.epoch), py(p.mean + p.std)));
            let lower = pts.iter().rev().map(|p| format!("{:.2},{:.2}", px(p.epoch), py(p.mean - p.std)));
            let band: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(out, r#"<polygon points="{}" fill="{c}" fill-opacity="0.2"/>"#, band.join(" "));
            let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", px(p.epoch), py(p.mean))).collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        let ly = MARGIN + 14.0 + 16.0 * k as f64;
        let lx = MARGIN + SIZE + 10.0;
        let _ = writeln!(out, r#"<rect x="{lx:.2}" y="{:.2}" width="12" height="3" fill="{c}"/>"#, ly - 4.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#, lx + 16.0, escape(name));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOALS: &str = "goal_x,goal_y,mean_distance,mean_fitness,spread,n_episodes\n0,0,1.5,3,0.1,10\n5,-5,0.5,2,0.2,10\n";

    #[test]
    fn ramp_runs_light_to_dark() {
        assert_eq!(color(0.0), "#fde725");
        assert_eq!(color(1.0), "#440154");
        assert_eq!(color(f64::NAN), "#440154");
    }

    #[test]
    fn heatmap_is_a_function_of_its_table() {
        let b = ([-15.0, -15.0], [15.0, 15.0]);
        let a = goal_heatmap(GOALS, b, None, "QDT <ME-LS>").unwrap();
        assert_eq!(a, goal_heatmap(GOALS, b, None, "QDT <ME-LS>").unwrap());
        assert_eq!(a.matches("<circle").count(), 2);
        assert!(a.contains("QDT &lt;ME-LS&gt;"));
        // the closer goal is drawn lighter
        assert!(a.contains(&color(1.0 / 3.0)) && a.contains(&color(1.0)));
        assert!(goal_heatmap("x,y\n1,2\n", b, None, "t").is_err());
    }

    #[test]
    fn density_map_skips_the_comment_header() {
        let text = "# env=point-omni\nbin_x,bin_y,x_lo,x_hi,y_lo,y_hi,count\n0,0,0,1,0,1,0\n0,1,0,1,1,2,4\n";
        let svg = density_map(text, "d").unwrap();
        assert_eq!(svg.matches("<title>").count(), 2);
        assert!(svg.contains("#ffffff"));
    }

    #[test]
    fn curve_chart_has_one_line_per_variant() {
        let text = "variant,epoch,mean,std\nme,4,3.0,0.5\nme,8,2.0,0.5\nme-ls,4,2.5,0.1\nme-ls,8,1.0,0.1\n";
        let svg = curves(text, "c", "distance").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 2);
    }
}

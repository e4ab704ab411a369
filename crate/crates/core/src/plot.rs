//! Deterministic SVG rendering of sampled trajectories.
//!
//! The output depends only on the input rows and options: coordinates are
//! printed with two decimals and elements are emitted in input order.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::report::TrajectoryRow;

const PANEL: f64 = 240.0;
const GAP: f64 = 20.0;
const TITLE: f64 = 24.0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotOptions {
    /// Steps to draw, one panel each. Empty selects up to five evenly spaced
    /// steps present in the data.
    pub steps: Vec<usize>,
    /// Draw each chain's path up to the panel's step.
    pub paths: bool,
    /// Target means drawn as stars.
    pub targets: Vec<Vec<f64>>,
}

/// Pick up to five evenly spaced values from sorted distinct `steps`.
fn default_steps(available: &[usize]) -> Vec<usize> {
    if available.len() <= 5 {
        return available.to_vec();
    }
    let last = available.len() - 1;
    let mut picked: Vec<usize> = (0..5).map(|i| available[i * last / 4]).collect();
    picked.dedup();
    picked
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    let mut pts = Vec::with_capacity(10);
    for i in 0..10 {
        let radius = if i % 2 == 0 { r } else { 0.45 * r };
        let a = std::f64::consts::PI * (i as f64) / 5.0 - std::f64::consts::FRAC_PI_2;
        pts.push(format!("{:.2},{:.2}", cx + radius * a.cos(), cy + radius * a.sin()));
    }
    pts.join(" ")
}

/// Render panels of 2-D trajectory states (the first two coordinates).
pub fn render_svg(rows: &[TrajectoryRow], opts: &PlotOptions) -> String {
    let mut by_step: BTreeMap<usize, Vec<&TrajectoryRow>> = BTreeMap::new();
    for r in rows {
        by_step.entry(r.step).or_default().push(r);
    }
    let available: Vec<usize> = by_step.keys().copied().collect();
    let steps = if opts.steps.is_empty() {
        default_steps(&available)
    } else {
        opts.steps.clone()
    };

    let coords = |p: &[f64]| (p.first().copied().unwrap_or(0.0), p.get(1).copied().unwrap_or(0.0));
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in rows
        .iter()
        .map(|r| r.x.as_slice())
        .chain(opts.targets.iter().map(Vec::as_slice))
    {
        let (x, y) = coords(p);
        lo = (lo.0.min(x), lo.1.min(y));
        hi = (hi.0.max(x), hi.1.max(y));
    }
    if !lo.0.is_finite() {
        lo = (-1.0, -1.0);
        hi = (1.0, 1.0);
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-9) * 1.1;
    let centre = ((lo.0 + hi.0) / 2.0, (lo.1 + hi.1) / 2.0);
    let map = |x: f64, y: f64, ox: f64| {
        (
            ox + (x - centre.0 + span / 2.0) / span * PANEL,
            TITLE + (centre.1 + span / 2.0 - y) / span * PANEL,
        )
    };

    let n_panels = steps.len().max(1);
    let width = n_panels as f64 * PANEL + (n_panels + 1) as f64 * GAP;
    let height = PANEL + TITLE + GAP;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#
    );
    let panels: Vec<Option<usize>> = if steps.is_empty() {
        vec![None]
    } else {
        steps.iter().map(|&k| Some(k)).collect()
    };
    for (i, step) in panels.iter().enumerate() {
        let ox = GAP + i as f64 * (PANEL + GAP);
        let _ = writeln!(s, r#"<g id="panel-{i}">"#);
        let _ = writeln!(
            s,
            r#"<rect x="{ox:.2}" y="{TITLE:.2}" width="{PANEL:.2}" height="{PANEL:.2}" fill="none" stroke="black"/>"#
        );
        // Axes through the origin when it is inside the panel.
        let (ax, ay) = map(0.0, 0.0, ox);
        if (ox..=ox + PANEL).contains(&ax) {
            let _ = writeln!(
                s,
                r##"<line x1="{ax:.2}" y1="{TITLE:.2}" x2="{ax:.2}" y2="{:.2}" stroke="#999999" stroke-width="0.5"/>"##,
                TITLE + PANEL
            );
        }
        if (TITLE..=TITLE + PANEL).contains(&ay) {
            let _ = writeln!(
                s,
                r##"<line x1="{ox:.2}" y1="{ay:.2}" x2="{:.2}" y2="{ay:.2}" stroke="#999999" stroke-width="0.5"/>"##,
                ox + PANEL
            );
        }
        if let Some(step) = step {
            let pts = by_step.get(step).map(Vec::as_slice).unwrap_or(&[]);
            let title = pts
                .first()
                .map(|r| format!("step {step}, t = {:.3}", r.t))
                .unwrap_or(format!("step {step}"));
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="16" font-family="sans-serif" font-size="12" text-anchor="middle">{title}</text>"#,
                ox + PANEL / 2.0
            );
            if opts.paths {
                let mut chains: BTreeMap<usize, Vec<&TrajectoryRow>> = BTreeMap::new();
                for r in rows.iter().filter(|r| r.step <= *step) {
                    chains.entry(r.chain).or_default().push(r);
                }
                for path in chains.values_mut() {
                    path.sort_by_key(|r| r.step);
                    let pts: Vec<String> = path
                        .iter()
                        .map(|r| {
                            let (x, y) = coords(&r.x);
                            let (px, py) = map(x, y, ox);
                            format!("{px:.2},{py:.2}")
                        })
                        .collect();
                    let _ = writeln!(
                        s,
                        r##"<polyline points="{}" fill="none" stroke="#4c72b0" stroke-opacity="0.25" stroke-width="0.6"/>"##,
                        pts.join(" ")
                    );
                }
            }
            for r in pts {
                let (x, y) = coords(&r.x);
                let (px, py) = map(x, y, ox);
                let _ = writeln!(s, r##"<circle cx="{px:.2}" cy="{py:.2}" r="1.5" fill="#1f77b4"/>"##);
            }
        }
        for tgt in &opts.targets {
            let (x, y) = coords(tgt);
            let (px, py) = map(x, y, ox);
            let _ = writeln!(s, r##"<polygon points="{}" fill="#d62728"/>"##, star(px, py, 7.0));
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    s
}

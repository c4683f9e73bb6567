//! CSV artifacts and the frontier step plot.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::Path;

use anyhow::Context;
use earlystop::eval::{Frontier, ParetoPoint};
use earlystop::train::Method;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StatsRow {
    pub epoch: usize,
    pub loss: f64,
    pub loss_yhat: f64,
    pub loss_pi: f64,
    pub val_accuracy: f64,
    pub val_mean_t: f64,
}

#[derive(Serialize)]
struct PointRow {
    method: Method,
    mu: f64,
    epoch: usize,
    #[serde(rename = "mean_T")]
    mean_t: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct FrontierRow {
    #[serde(rename = "mean_T")]
    mean_t: f64,
    accuracy: f64,
    mu: f64,
    epoch: usize,
}

#[derive(Serialize)]
struct AucRow {
    method: Method,
    auc: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends to an existing stats file (resumed runs) or starts a new one.
pub fn write_stats(path: &Path, rows: &[StatsRow], append: bool) -> anyhow::Result<()> {
    if append && path.exists() {
        let file = OpenOptions::new().append(true).open(path)?;
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    } else {
        write_rows(path, rows.iter().copied())
    }
}

pub fn write_points(path: &Path, points: &[ParetoPoint]) -> anyhow::Result<()> {
    write_rows(
        path,
        points.iter().map(|p| PointRow {
            method: p.method,
            mu: p.mu,
            epoch: p.epoch,
            mean_t: p.mean_t,
            accuracy: p.accuracy,
        }),
    )
}

pub fn write_frontier(path: &Path, frontier: &Frontier) -> anyhow::Result<()> {
    write_rows(
        path,
        frontier.points.iter().map(|p| FrontierRow {
            mean_t: p.mean_t,
            accuracy: p.accuracy,
            mu: p.mu,
            epoch: p.epoch,
        }),
    )
}

pub fn write_auc(path: &Path, aucs: &[(Method, f64)]) -> anyhow::Result<()> {
    write_rows(
        path,
        aucs.iter().map(|&(method, auc)| AucRow { method, auc }),
    )
}

const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

/// Step plot of each frontier on `[0, t_end] x [0, 1]`.
pub fn frontier_svg(frontiers: &[(Method, Frontier)], t_end: f64) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let x = |t: f64| pad + (w - 2.0 * pad) * t / t_end;
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{:.1} {:.1} L{:.1} {:.1} L{:.1} {:.1}" fill="none" stroke="black"/>"#,
        x(0.0),
        y(1.0),
        x(0.0),
        y(0.0),
        x(t_end),
        y(0.0)
    );
    for tick in 0..=4 {
        let a = tick as f64 / 4.0;
        let t = t_end * a;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{a:.2}</text>"#,
            x(0.0) - 6.0,
            y(a) + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.0}</text>"#,
            x(t),
            y(0.0) + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">mean stopping step</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">accuracy</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (method, frontier)) in frontiers.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for (j, p) in frontier.points.iter().enumerate() {
            let next = frontier.points.get(j + 1).map_or(t_end, |q| q.mean_t);
            let cmd = if j == 0 { 'M' } else { 'L' };
            let _ = write!(
                d,
                "{cmd}{:.1} {:.1} L{:.1} {:.1} ",
                x(p.mean_t),
                y(p.accuracy),
                x(next),
                y(p.accuracy)
            );
        }
        if !d.is_empty() {
            let _ = writeln!(
                svg,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                d.trim_end()
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{method}</text>"#,
            w - pad - 40.0,
            pad + 16.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(path: &Path, frontiers: &[(Method, Frontier)], t_end: f64) -> anyhow::Result<()> {
    fs::write(path, frontier_svg(frontiers, t_end))
        .with_context(|| format!("writing {}", path.display()))
}

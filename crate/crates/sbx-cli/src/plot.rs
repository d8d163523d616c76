//! Static SVG accuracy plots from a records CSV: one line per
//! (seed, accuracy series), with vertical rules at task boundaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::bail;

use sbx_core::eval::EvalSplit;

use crate::records::{self, Row};

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 210.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;

fn split_color(split: EvalSplit) -> &'static str {
    match split {
        EvalSplit::ValidationCurrent => "#1f77b4",
        EvalSplit::ValidationTask0 => "#d62728",
        EvalSplit::TestSeen => "#2ca02c",
    }
}

fn seed_opacity(rank: usize) -> f64 {
    match rank % 3 {
        0 => 0.95,
        1 => 0.65,
        _ => 0.45,
    }
}

/// Renders the accuracy series of a records CSV to an SVG file.
pub fn emit_plot(csv_path: &Path, out_path: &Path) -> anyhow::Result<()> {
    let rows = records::parse_file(csv_path)?;
    let svg = render_svg(&rows)?;
    std::fs::write(out_path, svg)?;
    Ok(())
}

pub fn render_svg(rows: &[Row]) -> anyhow::Result<String> {
    let accuracy: Vec<&Row> = rows
        .iter()
        .filter(|r| r.metric == "accuracy" && EvalSplit::parse(&r.split).is_some())
        .collect();
    if accuracy.is_empty() {
        bail!("no accuracy records to plot");
    }

    // (seed, split) -> chronological points
    let mut series: BTreeMap<(u64, &str), Vec<(u64, f64)>> = BTreeMap::new();
    let mut max_step = 1u64;
    for r in &accuracy {
        series.entry((r.seed, r.split.as_str())).or_default().push((r.step, r.value));
        max_step = max_step.max(r.step);
    }
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = series.keys().map(|(seed, _)| *seed).collect();
        s.dedup();
        s
    };

    // first evaluated step of each later task marks its boundary
    let mut boundaries: BTreeMap<usize, u64> = BTreeMap::new();
    for r in &accuracy {
        if r.task > 0 {
            let entry = boundaries.entry(r.task).or_insert(r.step);
            *entry = (*entry).min(r.step);
        }
    }

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |step: u64| MARGIN_LEFT + plot_w * step as f64 / max_step as f64;
    let y_of = |acc: f64| MARGIN_TOP + plot_h * (1.0 - acc.clamp(0.0, 1.0));

    let mut svg = String::new();
    writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(svg, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##)?;
    writeln!(
        svg,
        r##"<text x="{}" y="20" font-family="sans-serif" font-size="15" fill="#333">Accuracy over training steps</text>"##,
        MARGIN_LEFT
    )?;

    // y grid and labels
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = y_of(acc);
        writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd" stroke-width="1"/>"##,
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT
        )?;
        writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="#555" text-anchor="end">{acc:.1}</text>"##,
            MARGIN_LEFT - 8.0,
            y + 4.0
        )?;
    }
    // x ticks
    for i in 0..=5 {
        let step = max_step * i / 5;
        let x = x_of(step);
        writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd" stroke-width="1"/>"##,
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM
        )?;
        writeln!(
            svg,
            r##"<text x="{x:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="#555" text-anchor="middle">{step}</text>"##,
            HEIGHT - MARGIN_BOTTOM + 16.0
        )?;
    }
    writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" fill="#333" text-anchor="middle">step</text>"##,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    )?;

    // task boundaries
    for (task, step) in &boundaries {
        let x = x_of(*step);
        writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#999" stroke-width="1" stroke-dasharray="5,4"/>"##,
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM
        )?;
        writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" fill="#777">T{task}</text>"##,
            x + 3.0,
            MARGIN_TOP + 12.0
        )?;
    }

    // series
    for ((seed, split_name), points) in &series {
        let split = EvalSplit::parse(split_name).expect("filtered above");
        let color = split_color(split);
        let rank = seeds.iter().position(|s| s == seed).unwrap_or(0);
        let opacity = seed_opacity(rank);
        if points.len() == 1 {
            let (step, acc) = points[0];
            writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" fill-opacity="{opacity}"/>"##,
                x_of(step),
                y_of(acc)
            )?;
        } else {
            let coords: Vec<String> = points
                .iter()
                .map(|(step, acc)| format!("{:.2},{:.2}", x_of(*step), y_of(*acc)))
                .collect();
            writeln!(
                svg,
                r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6" stroke-opacity="{opacity}"/>"##,
                coords.join(" ")
            )?;
        }
    }

    // legend
    let legend_x = WIDTH - MARGIN_RIGHT + 14.0;
    let mut legend_y = MARGIN_TOP + 6.0;
    for ((seed, split_name), _) in &series {
        let split = EvalSplit::parse(split_name).expect("filtered above");
        let color = split_color(split);
        let rank = seeds.iter().position(|s| s == seed).unwrap_or(0);
        writeln!(
            svg,
            r##"<line x1="{legend_x:.1}" y1="{legend_y:.1}" x2="{:.1}" y2="{legend_y:.1}" stroke="{color}" stroke-width="2" stroke-opacity="{}"/>"##,
            legend_x + 20.0,
            seed_opacity(rank)
        )?;
        writeln!(
            svg,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="#333">{split_name} (seed {seed})</text>"##,
            legend_x + 26.0,
            legend_y + 4.0
        )?;
        legend_y += 16.0;
    }

    writeln!(svg, "</svg>")?;
    Ok(svg)
}

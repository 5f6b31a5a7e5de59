//! Report emission: records CSV, summary tables, alpha grid, and an SVG
//! strip/box plot of the Dice distributions. Output bytes are
//! deterministic for a given report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::volume::Organ;
use crate::{Error, Result};

use super::{AlphaGrid, MetricsReport};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Emit the records CSV, the Avg/SD/Min/Max markdown summary, and the
/// per-organ SVG plot. Returns the written paths.
///
/// Numeric values print in round-trip form so recomputation from the CSV
/// reproduces the markdown aggregates exactly.
pub fn emit_report(
    report: &MetricsReport,
    out_dir: impl AsRef<Path>,
    run_id: &str,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    if report.records.is_empty() {
        return Err(Error::InvalidConfig("cannot emit an empty report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    // Records CSV.
    let mut csv = String::from("case_id,fold,alpha_train,alpha_test,organ,dice\n");
    for r in &report.records {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.case_id,
            r.fold,
            r.alpha_train,
            r.alpha_test,
            r.organ.name(),
            r.dice
        )
        .expect("string write");
    }
    let csv_path = out_dir.join(format!("{run_id}_records.csv"));
    write_file(&csv_path, &csv)?;
    written.push(csv_path);

    // Markdown summary in the Avg/SD/Min/Max layout.
    let aggs = report.aggregates();
    let mut md = String::new();
    writeln!(md, "# Dice summary — {run_id}\n").expect("string write");
    if let Some(note) = &report.overlap_note {
        writeln!(md, "> note: {note}\n").expect("string write");
    }
    write!(md, "| |").expect("string write");
    for a in &aggs {
        write!(md, " {} |", a.organ.name()).expect("string write");
    }
    writeln!(md).expect("string write");
    write!(md, "|---|").expect("string write");
    for _ in &aggs {
        write!(md, "---|").expect("string write");
    }
    writeln!(md).expect("string write");
    for (label, pick) in [
        ("Avg.", 0usize),
        ("SD", 1),
        ("Min.", 2),
        ("Max.", 3),
    ] {
        write!(md, "| {label} |").expect("string write");
        for a in &aggs {
            let v = match pick {
                0 => a.avg,
                1 => a.sd,
                2 => a.min,
                _ => a.max,
            };
            write!(md, " {v} |").expect("string write");
        }
        writeln!(md).expect("string write");
    }
    writeln!(md, "\ncases per organ: {}", aggs.first().map_or(0, |a| a.count))
        .expect("string write");
    let md_path = out_dir.join(format!("{run_id}_summary.md"));
    write_file(&md_path, &md)?;
    written.push(md_path);

    // SVG strip + box plot, one group per organ.
    let svg_path = out_dir.join(format!("{run_id}_dice.svg"));
    write_file(&svg_path, &render_svg(report))?;
    written.push(svg_path);

    Ok(written)
}

/// Emit the alpha-grid markdown (rows alpha_train-alpha_test, one column
/// per organ, best-per-group values wrapped in `**`).
pub fn emit_alpha_report(
    grid: &AlphaGrid,
    out_dir: impl AsRef<Path>,
    run_id: &str,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    if grid.cells.is_empty() {
        return Err(Error::InvalidConfig("cannot emit an empty alpha grid".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut md = String::new();
    writeln!(md, "# Dice by blending weight — {run_id}\n").expect("string write");
    write!(md, "| alpha_train-alpha_test |").expect("string write");
    for organ in Organ::ALL {
        write!(md, " {} |", organ.name()).expect("string write");
    }
    writeln!(md).expect("string write");
    write!(md, "|---|").expect("string write");
    for _ in Organ::ALL {
        write!(md, "---|").expect("string write");
    }
    writeln!(md).expect("string write");
    for cell in &grid.cells {
        write!(md, "| {}-{} |", cell.alpha_train, cell.alpha_test).expect("string write");
        for oi in 0..4 {
            if cell.best[oi] {
                write!(md, " **{}** |", cell.organ_mean[oi]).expect("string write");
            } else {
                write!(md, " {} |", cell.organ_mean[oi]).expect("string write");
            }
        }
        writeln!(md).expect("string write");
    }
    writeln!(md, "\nBold marks the best value per organ within an alpha_train group.")
        .expect("string write");

    let path = out_dir.join(format!("{run_id}_alpha_grid.md"));
    write_file(&path, &md)?;
    Ok(path)
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_B: f64 = 50.0;
const MARGIN_T: f64 = 30.0;

fn y_of(dice: f64) -> f64 {
    let plot_h = SVG_H - MARGIN_B - MARGIN_T;
    MARGIN_T + (1.0 - dice.clamp(0.0, 1.0)) * plot_h
}

fn render_svg(report: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>"#
    )
    .expect("string write");
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    )
    .expect("string write");
    writeln!(s, r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#).expect("string write");

    // Axis and gridlines at 0.0 .. 1.0.
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let y = y_of(v);
        writeln!(
            s,
            r#"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd" stroke-width="1"/>"#,
            SVG_W - 20.0
        )
        .expect("string write");
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end" fill="#333333">{v:.1}</text>"#,
            MARGIN_L - 6.0,
            y + 4.0
        )
        .expect("string write");
    }

    let lane = (SVG_W - MARGIN_L - 20.0) / 4.0;
    let colors = ["#e69f00", "#56b4e9", "#009e73", "#cc79a7"];
    for (oi, organ) in Organ::ALL.iter().enumerate() {
        let mut values: Vec<(usize, f64)> = report
            .records
            .iter()
            .filter(|r| r.organ == *organ)
            .map(|r| (r.fold, r.dice))
            .collect();
        let cx = MARGIN_L + lane * (oi as f64 + 0.5);
        writeln!(s, r#"<g id="organ-{}">"#, organ.name().replace('.', "-")).expect("string write");
        if !values.is_empty() {
            values.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite dice"));
            let q = |f: f64| -> f64 {
                let pos = f * (values.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = pos - lo as f64;
                values[lo].1 * (1.0 - frac) + values[hi].1 * frac
            };
            let (min, q1, med, q3, max) = (values[0].1, q(0.25), q(0.5), q(0.75), values[values.len() - 1].1);
            let half = lane * 0.18;
            // Whiskers and box.
            writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#555555" stroke-width="1"/>"#,
                y_of(min),
                y_of(max)
            )
            .expect("string write");
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.35" stroke="#555555"/>"#,
                cx - half,
                y_of(q3),
                2.0 * half,
                (y_of(q1) - y_of(q3)).max(0.5),
                colors[oi]
            )
            .expect("string write");
            writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#222222" stroke-width="1.5"/>"#,
                cx - half,
                y_of(med),
                cx + half,
                y_of(med)
            )
            .expect("string write");
            // Strip points, fanned out per fold.
            for &(fold, d) in &values {
                let dx = ((fold as f64) - 1.0) * 6.0;
                writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.9"/>"#,
                    cx + dx,
                    y_of(d),
                    colors[oi]
                )
                .expect("string write");
            }
        }
        writeln!(
            s,
            r#"<text x="{cx:.2}" y="{:.2}" font-size="12" text-anchor="middle" fill="#333333">{}</text>"#,
            SVG_H - MARGIN_B + 20.0,
            organ.name()
        )
        .expect("string write");
        writeln!(s, "</g>").expect("string write");
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle" fill="#333333" transform="rotate(-90 14 {:.2})">Dice</text>"#,
        14.0,
        SVG_H / 2.0,
        SVG_H / 2.0
    )
    .expect("string write");
    writeln!(s, "</svg>").expect("string write");
    s
}

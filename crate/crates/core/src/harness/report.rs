//! Summaries and plots of result CSVs.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

/// A loaded CSV: `#` header lines, the column row, and the data rows.
/// Rows whose field count does not match the header are skipped and
/// counted.
#[derive(Debug, Default)]
pub struct CsvTable {
    pub meta: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub skipped: usize,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path)?;
    let mut table = CsvTable::default();
    for line in text.lines() {
        if line.starts_with('#') {
            table.meta.push(line.to_string());
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if table.columns.is_empty() {
            table.columns = fields;
        } else if fields.len() == table.columns.len() {
            table.rows.push(fields);
        } else {
            table.skipped += 1;
        }
    }
    Ok(table)
}

/// Fixed-width text rendering of a table.
pub fn render_table(columns: &[String], rows: &[Vec<String>]) -> String {
    if columns.is_empty() {
        return String::new();
    }
    let mut widths: Vec<usize> = columns.iter().map(|c| c.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:<w$}", c, w = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    out.push_str(&fmt_row(columns, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

/// Group ablation rows into a per-config summary (mean rows only) and the
/// grand means of per-seed mIoU, which must equal the hand average.
pub fn summarize_ablation(table: &CsvTable) -> Result<String> {
    let (Some(cfg_i), Some(seed_i), Some(domain_i), Some(miou_i)) = (
        table.column("config"),
        table.column("seed"),
        table.column("domain"),
        table.column("miou"),
    ) else {
        return Err(Error::format("csv", "not an ablation table"));
    };
    let mut rows = Vec::new();
    for r in &table.rows {
        if r[seed_i] == "mean" {
            rows.push(vec![r[cfg_i].clone(), r[domain_i].clone(), r[miou_i].clone()]);
        }
    }
    if rows.is_empty() {
        return Ok("(no mean rows)".into());
    }
    Ok(render_table(
        &["config".into(), "domain".into(), "mean_miou".into()],
        &rows,
    ))
}

/// Summarize a loss curve: first/last/min of the total column.
pub fn summarize_loss(table: &CsvTable) -> Result<String> {
    let total_i = table
        .column("total")
        .ok_or_else(|| Error::format("csv", "not a loss table"))?;
    let totals: Vec<f64> = table
        .rows
        .iter()
        .filter_map(|r| r[total_i].parse::<f64>().ok())
        .collect();
    if totals.is_empty() {
        return Ok("(empty loss table)".into());
    }
    let min = totals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "iterations: {}\nfirst total: {:.6}\nlast total:  {:.6}\nmin total:   {:.6}\n",
        totals.len(),
        totals[0],
        totals[totals.len() - 1],
        min
    ))
}

/// Minimal SVG line plot of one or more named series over a shared x
/// axis. Axis ranges cover the min/max of the data exactly.
pub fn plot_series_svg(
    path: &Path,
    title: &str,
    x: &[f64],
    series: &[(&str, Vec<f64>)],
) -> Result<()> {
    if x.is_empty() || series.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    let xmin = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ymin = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().cloned())
        .fold(f64::INFINITY, f64::min);
    let ymax = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().cloned())
        .fold(f64::NEG_INFINITY, f64::max);
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let sx = |v: f64| M + (v - xmin) / xspan * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - ymin) / yspan * (H - 2.0 * M);

    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        title
    ));
    // Axes with min/max tick labels.
    svg.push_str(&format!(
        "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - M,
        W - M,
        H - M
    ));
    svg.push_str(&format!("<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>\n", H - M));
    svg.push_str(&format!(
        "<text x=\"{M}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{xmin:.0}</text>\n",
        H - M + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\">{xmax:.0}</text>\n",
        W - M,
        H - M + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\">{ymin:.4}</text>\n",
        M - 4.0,
        H - M
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\">{ymax:.4}</text>\n",
        M - 4.0,
        M + 10.0
    ));
    for (si, (name, ys)) in series.iter().enumerate() {
        let color = palette[si % palette.len()];
        let pts: Vec<String> = x
            .iter()
            .zip(ys.iter())
            .map(|(&xv, &yv)| format!("{:.2},{:.2}", sx(xv), sy(yv)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            W - M + 4.0 - 120.0,
            M + 16.0 * si as f64
        ));
    }
    svg.push_str("</svg>\n");
    let mut f = std::fs::File::create(path)?;
    f.write_all(svg.as_bytes())?;
    Ok(())
}

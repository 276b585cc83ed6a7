//! Deterministic SVG/CSV figure emission from run artifacts: the sorted
//! average-trace curve (log-scale ordinate), per-layer average-QBN bars, and
//! the loss-landscape surface. Every SVG has a CSV twin holding the same
//! numbers.

use crate::alloc::sort_channels;
use crate::error::{Error, Result};
use crate::pipeline::{
    RunReport, ACT_POLICY_FILE, ACT_TRACE_FILE, LANDSCAPE_FILE, REPORT_FILE, W_POLICY_FILE,
    W_TRACE_FILE,
};
use crate::trace::TraceReport;
use std::fmt::Write as _;
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn read_artifact(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::Data(format!("missing artifact: {}", p.display())));
    }
    std::fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| Error::io(p.display().to_string(), e))
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    );
}

fn axis_box(out: &mut String) {
    let _ = write!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"black\" stroke-width=\"1\"/>\n",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
}

/// Signed log magnitude used for the trace ordinate: log10(|v| + floor).
fn log_mag(v: f64) -> f64 {
    (v.abs() + 1e-18).log10()
}

fn sorted_trace_figure(report: &TraceReport, title: &str) -> (String, String) {
    let sorted = sort_channels(report).expect("channel report sorts");
    let mut csv = String::from("rank,layer,channel,average_trace,elements\n");
    for (rank, e) in sorted.entries.iter().enumerate() {
        let _ = writeln!(csv, "{rank},{},{},{},{}", e.layer, e.channel, e.average, e.elements);
    }

    let n = sorted.entries.len();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in &sorted.entries {
        let m = log_mag(e.average);
        lo = lo.min(m);
        hi = hi.max(m);
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }
    let mut svg = String::new();
    svg_open(&mut svg, title);
    axis_box(&mut svg);
    let mut points = String::new();
    for (rank, e) in sorted.entries.iter().enumerate() {
        let x = MARGIN + (W - 2.0 * MARGIN) * rank as f64 / (n.max(2) - 1) as f64;
        let y = H - MARGIN - (H - 2.0 * MARGIN) * (log_mag(e.average) - lo) / (hi - lo);
        let _ = write!(points, "{x:.6},{y:.6} ");
    }
    let _ = write!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
        points.trim_end()
    );
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
         text-anchor=\"middle\">channel rank (trace descending); ordinate: log10 |average trace|</text>\n",
        W / 2.0,
        H - 12.0
    );
    svg.push_str("</svg>\n");
    (svg, csv)
}

fn qbn_bars_figure(per_layer: &[(String, f64)], title: &str) -> (String, String) {
    let mut csv = String::from("layer,average_qbn\n");
    for (layer, bits) in per_layer {
        let _ = writeln!(csv, "{layer},{bits}");
    }
    let mut svg = String::new();
    svg_open(&mut svg, title);
    axis_box(&mut svg);
    let n = per_layer.len().max(1);
    let band = (W - 2.0 * MARGIN) / n as f64;
    for (i, (layer, bits)) in per_layer.iter().enumerate() {
        let bh = (H - 2.0 * MARGIN) * (bits / 8.0);
        let x = MARGIN + band * i as f64 + band * 0.15;
        let y = H - MARGIN - bh;
        let _ = write!(
            svg,
            "<rect x=\"{x:.6}\" y=\"{y:.6}\" width=\"{:.6}\" height=\"{bh:.6}\" fill=\"darkseagreen\" stroke=\"black\"/>\n",
            band * 0.7
        );
        let _ = write!(
            svg,
            "<text x=\"{:.6}\" y=\"{:.6}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{layer}</text>\n",
            x + band * 0.35,
            H - MARGIN + 16.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.6}\" y=\"{:.6}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{bits:.2}</text>\n",
            x + band * 0.35,
            y - 4.0
        );
    }
    svg.push_str("</svg>\n");
    (svg, csv)
}

fn landscape_figure(csv_text: &str) -> Result<String> {
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for (i, line) in csv_text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!("landscape csv line {}: '{line}'", i + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Data(format!("landscape csv line {}: bad number '{s}'", i + 1)))
        };
        rows.push((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?));
    }
    if rows.is_empty() {
        return Err(Error::Data("landscape csv has no rows".into()));
    }
    let steps = (rows.len() as f64).sqrt().round() as usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &rows {
        lo = lo.min(r.2);
        hi = hi.max(r.2);
    }
    let span = (hi - lo).max(1e-18);
    let mut svg = String::new();
    svg_open(&mut svg, "loss landscape (channel perturbation)");
    let cell = ((W - 2.0 * MARGIN) / steps as f64).min((H - 2.0 * MARGIN) / steps as f64);
    for (k, (_, _, loss)) in rows.iter().enumerate() {
        let (i, j) = (k / steps, k % steps);
        let t = (loss - lo) / span;
        let shade = (255.0 - t * 200.0).round() as u8;
        let x = MARGIN + cell * i as f64;
        let y = MARGIN + cell * j as f64;
        let _ = write!(
            svg,
            "<rect x=\"{x:.6}\" y=\"{y:.6}\" width=\"{cell:.6}\" height=\"{cell:.6}\" \
             fill=\"rgb(255,{shade},{shade})\" stroke=\"none\"/>\n"
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
         text-anchor=\"middle\">loss range [{lo:.6}, {hi:.6}]</text>\n",
        W / 2.0,
        H - 12.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Emit all figures for a run directory. The landscape figure is produced
/// only when its table exists (it comes from the separate landscape command).
pub fn emit_plots(run_dir: &Path) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let report = RunReport::from_json(&read_artifact(run_dir, REPORT_FILE)?)?;

    for (trace_file, stem, title) in [
        (W_TRACE_FILE, "sorted_trace_weights", "sorted average weight-Hessian trace"),
        (ACT_TRACE_FILE, "sorted_trace_activations", "sorted average activation-Hessian trace"),
    ] {
        let report_json = read_artifact(run_dir, trace_file)?;
        let trace = TraceReport::from_json(&report_json)?;
        let (svg, csv) = sorted_trace_figure(&trace, title);
        write_file(run_dir, &format!("{stem}.svg"), &svg)?;
        write_file(run_dir, &format!("{stem}.csv"), &csv)?;
        written.push(format!("{stem}.svg"));
        written.push(format!("{stem}.csv"));
    }

    // policies must exist alongside the report
    for f in [ACT_POLICY_FILE, W_POLICY_FILE] {
        read_artifact(run_dir, f)?;
    }
    for (per_layer, stem, title) in [
        (&report.per_layer_qbn_weights, "qbn_weights", "average weight QBN per layer"),
        (&report.per_layer_qbn_activations, "qbn_activations", "average activation QBN per layer"),
    ] {
        let (svg, csv) = qbn_bars_figure(per_layer, title);
        write_file(run_dir, &format!("{stem}.svg"), &svg)?;
        write_file(run_dir, &format!("{stem}.csv"), &csv)?;
        written.push(format!("{stem}.svg"));
        written.push(format!("{stem}.csv"));
    }

    if run_dir.join(LANDSCAPE_FILE).exists() {
        let csv = read_artifact(run_dir, LANDSCAPE_FILE)?;
        let svg = landscape_figure(&csv)?;
        write_file(run_dir, "landscape.svg", &svg)?;
        written.push("landscape.svg".into());
    }
    Ok(written)
}

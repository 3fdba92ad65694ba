//! CSV series and static SVG charts. Output depends only on the inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gwa_core::trace::AlignmentRow;

use crate::analysis::rows_for_epoch;
use crate::error::HarnessError;
use crate::report::RunReport;

pub const HISTOGRAM_BINS: usize = 40;
pub const SERIES_CSV: &str = "series.csv";
pub const SERIES_SVG: &str = "series.svg";
pub const HISTOGRAMS_CSV: &str = "histograms.csv";

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Bin counts over [-1, 1]; values outside are clamped into the end bins.
pub fn histogram(gammas: impl IntoIterator<Item = f64>, bins: usize) -> Vec<u64> {
    let mut counts = vec![0u64; bins];
    for g in gammas {
        let pos = ((g + 1.0) / 2.0 * bins as f64).floor();
        let i = (pos.max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

/// Min-max normalization; constant series map to 0.5.
pub fn normalize(xs: &[Option<f64>]) -> Vec<Option<f64>> {
    let vals = xs.iter().flatten();
    let lo = vals.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.cloned().fold(f64::NEG_INFINITY, f64::max);
    xs.iter()
        .map(|x| x.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }))
        .collect()
}

fn cell(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v}"))
}

pub fn series_csv(report: &RunReport) -> String {
    let mut s = String::from(
        "epoch,train_loss,train_accuracy,clean_train_accuracy,val_accuracy,test_accuracy,gwa,m1,excess_kurtosis,labelwave_change\n",
    );
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            cell(Some(e.train_loss)),
            cell(Some(e.train_accuracy)),
            cell(Some(e.clean_train_accuracy)),
            cell(e.val_accuracy),
            cell(e.test_accuracy),
            cell(e.gwa),
            cell(Some(e.m1)),
            cell(e.excess_kurtosis),
            cell(e.labelwave_change),
        );
    }
    s
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s
}

/// Overlay of min-max normalized series with a marker at `selected`.
pub fn series_svg(report: &RunReport) -> String {
    let mut s = svg_open("normalized series");
    let n = report.epochs.len();
    let x = |i: usize| PAD + (W - 2.0 * PAD) * if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v;
    let series: [(&str, Vec<Option<f64>>); 5] = [
        ("gwa", report.epochs.iter().map(|e| e.gwa).collect()),
        ("m1", report.epochs.iter().map(|e| Some(e.m1)).collect()),
        ("val accuracy", report.epochs.iter().map(|e| e.val_accuracy).collect()),
        ("test accuracy", report.epochs.iter().map(|e| e.test_accuracy).collect()),
        ("train accuracy", report.epochs.iter().map(|e| Some(e.train_accuracy)).collect()),
    ];
    for (k, (name, vals)) in series.iter().enumerate() {
        let pts: Vec<String> = normalize(vals)
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", x(i), y(v))))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{name}</text>",
            COLORS[k],
            pts.join(" "),
            W - PAD - 95.0,
            PAD + 14.0 + 13.0 * k as f64,
            COLORS[k]
        );
    }
    if let Some(d) = &report.decisions.gwa_scratch {
        if let Some(i) = report.epochs.iter().position(|e| e.epoch == d.selected_epoch) {
            let _ = writeln!(
                s,
                "<line x1=\"{0:.2}\" y1=\"{PAD}\" x2=\"{0:.2}\" y2=\"{1:.1}\" stroke=\"#000\" stroke-dasharray=\"4 3\"/>",
                x(i),
                H - PAD
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of one or two histograms sharing the [-1, 1] bins.
pub fn histogram_svg(title: &str, groups: &[(&str, &[u64])]) -> String {
    let mut s = svg_open(title);
    let bins = groups.first().map_or(0, |g| g.1.len());
    let max = groups.iter().flat_map(|g| g.1.iter()).copied().max().unwrap_or(0).max(1) as f64;
    let bw = (W - 2.0 * PAD) / bins.max(1) as f64;
    let sub = bw / groups.len().max(1) as f64;
    for (k, (name, counts)) in groups.iter().enumerate() {
        for (i, &c) in counts.iter().enumerate() {
            let h = (H - 2.0 * PAD) * c as f64 / max;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" fill-opacity=\"0.8\"/>",
                PAD + i as f64 * bw + k as f64 * sub,
                H - PAD - h,
                sub,
                h,
                COLORS[k]
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{}\">{name}</text>",
            W - PAD - 95.0,
            PAD + 14.0 + 13.0 * k as f64,
            COLORS[k]
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">-1</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">1</text>",
        H - PAD + 14.0,
        W - PAD - 6.0,
        H - PAD + 14.0
    );
    s.push_str("</svg>\n");
    s
}

/// Per-epoch histogram table: all defined scores, plus the clean and
/// flipped split when the mask is known.
pub fn histograms_csv(report: &RunReport, rows: &[AlignmentRow], flipped: Option<&[bool]>) -> String {
    let mut s = String::from("epoch,bin,lo,hi,count,clean,flipped\n");
    for e in &report.epochs {
        let (all, clean, flip) = split_histograms(rows, e.epoch, flipped);
        for b in 0..HISTOGRAM_BINS {
            let lo = -1.0 + 2.0 * b as f64 / HISTOGRAM_BINS as f64;
            let hi = -1.0 + 2.0 * (b + 1) as f64 / HISTOGRAM_BINS as f64;
            let (c, f) = match (&clean, &flip) {
                (Some(c), Some(f)) => (c[b].to_string(), f[b].to_string()),
                _ => (String::new(), String::new()),
            };
            let _ = writeln!(s, "{},{b},{lo},{hi},{},{c},{f}", e.epoch, all[b]);
        }
    }
    s
}

type Split = (Vec<u64>, Option<Vec<u64>>, Option<Vec<u64>>);

fn split_histograms(rows: &[AlignmentRow], epoch: u32, flipped: Option<&[bool]>) -> Split {
    let defined = || rows_for_epoch(rows, epoch).filter_map(|r| r.gamma().map(|g| (r.sample_id, g as f64)));
    let all = histogram(defined().map(|(_, g)| g), HISTOGRAM_BINS);
    match flipped {
        Some(mask) => {
            let is_f = |id: u64| mask.get(id as usize).copied().unwrap_or(false);
            let clean = histogram(defined().filter(|(id, _)| !is_f(*id)).map(|(_, g)| g), HISTOGRAM_BINS);
            let flip = histogram(defined().filter(|(id, _)| is_f(*id)).map(|(_, g)| g), HISTOGRAM_BINS);
            (all, Some(clean), Some(flip))
        }
        None => (all, None, None),
    }
}

/// Writes `series.csv` and `series.svg`, and with per-sample rows the
/// histogram table plus histograms of the first, selected and last epoch
/// (and a clean/flipped split at the selected epoch when the mask is
/// known). Returns the written paths.
pub fn emit_plots(
    report: &RunReport,
    rows: Option<&[AlignmentRow]>,
    flipped: Option<&[bool]>,
    dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), HarnessError> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put(SERIES_CSV.into(), series_csv(report))?;
    put(SERIES_SVG.into(), series_svg(report))?;
    let flipped = flipped.filter(|m| m.iter().any(|&f| f));
    if let Some(rows) = rows.filter(|r| !r.is_empty()) {
        put(HISTOGRAMS_CSV.into(), histograms_csv(report, rows, flipped))?;
        let selected = report.decisions.gwa_scratch.as_ref().map(|d| d.selected_epoch);
        let mut epochs: Vec<u32> = [report.epochs.first().map(|e| e.epoch), selected, report.epochs.last().map(|e| e.epoch)]
            .into_iter()
            .flatten()
            .collect();
        epochs.sort_unstable();
        epochs.dedup();
        for e in epochs {
            let (all, _, _) = split_histograms(rows, e, None);
            put(format!("hist_epoch_{e:04}.svg"), histogram_svg(&format!("alignment, epoch {e}"), &[("all", &all)]))?;
        }
        if let (Some(e), Some(mask)) = (selected, flipped) {
            let (_, clean, flip) = split_histograms(rows, e, Some(mask));
            let (clean, flip) = (clean.unwrap_or_default(), flip.unwrap_or_default());
            put(
                format!("split_epoch_{e:04}.svg"),
                histogram_svg(&format!("clean vs flipped, epoch {e}"), &[("clean", &clean), ("flipped", &flip)]),
            )?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_gives_header_only_csv() {
        let csv = series_csv(&RunReport::default());
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("epoch,"));
    }

    #[test]
    fn histogram_conserves_counts_and_clamps() {
        let h = histogram([-1.0, -0.99, 0.0, 0.5, 1.0, 1.5, -3.0], 4);
        assert_eq!(h, vec![3, 0, 1, 3]);
        assert_eq!(h.iter().sum::<u64>(), 7);
    }

    #[test]
    fn normalization_spans_unit_interval() {
        let n = normalize(&[Some(2.0), None, Some(4.0), Some(3.0)]);
        assert_eq!(n, vec![Some(0.0), None, Some(1.0), Some(0.5)]);
        assert_eq!(normalize(&[Some(1.0), Some(1.0)]), vec![Some(0.5), Some(0.5)]);
    }
}

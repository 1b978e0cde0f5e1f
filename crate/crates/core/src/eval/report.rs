//! `report.csv` and the `pcc_by_subject.svg` grouped bar chart.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::MetricsReport;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "subject_id,model,split,mean_pcc,std_pcc,n_windows,probe_acc";
pub const CSV_NAME: &str = "report.csv";
pub const SVG_NAME: &str = "pcc_by_subject.svg";

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_csv(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InsufficientData("no reports to emit".into()));
    }
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        let probe = r.probe_acc.map(|p| format!("{p}")).unwrap_or_default();
        for s in &r.subjects {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.subject_id,
                field(&r.model),
                r.split.name(),
                s.mean_pcc,
                s.std_pcc,
                s.n_windows,
                probe
            )
            .unwrap();
        }
    }
    Ok(out)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const PALETTE: [&str; 6] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377",
];

/// Bars grouped by subject, one series per (model, split) report.
pub fn report_svg(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::InsufficientData("no reports to plot".into()));
    }
    let subjects: BTreeSet<usize> = reports
        .iter()
        .flat_map(|r| r.subjects.iter().map(|s| s.subject_id))
        .collect();
    let (w, h, left, top, plot_h) = (
        80.0 + 60.0 * subjects.len().max(1) as f64,
        320.0,
        50.0,
        20.0,
        220.0,
    );
    let group_w = 60.0;
    let bar_w = 48.0 / reports.len() as f64;
    // Axis spans [-1, 1] when anything is negative, else [0, 1].
    let lo = if reports
        .iter()
        .flat_map(|r| &r.subjects)
        .any(|s| s.mean_pcc < 0.0)
    {
        -1.0
    } else {
        0.0
    };
    let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (1.0 - lo));

    let mut s = String::new();
    writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">").unwrap();
    writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>").unwrap();
    for tick in [lo, (lo + 1.0) / 2.0, 1.0] {
        writeln!(
            s,
            "<line x1=\"{left:.1}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#cccccc\"/><text x=\"{2:.1}\" y=\"{3:.1}\" font-size=\"10\" text-anchor=\"end\">{tick:.1}</text>",
            y(tick),
            w - 10.0,
            left - 4.0,
            y(tick) + 3.0
        )
        .unwrap();
    }
    for (gi, subj) in subjects.iter().enumerate() {
        let gx = left + 10.0 + gi as f64 * group_w;
        for (ri, r) in reports.iter().enumerate() {
            let Some(sc) = r.subjects.iter().find(|x| x.subject_id == *subj) else {
                continue;
            };
            let (y0, y1) = (y(sc.mean_pcc.max(lo)), y(lo.max(0.0)));
            writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"><title>{} {} subject {}: {:.4}</title></rect>",
                gx + ri as f64 * bar_w,
                y0.min(y1),
                bar_w,
                (y1 - y0).abs(),
                PALETTE[ri % PALETTE.len()],
                esc(&r.model),
                r.split.name(),
                subj,
                sc.mean_pcc
            )
            .unwrap();
        }
        writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{subj}</text>",
            gx + 24.0,
            top + plot_h + 14.0
        )
        .unwrap();
    }
    for (ri, r) in reports.iter().enumerate() {
        let ly = top + plot_h + 34.0 + 14.0 * (ri % 4) as f64;
        let lx = left + 180.0 * (ri / 4) as f64;
        writeln!(
            s,
            "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{:.1}\" y=\"{ly:.1}\" font-size=\"10\">{} ({})</text>",
            ly - 9.0,
            PALETTE[ri % PALETTE.len()],
            lx + 14.0,
            esc(&r.model),
            r.split.name()
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `report.csv` and `pcc_by_subject.svg` into `dir`.
pub fn report_emit(reports: &[MetricsReport], dir: &Path) -> Result<()> {
    let csv = report_csv(reports)?;
    let svg = report_svg(reports)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [(CSV_NAME, csv), (SVG_NAME, svg)] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

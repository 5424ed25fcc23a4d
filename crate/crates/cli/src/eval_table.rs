//! Plain-text metric tables.

use std::fmt::Write;
use std::path::PathBuf;

use cfx_core::eval::{summarize, MetricReport, Summary};

fn pm(s: &Summary) -> String {
    match s.std {
        Some(std) => format!("{:.2} ± {:.2}", s.mean, std),
        None => format!("{:.2}", s.mean),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

pub fn report_text(r: &MetricReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "  instances        {}", r.instances);
    let _ = writeln!(out, "  coverage         {:.2}", r.coverage);
    let _ = writeln!(
        out,
        "  validity         {} (all rows {:.2})",
        opt(r.validity),
        r.validity_all
    );
    let _ = writeln!(out, "  L2               {}", pm(&r.proximity));
    let _ = writeln!(out, "  prob. plaus.     {:.2}", r.prob_plausibility);
    let _ = writeln!(out, "  log density      {}", pm(&r.log_density));
    let _ = writeln!(out, "  groups           {}", r.active_groups);
    out
}

/// One line per bundle and, for several bundles, a mean ± std row.
pub fn summary_table(bundles: &[PathBuf], reports: &[MetricReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}",
        "bundle", "cover", "valid", "l2", "plaus", "logdens", "groups"
    );
    for (b, r) in bundles.iter().zip(reports) {
        let _ = writeln!(
            out,
            "{:<24} {:>8.2} {:>8} {:>8.2} {:>8.2} {:>8.2} {:>7}",
            b.display().to_string(),
            r.coverage,
            opt(r.validity),
            r.proximity.mean,
            r.prob_plausibility,
            r.log_density.mean,
            r.active_groups
        );
    }
    if reports.len() > 1 {
        let col = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            summarize(&v).map_or_else(|| "-".into(), |s| pm(&s))
        };
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>8} {:>8} {:>7}",
            "mean ± std",
            col(&|r| Some(r.coverage)),
            col(&|r| r.validity),
            col(&|r| Some(r.proximity.mean)),
            col(&|r| Some(r.prob_plausibility)),
            col(&|r| Some(r.log_density.mean)),
            col(&|r| Some(r.active_groups as f64))
        );
    }
    out
}

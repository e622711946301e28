//! Metrics tables and their per-window / per-subject summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::CliError;

pub const METRICS_HEADER: &str = "subject,window_s,fold,n_examples,accuracy";
pub const SUMMARY_HEADER: &str = "window_s,mean,n_subjects";
pub const PER_SUBJECT_HEADER: &str = "subject,window_s,mean,min,max";

/// Validation accuracy of one subject at one window length in one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub subject: String,
    pub window_s: f64,
    pub fold: usize,
    pub n_examples: usize,
    pub accuracy: f64,
}

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.subject, r.window_s, r.fold, r.n_examples, r.accuracy));
    }
    s
}

pub fn parse_metrics(text: &str, source: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let bad = |n: usize, why: &str| CliError::Data(format!("{}: line {}: {why}", source.display(), n + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(bad(0, &format!("expected header `{METRICS_HEADER}`"))),
    }
    let mut rows = Vec::new();
    for (n, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(n, "expected 5 fields"));
        }
        let row = MetricsRow {
            subject: f[0].to_string(),
            window_s: f[1].parse().map_err(|_| bad(n, "bad window_s"))?,
            fold: f[2].parse().map_err(|_| bad(n, "bad fold"))?,
            n_examples: f[3].parse().map_err(|_| bad(n, "bad n_examples"))?,
            accuracy: f[4].parse().map_err(|_| bad(n, "bad accuracy"))?,
        };
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(bad(n, "accuracy outside [0, 1]"));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_metrics(&text, path)
}

/// Mean, min and max accuracy over the folds of one subject at one window.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSummary {
    pub subject: String,
    pub window_s: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean over subjects of the per-subject means at one window length.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSummary {
    pub window_s: f64,
    pub mean: f64,
    pub n_subjects: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub summary: Vec<WindowSummary>,
    pub per_subject: Vec<SubjectSummary>,
}

/// Window lengths compare by bit pattern; they are parsed from the same
/// text, so equal durations have equal bits.
fn window_key(w: f64) -> (u64, u64) {
    (w.to_bits() >> 63, w.to_bits())
}

pub fn summarize(rows: &[MetricsRow]) -> Result<Report, CliError> {
    if rows.is_empty() {
        return Err(CliError::Config("no metrics rows to report".into()));
    }
    let mut groups: BTreeMap<((u64, u64), &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((window_key(r.window_s), r.subject.as_str())).or_default().push(r.accuracy);
    }
    let per_subject: Vec<SubjectSummary> = groups
        .iter()
        .map(|((w, subject), accs)| SubjectSummary {
            subject: subject.to_string(),
            window_s: f64::from_bits(w.1),
            mean: accs.iter().sum::<f64>() / accs.len() as f64,
            min: accs.iter().copied().fold(f64::INFINITY, f64::min),
            max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let mut windows: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for s in &per_subject {
        windows.entry(window_key(s.window_s)).or_default().push(s.mean);
    }
    let summary = windows
        .into_iter()
        .map(|(w, means)| WindowSummary {
            window_s: f64::from_bits(w.1),
            mean: means.iter().sum::<f64>() / means.len() as f64,
            n_subjects: means.len(),
        })
        .collect();
    Ok(Report { summary, per_subject })
}

/// Write `summary.csv` and `per_subject.csv` into `out_dir`.
pub fn emit_report(rows: &[MetricsRow], out_dir: &Path) -> Result<Report, CliError> {
    let report = summarize(rows)?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for s in &report.summary {
        summary.push_str(&format!("{},{},{}\n", s.window_s, s.mean, s.n_subjects));
    }
    let mut per = format!("{PER_SUBJECT_HEADER}\n");
    for s in &report.per_subject {
        per.push_str(&format!("{},{},{},{},{}\n", s.subject, s.window_s, s.mean, s.min, s.max));
    }
    super::write_file(&out_dir.join("summary.csv"), &summary)?;
    super::write_file(&out_dir.join("per_subject.csv"), &per)?;
    Ok(report)
}

use std::fmt::Write as _;
use std::path::Path;

use crate::attack::Budget;
use crate::error::{Error, Result};
use crate::synthdata::SplitName;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub term: String,
    pub budget: Budget,
    pub split: SplitName,
    pub successes: usize,
    pub n: usize,
}

impl ReportRow {
    pub fn asr(&self) -> f64 {
        self.successes as f64 / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSample {
    pub term: String,
    pub budget: Budget,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: u64,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub samples: Vec<CaptionSample>,
}

impl EvalReport {
    pub fn new(config_hash: u64, seed: u64) -> Self {
        EvalReport {
            config_hash,
            seed,
            rows: Vec::new(),
            samples: Vec::new(),
        }
    }

    /// Mean ASR over terms for one `(budget, split)` column.
    pub fn mean_asr(&self, budget: Budget, split: SplitName) -> Option<f64> {
        let cells: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.budget == budget && r.split == split)
            .map(ReportRow::asr)
            .collect();
        (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "text" => Some(ReportFormat::Text),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

/// Two decimals, halves rounded up.
pub fn format_asr(asr: f64) -> String {
    // The nudge absorbs representation error such as 0.955 -> 0.95499...
    let cents = (asr * 100.0 + 0.5 + 1e-9).floor();
    format!("{:.2}", cents / 100.0)
}

pub fn provenance_line(config_hash: u64, seed: u64) -> String {
    format!("# config_hash={config_hash:016x} seed={seed}")
}

const COLUMNS: [&str; 5] = ["term", "budget", "split", "ASR", "n"];

pub fn emit_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::invalid("refusing to emit an empty report"));
    }
    let cells: Vec<[String; 5]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.term.clone(),
                r.budget.label(),
                r.split.as_str().to_string(),
                format_asr(r.asr()),
                r.n.to_string(),
            ]
        })
        .collect();
    let mut out = provenance_line(report.config_hash, report.seed);
    out.push('\n');
    match format {
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(Vec::new());
            w.write_record(COLUMNS).map_err(csv_error)?;
            for row in &cells {
                w.write_record(row).map_err(csv_error)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
            out.push_str(std::str::from_utf8(&bytes).expect("csv of utf-8 fields"));
        }
        ReportFormat::Text => {
            let mut widths = COLUMNS.map(str::len);
            for row in &cells {
                for (w, c) in widths.iter_mut().zip(row) {
                    *w = (*w).max(c.len());
                }
            }
            let header = COLUMNS.map(String::from);
            for row in std::iter::once(&header).chain(&cells) {
                let line: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
                out.push_str(line.join("  ").trim_end());
                out.push('\n');
            }
        }
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Malformed(format!("report: {e}"))
}

pub fn write_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, emit_report(report, format)?)?;
    Ok(())
}

/// A report row as read back from CSV; ASR keeps its printed precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRow {
    pub term: String,
    pub budget: Budget,
    pub split: SplitName,
    pub asr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedReport {
    pub config_hash: u64,
    pub seed: u64,
    pub rows: Vec<ParsedRow>,
}

/// Reads a CSV report produced by [`emit_report`].
pub fn parse_csv_report(text: &str) -> Result<ParsedReport> {
    let bad = |m: &str| Error::Malformed(format!("report: {m}"));
    let (head, body) = text.split_once('\n').unwrap_or((text, ""));
    if head.is_empty() {
        return Err(bad("empty file"));
    }
    let (config_hash, seed) = parse_provenance(head).ok_or_else(|| bad("missing provenance line"))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(body.as_bytes());
    if reader.headers().map_err(csv_error)?.iter().ne(COLUMNS) {
        return Err(bad("unexpected column header"));
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let fields: Vec<&str> = record.iter().collect();
        let [term, budget, split, asr, n] = fields.as_slice() else {
            return Err(bad(&format!("row {} has {} fields", i + 1, fields.len())));
        };
        rows.push(ParsedRow {
            term: term.to_string(),
            budget: Budget::parse(budget)?,
            split: SplitName::parse(split).ok_or_else(|| bad(&format!("unknown split {split:?}")))?,
            asr: asr.parse().map_err(|_| bad(&format!("bad ASR {asr:?}")))?,
            n: n.parse().map_err(|_| bad(&format!("bad n {n:?}")))?,
        });
    }
    Ok(ParsedReport {
        config_hash,
        seed,
        rows,
    })
}

/// Parses `# config_hash=<hex> seed=<u64>`.
pub fn parse_provenance(line: &str) -> Option<(u64, u64)> {
    let rest = line.strip_prefix("# config_hash=")?;
    let (hash, seed) = rest.split_once(" seed=")?;
    Some((u64::from_str_radix(hash, 16).ok()?, seed.trim().parse().ok()?))
}

/// Term-by-budget grid for one split with an average row, in first-seen
/// order of terms and budgets.
pub fn render_grid(rows: &[ParsedRow], split: SplitName) -> String {
    let mut terms: Vec<&str> = Vec::new();
    let mut budgets: Vec<Budget> = Vec::new();
    for r in rows.iter().filter(|r| r.split == split) {
        if !terms.contains(&r.term.as_str()) {
            terms.push(&r.term);
        }
        if !budgets.contains(&r.budget) {
            budgets.push(r.budget);
        }
    }
    let cell = |t: &str, b: Budget| rows.iter().find(|r| r.split == split && r.term == t && r.budget == b);
    let width = terms.iter().map(|t| t.len()).max().unwrap_or(0).max("Average".len());
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", split.as_str());
    for b in &budgets {
        let _ = write!(out, "  {:>10}", b.label());
    }
    out.push('\n');
    for t in &terms {
        let _ = write!(out, "{t:<width$}");
        for &b in &budgets {
            let v = cell(t, b).map_or("-".to_string(), |r| format_asr(r.asr));
            let _ = write!(out, "  {v:>10}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<width$}", "Average");
    for &b in &budgets {
        let vals: Vec<f64> = terms.iter().filter_map(|t| cell(t, b)).map(|r| r.asr).collect();
        let v = if vals.is_empty() {
            "-".to_string()
        } else {
            format_asr(vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let _ = write!(out, "  {v:>10}");
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        let mut r = EvalReport::new(0xabc, 3);
        r.rows.push(ReportRow {
            term: "paper kite".into(),
            budget: Budget::Patches(7),
            split: SplitName::Test,
            successes: 47,
            n: 50,
        });
        r
    }

    #[test]
    fn asr_rounding() {
        assert_eq!(format_asr(0.955), "0.96");
        assert_eq!(format_asr(0.945), "0.95");
        assert_eq!(format_asr(0.944), "0.94");
        assert_eq!(format_asr(1.0), "1.00");
        assert_eq!(format_asr(0.0), "0.00");
        assert_eq!(format_asr(0.125), "0.13");
    }

    #[test]
    fn single_cell_renders_header_and_one_row() {
        let r = report();
        for format in [ReportFormat::Text, ReportFormat::Csv] {
            let text = emit_report(&r, format).unwrap();
            assert_eq!(text.lines().count(), 3, "{text}");
            assert_eq!(text, emit_report(&r, format).unwrap());
            assert!(text.starts_with("# config_hash=0000000000000abc seed=3\n"));
        }
        let csv = emit_report(&r, ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().nth(2), Some("paper kite,patch:7,test,0.94,50"));
        assert!(emit_report(&EvalReport::new(0, 0), ReportFormat::Csv).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut r = report();
        r.rows[0].term = "odd, \"term\"".into();
        let parsed = parse_csv_report(&emit_report(&r, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!((parsed.config_hash, parsed.seed), (0xabc, 3));
        assert_eq!(parsed.rows[0].term, "odd, \"term\"");
        assert_eq!(parsed.rows[0].asr, 0.94);
        assert_eq!(parsed.rows[0].budget, Budget::Patches(7));
    }

    #[test]
    fn grid_has_average_row() {
        let rows = vec![
            ParsedRow {
                term: "mat".into(),
                budget: Budget::Patches(2),
                split: SplitName::Test,
                asr: 0.5,
                n: 50,
            },
            ParsedRow {
                term: "cake".into(),
                budget: Budget::Patches(2),
                split: SplitName::Test,
                asr: 0.7,
                n: 50,
            },
            ParsedRow {
                term: "cake".into(),
                budget: Budget::Patches(7),
                split: SplitName::Test,
                asr: 0.9,
                n: 50,
            },
        ];
        let g = render_grid(&rows, SplitName::Test);
        let lines: Vec<&str> = g.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("Average"));
        assert!(lines[3].contains("0.60") && lines[3].contains("0.90"));
        assert!(lines[1].contains('-'));
    }
}

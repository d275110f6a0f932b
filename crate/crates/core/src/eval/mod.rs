mod asr;
mod criterion;
mod filter;
mod report;

pub use asr::{compute_asr, evaluate_artifact, sweep, ArtifactEval, SweepConfig, SweepData};
pub use criterion::{boundary_words, contains_words, is_success, SuccessCriterion};
pub use filter::{filter_check, BlockRate, BlocklistFilter, FilterSummary, FilterVerdict};
pub use report::{
    emit_report, format_asr, parse_csv_report, parse_provenance, provenance_line, render_grid, write_report,
    CaptionSample, EvalReport, ParsedReport, ParsedRow, ReportFormat, ReportRow,
};

//! CSV step traces and the aggregates `ntxb report` derives from them.
//!
//! Values are written in scientific notation with 17 significant digits so
//! every `f64` survives a write/parse round trip unchanged.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::simclr::TraceRecord;

pub const TRACE_HEADER: &str =
    "step,loss_total,loss_alignment,loss_distribution,avg_pos_sim,paper_bound,strict_bound,paper_gap,strict_gap,grad_norm";

/// Metric columns in trace order (everything except `step`).
pub const METRICS: [&str; 9] = [
    "loss_total",
    "loss_alignment",
    "loss_distribution",
    "avg_pos_sim",
    "paper_bound",
    "strict_bound",
    "paper_gap",
    "strict_gap",
    "grad_norm",
];

const PAPER_GAP: usize = 6;
const STRICT_GAP: usize = 7;

/// One CSV row: the step index and the nine metrics in [`METRICS`] order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub values: [f64; 9],
}

impl From<&TraceRecord> for TraceRow {
    fn from(r: &TraceRecord) -> Self {
        Self {
            step: r.step,
            values: [
                r.loss.total,
                r.loss.alignment,
                r.loss.distribution,
                r.avg_pos_sim,
                r.paper_bound,
                r.strict_bound,
                r.paper_gap,
                r.strict_gap,
                r.grad_norm,
            ],
        }
    }
}

/// 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl TraceRow {
    pub fn to_csv_line(&self) -> String {
        let mut line = self.step.to_string();
        for v in self.values {
            let _ = write!(line, ",{}", format_f64(v));
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceParseError {
    #[error("trace is empty")]
    Empty,
    #[error("unexpected header {0:?}")]
    BadHeader(String),
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("trace has a header but no rows")]
    NoRows,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, TraceParseError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(TraceParseError::Empty)?;
    if header.trim().is_empty() {
        return Err(TraceParseError::Empty);
    }
    if header.trim_end() != TRACE_HEADER {
        return Err(TraceParseError::BadHeader(header.to_string()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| TraceParseError::BadRow { line: i + 1, reason };
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 10 {
            return Err(bad(format!("expected 10 fields, found {}", fields.len())));
        }
        let step = fields[0]
            .parse()
            .map_err(|e| bad(format!("step {:?}: {e}", fields[0])))?;
        let mut values = [0.0; 9];
        for (slot, field) in values.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse()
                .map_err(|e| bad(format!("value {field:?}: {e}")))?;
        }
        rows.push(TraceRow { step, values });
    }
    if rows.is_empty() {
        return Err(TraceParseError::NoRows);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub min: f64,
    pub mean: f64,
    #[serde(rename = "final")]
    pub last: f64,
}

impl GapStats {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let count = values.clone().count() as f64;
        Self {
            min: values.clone().fold(f64::INFINITY, f64::min),
            mean: values.clone().sum::<f64>() / count,
            last: values.last().unwrap_or(f64::NAN),
        }
    }
}

/// Gap-tightness table: min, mean and final value of both gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceAggregates {
    pub steps: usize,
    pub paper_gap: GapStats,
    pub strict_gap: GapStats,
}

/// `rows` must be nonempty.
pub fn aggregate(rows: &[TraceRow]) -> TraceAggregates {
    TraceAggregates {
        steps: rows.len(),
        paper_gap: GapStats::of(rows.iter().map(|r| r.values[PAPER_GAP])),
        strict_gap: GapStats::of(rows.iter().map(|r| r.values[STRICT_GAP])),
    }
}

/// `metric,step,value` series for one metric column.
pub fn series_csv(rows: &[TraceRow], metric: usize) -> String {
    let mut out = String::from("metric,step,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", METRICS[metric], r.step, format_f64(r.values[metric]));
    }
    out
}

pub fn gap_table_csv(agg: &TraceAggregates) -> String {
    let mut out = String::from("metric,min,mean,final\n");
    for (name, s) in [("paper_gap", agg.paper_gap), ("strict_gap", agg.strict_gap)] {
        let _ = writeln!(
            out,
            "{name},{},{},{}",
            format_f64(s.min),
            format_f64(s.mean),
            format_f64(s.last)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_matches_metric_list() {
        assert_eq!(TRACE_HEADER, format!("step,{}", METRICS.join(",")));
        assert_eq!(METRICS[PAPER_GAP], "paper_gap");
        assert_eq!(METRICS[STRICT_GAP], "strict_gap");
    }

    #[test]
    fn two_row_aggregates() {
        let text = format!(
            "{TRACE_HEADER}\n0,1,0,1,0.5,1.2,0.9,0.7,0.4,3\n1,1,0,1,0.6,1.1,0.8,0.5,0.2,2\n"
        );
        let rows = parse_trace(&text).unwrap();
        let agg = aggregate(&rows);
        assert_eq!(agg.steps, 2);
        assert_eq!(agg.paper_gap.min, 0.5);
        assert!((agg.paper_gap.mean - 0.6).abs() < 1e-15);
        assert_eq!(agg.paper_gap.last, 0.5);
        assert_eq!(agg.strict_gap.min, 0.2);
        assert!((agg.strict_gap.mean - 0.3).abs() < 1e-15);
        assert_eq!(agg.strict_gap.last, 0.2);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_trace(""), Err(TraceParseError::Empty));
        assert_eq!(parse_trace(&format!("{TRACE_HEADER}\n")), Err(TraceParseError::NoRows));
        assert!(matches!(parse_trace("a,b\n1,2\n"), Err(TraceParseError::BadHeader(_))));
        assert!(matches!(
            parse_trace(&format!("{TRACE_HEADER}\n0,1,2\n")),
            Err(TraceParseError::BadRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_trace(&format!("{TRACE_HEADER}\n0,1,0,1,x,1,1,1,1,1\n")),
            Err(TraceParseError::BadRow { .. })
        ));
    }

    #[test]
    fn series_layout() {
        let rows = [TraceRow {
            step: 3,
            values: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        }];
        let s = series_csv(&rows, 3);
        assert_eq!(s, "metric,step,value\navg_pos_sim,3,4.0000000000000002e-1\n");
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_lossless(
            step in 0usize..100_000,
            values in prop::array::uniform9(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO),
        ) {
            let row = TraceRow { step, values };
            let text = format!("{TRACE_HEADER}\n{}\n", row.to_csv_line());
            let parsed = parse_trace(&text).unwrap();
            prop_assert_eq!(parsed.len(), 1);
            prop_assert_eq!(parsed[0].step, step);
            for (a, b) in parsed[0].values.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

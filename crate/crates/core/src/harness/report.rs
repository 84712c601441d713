//! Per-round CSV output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::RoundTrace;
use crate::error::{Error, Result};

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub loss: f64,
    pub gap_to_fstar: Option<f64>,
    pub uploads_attempted: usize,
    pub uploads_received: usize,
    pub outages: usize,
    pub participation_pct: f64,
    pub bandwidth_used_hz: f64,
    pub cumulative_uploads: usize,
}

pub const COLUMNS: [&str; 9] = [
    "round",
    "loss",
    "gap_to_fstar",
    "uploads_attempted",
    "uploads_received",
    "outages",
    "participation_pct",
    "bandwidth_used_hz",
    "cumulative_uploads",
];

pub fn rows(traces: &[RoundTrace]) -> Vec<CsvRow> {
    let mut cumulative = 0;
    traces
        .iter()
        .map(|t| {
            cumulative += t.uploads_attempted;
            CsvRow {
                round: t.round,
                loss: t.loss,
                gap_to_fstar: t.gap,
                uploads_attempted: t.uploads_attempted,
                uploads_received: t.uploads_received,
                outages: t.outages,
                participation_pct: t.participation_pct(),
                bandwidth_used_hz: t.bandwidth_used,
                cumulative_uploads: cumulative,
            }
        })
        .collect()
}

/// Writes the header and one row per round. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(traces: &[RoundTrace], sink: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(sink);
    w.write_record(COLUMNS)?;
    for row in rows(traces) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(traces: &[RoundTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(traces, std::io::BufWriter::new(file)).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(round: usize, gap: Option<f64>) -> RoundTrace {
        RoundTrace {
            round,
            loss_before: 1.0,
            loss: 0.1 + 1.0 / 3.0 * round as f64,
            gap_before: gap,
            gap,
            scheduled: 3,
            forced: 0,
            uploads_attempted: 2,
            uploads_received: 1,
            outages: 1,
            admitted: vec![0, 2],
            bandwidth_used: 1.234_567_890_123e6,
            clients: vec![Default::default(); 3],
        }
    }

    #[test]
    fn empty_trace_is_header_only() {
        let mut buf = Vec::new();
        write_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,loss,gap_to_fstar,uploads_attempted,uploads_received,outages,participation_pct,bandwidth_used_hz,cumulative_uploads\n"
        );
    }

    #[test]
    fn unknown_gap_is_an_empty_field() {
        let mut buf = Vec::new();
        write_csv(&[trace(1, None)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row.split(',').nth(2), Some(""));
    }

    #[test]
    fn file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let traces: Vec<_> = (1..=5)
            .map(|t| trace(t, Some(std::f64::consts::PI.powi(-(t as i32) * 7))))
            .collect();
        emit_csv(&traces, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 6);
        let back = read_csv(&path).unwrap();
        assert_eq!(back, rows(&traces));
        assert_eq!(back[4].cumulative_uploads, 10);
        assert!((back[0].participation_pct - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn io_errors_name_the_path() {
        let err = emit_csv(&[], "/nonexistent-dir/x.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"), "{err}");
    }
}

//! CSV, JSON and histogram output.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::harness::workloads::WorkloadResult;

pub const CSV_HEADER: &str = "workload,variant,domains,seed,minor_gcs,major_gcs,major_alloc_words,max_heap_words,pause_max_ns,pause_p999_ns,read_faults,promoted_words";

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvRow {
    pub workload: String,
    pub variant: String,
    pub domains: usize,
    pub seed: u64,
    pub minor_gcs: u64,
    pub major_gcs: u64,
    pub major_alloc_words: u64,
    pub max_heap_words: u64,
    pub pause_max_ns: u64,
    pub pause_p999_ns: u64,
    pub read_faults: u64,
    pub promoted_words: u64,
}

impl CsvRow {
    pub fn from_result(r: &WorkloadResult) -> CsvRow {
        CsvRow {
            workload: r.spec.workload.name().to_string(),
            variant: r.spec.minor.name().to_string(),
            domains: r.spec.domains,
            seed: r.spec.seed,
            minor_gcs: r.report.minor_gcs,
            major_gcs: r.report.cycles,
            major_alloc_words: r.report.major_alloc_words,
            max_heap_words: r.report.max_heap_words,
            pause_max_ns: r.report.pause_max,
            pause_p999_ns: r.report.pause_p999,
            read_faults: r.report.read_faults,
            promoted_words: r.report.promoted_words,
        }
    }
}

pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn read_csv<R: io::Read>(input: R) -> csv::Result<Vec<CsvRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn write_json<W: Write>(out: W, r: &WorkloadResult) -> io::Result<()> {
    serde_json::to_writer_pretty(out, r)?;
    Ok(())
}

/// Pause histogram in power-of-two buckets, one `lower_bound count` line per
/// non-empty bucket, readable by gnuplot.
pub fn write_histogram<W: Write>(mut out: W, pauses: &[u64]) -> io::Result<()> {
    let mut buckets = [0u64; 65];
    for &p in pauses {
        buckets[(64 - p.leading_zeros()) as usize] += 1;
    }
    writeln!(out, "# pause_lower_bound count")?;
    for (b, &n) in buckets.iter().enumerate() {
        if n > 0 {
            let lo = if b == 0 { 0 } else { 1u64 << (b - 1) };
            writeln!(out, "{lo} {n}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_matches_row_fields() {
        let mut buf = Vec::new();
        let row = CsvRow {
            workload: "treechurn".into(),
            variant: "stw".into(),
            domains: 1,
            seed: 7,
            minor_gcs: 1,
            major_gcs: 2,
            major_alloc_words: 3,
            max_heap_words: 4,
            pause_max_ns: 5,
            pause_p999_ns: 6,
            read_faults: 7,
            promoted_words: 8,
        };
        write_csv(&mut buf, &[row.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().nth(1).unwrap(), "treechurn,stw,1,7,1,2,3,4,5,6,7,8");
        assert_eq!(read_csv(&buf[..]).unwrap(), vec![row]);

        let mut empty = Vec::new();
        write_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim_end(), CSV_HEADER);
    }

    #[test]
    fn histogram_buckets() {
        let mut buf = Vec::new();
        write_histogram(&mut buf, &[0, 1, 2, 3, 4, 1000]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(lines, ["0 1", "1 1", "2 2", "4 1", "512 1"]);
    }
}

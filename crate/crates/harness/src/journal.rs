//! Append-only scoring journal keyed by (genome, metric, seed, minibatch,
//! normalization). Completed cells survive interrupted runs: every row is
//! flushed as soon as its cell finishes, and reruns skip cells already
//! present.

use crate::{HarnessError, Result};
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use tfnas_core::metrics::{DegenerateReason, MetricId, ScoreValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub genome_idx: usize,
    /// Metric id string ordering is stable, so sort on the id's text form.
    pub metric: MetricKey,
    pub seed: u64,
    pub minibatch: u32,
    pub normalized: bool,
}

/// Orderable wrapper around [`MetricId`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetricKey(pub MetricId);

impl PartialOrd for MetricKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MetricKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.as_str().cmp(&other.0.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CellStatus {
    Ok(f64),
    Degenerate(DegenerateReason),
    /// Hard failure (error or panic) recorded so the sweep can continue.
    Failed,
}

impl CellStatus {
    pub fn from_score(value: ScoreValue) -> Self {
        match value {
            ScoreValue::Finite(v) => CellStatus::Ok(v),
            ScoreValue::Degenerate(r) => CellStatus::Degenerate(r),
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            CellStatus::Ok(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_flagged(&self) -> bool {
        !matches!(self, CellStatus::Ok(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub status: CellStatus,
}

pub fn format_row(cell: &CellResult) -> String {
    let mut line = String::new();
    let (status, value) = match cell.status {
        CellStatus::Ok(v) => ("ok", format!("{v}")),
        CellStatus::Degenerate(r) => (r.code(), "-".to_string()),
        CellStatus::Failed => ("error", "-".to_string()),
    };
    write!(
        line,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        cell.key.genome_idx,
        cell.key.metric.0.as_str(),
        cell.key.seed,
        cell.key.minibatch,
        cell.key.normalized as u8,
        status,
        value
    )
    .expect("string write");
    line
}

pub fn parse_row(path: &Path, lineno: usize, line: &str) -> Result<CellResult> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(HarnessError::file_parse(path, lineno, format!("expected 7 columns, got {}", fields.len())));
    }
    let bad = |what: &str| HarnessError::file_parse(path, lineno, format!("bad {what}"));
    let key = CellKey {
        genome_idx: fields[0].parse().map_err(|_| bad("genome index"))?,
        metric: MetricKey(MetricId::parse(fields[1]).ok_or_else(|| bad("metric id"))?),
        seed: fields[2].parse().map_err(|_| bad("seed"))?,
        minibatch: fields[3].parse().map_err(|_| bad("minibatch id"))?,
        normalized: match fields[4] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("normalization flag")),
        },
    };
    let status = match fields[5] {
        "ok" => CellStatus::Ok(fields[6].parse().map_err(|_| bad("value"))?),
        "error" => CellStatus::Failed,
        code => CellStatus::Degenerate(
            DegenerateReason::from_code(code).ok_or_else(|| bad("status code"))?,
        ),
    };
    Ok(CellResult { key, status })
}

const JOURNAL_MAGIC: &str = "#tfnas-journal v1 table=";
const TABLE_MAGIC: &str = "#tfnas-scores v1 table=";

/// Open (or create) a journal for a genome table with the given fingerprint.
/// Returns rows already present.
pub struct Journal {
    writer: BufWriter<std::fs::File>,
    path: PathBuf,
}

impl Journal {
    pub fn open(path: &Path, table_hash: u64) -> Result<(Journal, Vec<CellResult>)> {
        let mut existing = Vec::new();
        let mut torn_tail = false;
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            let mut lines = text.lines().enumerate();
            match lines.next() {
                Some((_, header)) if header.strip_prefix(JOURNAL_MAGIC) == Some(&format!("{table_hash:016x}")) => {}
                Some((_, header)) => {
                    return Err(HarnessError::Config(format!(
                        "journal {} does not match the genome table (header '{header}'); \
                         remove it to rescore",
                        path.display()
                    )))
                }
                None => {}
            }
            let body: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.is_empty()).collect();
            for (i, (lineno, line)) in body.iter().enumerate() {
                match parse_row(path, lineno + 1, line) {
                    Ok(row) => existing.push(row),
                    // A torn final line from an interrupted run is dropped;
                    // anything earlier is real corruption.
                    Err(_) if i + 1 == body.len() => {
                        eprintln!(
                            "journal {}: dropping torn trailing line {}",
                            path.display(),
                            lineno + 1
                        );
                        torn_tail = true;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let fresh = !path.exists();
        if torn_tail {
            // Rewrite without the torn fragment before appending again.
            let mut content = format!("{JOURNAL_MAGIC}{table_hash:016x}\n");
            for row in &existing {
                content.push_str(&format_row(row));
                content.push('\n');
            }
            std::fs::write(path, content).map_err(|e| HarnessError::io(path, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        let mut journal = Journal { writer: BufWriter::new(file), path: path.to_path_buf() };
        if fresh {
            journal.write_line(&format!("{JOURNAL_MAGIC}{table_hash:016x}"))?;
        }
        Ok((journal, existing))
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.write_all(b"\n"))
            .and_then(|_| self.writer.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }

    /// Append one completed cell and flush immediately.
    pub fn append(&mut self, cell: &CellResult) -> Result<()> {
        self.write_line(&format_row(cell))
    }
}

/// Write the final, canonically sorted scores table.
pub fn write_scores_table(path: &Path, table_hash: u64, rows: &mut Vec<CellResult>) -> Result<()> {
    rows.sort_by_key(|r| r.key);
    rows.dedup_by_key(|r| r.key);
    let mut out = String::new();
    out.push_str(&format!("{TABLE_MAGIC}{table_hash:016x}\n"));
    out.push_str("#genome_idx\tmetric\tseed\tminibatch\tnormalized\tstatus\tvalue\n");
    for row in rows.iter() {
        out.push_str(&format_row(row));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

/// Read a scores table, checking the fingerprint when one is expected.
pub fn read_scores_table(path: &Path, expect_hash: Option<u64>) -> Result<Vec<CellResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(hash_text) = line.strip_prefix(TABLE_MAGIC) {
            if let Some(expected) = expect_hash {
                if hash_text != format!("{expected:016x}") {
                    return Err(HarnessError::Config(format!(
                        "scores table {} was computed for a different genome table",
                        path.display()
                    )));
                }
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        rows.push(parse_row(path, lineno + 1, line)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: usize, seed: u64) -> CellKey {
        CellKey {
            genome_idx: i,
            metric: MetricKey(MetricId::ParameterCount),
            seed,
            minibatch: 0,
            normalized: true,
        }
    }

    #[test]
    fn row_round_trip() {
        let cells = [
            CellResult { key: key(3, 1), status: CellStatus::Ok(-1.25e-3) },
            CellResult {
                key: key(0, 2),
                status: CellStatus::Degenerate(DegenerateReason::SingularKernel),
            },
            CellResult { key: key(7, 0), status: CellStatus::Failed },
        ];
        for cell in &cells {
            let line = format_row(cell);
            let parsed = parse_row(Path::new("x"), 1, &line).unwrap();
            assert_eq!(&parsed, cell);
        }
    }

    #[test]
    fn journal_persists_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("journal.tsv");
        let cell = CellResult { key: key(1, 4), status: CellStatus::Ok(2.5) };
        {
            let (mut journal, existing) = Journal::open(&path, 0xABCD).unwrap();
            assert!(existing.is_empty());
            journal.append(&cell).unwrap();
        }
        let (_, existing) = Journal::open(&path, 0xABCD).unwrap();
        assert_eq!(existing, vec![cell]);

        // A different table fingerprint refuses to resume.
        assert!(Journal::open(&path, 0x1234).is_err());
    }

    #[test]
    fn scores_table_round_trips_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.tsv");
        let mut rows = vec![
            CellResult { key: key(2, 0), status: CellStatus::Ok(1.0) },
            CellResult { key: key(0, 1), status: CellStatus::Ok(0.5) },
            CellResult { key: key(0, 0), status: CellStatus::Ok(0.25) },
        ];
        write_scores_table(&path, 7, &mut rows).unwrap();
        let read = read_scores_table(&path, Some(7)).unwrap();
        assert_eq!(read, rows);
        assert!(read.windows(2).all(|w| w[0].key <= w[1].key));
        assert!(read_scores_table(&path, Some(8)).is_err());
    }
}

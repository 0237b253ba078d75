use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Direction;
use crate::error::{Error, Result};
use crate::losses::LossReport;

/// One row of the loss CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub direction: Direction,
    #[serde(flatten)]
    pub report: LossReport,
    pub wall_ms: u64,
}

impl LossRow {
    pub fn new(iteration: u64, direction: Direction, report: &LossReport, wall_ms: u64) -> Self {
        LossRow {
            iteration,
            direction,
            report: *report,
            wall_ms,
        }
    }
}

/// Append-only CSV with columns `iteration, direction, loss1..loss5,
/// generator_total, discriminator_total, wall_ms`.
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl LossLog {
    pub const HEADER: [&'static str; 10] = [
        "iteration",
        "direction",
        "loss1",
        "loss2",
        "loss3",
        "loss4",
        "loss5",
        "generator_total",
        "discriminator_total",
        "wall_ms",
    ];

    /// Opens `path` for appending, or truncates it when `append` is false.
    /// The header is written whenever the file starts empty.
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if empty {
            writer.write_record(Self::HEADER)?;
        }
        Ok(LossLog {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn append(&mut self, row: &LossRow) -> Result<()> {
        let r = &row.report;
        let mut rec = vec![row.iteration.to_string(), row.direction.name().to_string()];
        rec.extend(r.values().iter().map(|v| format!("{v:?}")));
        rec.push(row.wall_ms.to_string());
        self.writer.write_record(&rec)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }

    /// Every row of a log file.
    pub fn read(path: &Path) -> Result<Vec<LossRow>> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().ne(Self::HEADER) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("unexpected header {headers:?}"),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = |what: &str| Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad {what} in row {rec:?}"),
            };
            let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(Self::HEADER[i]));
            let direction = match &rec[1] {
                "defog" => Direction::Defog,
                "refog" => Direction::Refog,
                _ => return Err(bad("direction")),
            };
            rows.push(LossRow {
                iteration: rec[0].parse().map_err(|_| bad("iteration"))?,
                direction,
                report: LossReport {
                    loss1: num(2)?,
                    loss2: num(3)?,
                    loss3: num(4)?,
                    loss4: num(5)?,
                    loss5: num(6)?,
                    generator_total: num(7)?,
                    discriminator_total: num(8)?,
                },
                wall_ms: rec[9].parse().map_err(|_| bad("wall_ms"))?,
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64, d: Direction, v: f64) -> LossRow {
        let report = LossReport {
            loss1: v,
            loss2: v / 3.0,
            loss3: 0.1,
            loss4: 0.2,
            loss5: 1e-9,
            generator_total: v * 7.0,
            discriminator_total: 0.3,
        };
        LossRow::new(i, d, &report, 12)
    }

    #[test]
    fn append_preserves_rows_and_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        let mut log = LossLog::open(&p, false).unwrap();
        log.append(&row(1, Direction::Defog, 0.123456789)).unwrap();
        log.flush().unwrap();
        drop(log);
        let mut log = LossLog::open(&p, true).unwrap();
        log.append(&row(1, Direction::Refog, 2.0 / 3.0)).unwrap();
        log.flush().unwrap();
        drop(log);
        let rows = LossLog::read(&p).unwrap();
        assert_eq!(rows, vec![row(1, Direction::Defog, 0.123456789), row(1, Direction::Refog, 2.0 / 3.0)]);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("iteration").count(), 1);

        LossLog::open(&p, false).unwrap();
        assert!(LossLog::read(&p).unwrap().is_empty());
    }
}

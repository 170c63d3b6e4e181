use super::TrainError;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::path::{Path, PathBuf};

pub const LOSS_LOG_HEADER: &str =
    "step,loss_total,loss_atom,loss_coor,loss_distance,lr,params_millions,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_atom: f64,
    pub loss_coor: f64,
    pub loss_distance: f64,
    pub lr: f64,
    pub params_millions: f64,
    pub wall_ms: u64,
}

fn log_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Log {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads a loss log, checking that steps strictly increase.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossLogRow>, TrainError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| log_err(path, e))?;
    let headers = reader.headers().map_err(|e| log_err(path, e))?;
    if headers.iter().collect::<Vec<_>>().join(",") != LOSS_LOG_HEADER {
        return Err(log_err(
            path,
            format!("unexpected header, want {LOSS_LOG_HEADER}"),
        ));
    }
    let rows: Vec<LossLogRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| log_err(path, e))?;
    if let Some(w) = rows.windows(2).find(|w| w[1].step <= w[0].step) {
        return Err(log_err(
            path,
            format!("step {} follows step {}", w[1].step, w[0].step),
        ));
    }
    Ok(rows)
}

/// Append-only writer, flushed after every row.
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

impl LossLog {
    /// Creates the file, keeping `prior` rows at the top.
    pub fn create(path: &Path, prior: &[LossLogRow]) -> Result<LossLog, TrainError> {
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| log_err(path, e))?;
        writer
            .write_record(LOSS_LOG_HEADER.split(','))
            .map_err(|e| log_err(path, e))?;
        let mut log = LossLog {
            path: path.to_path_buf(),
            writer,
            last_step: None,
        };
        for row in prior {
            log.push(row)?;
        }
        log.writer.flush().map_err(|e| log_err(path, e))?;
        Ok(log)
    }

    pub fn push(&mut self, row: &LossLogRow) -> Result<(), TrainError> {
        if let Some(last) = self.last_step.filter(|&s| row.step <= s) {
            return Err(log_err(
                &self.path,
                format!("step {} is not after {last}", row.step),
            ));
        }
        self.writer
            .serialize(row)
            .map_err(|e| log_err(&self.path, e))?;
        self.writer.flush().map_err(|e| log_err(&self.path, e))?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> LossLogRow {
        LossLogRow {
            step,
            loss_total: 1.0 / (step as f64 + 1.0),
            loss_atom: 0.1,
            loss_coor: 0.2,
            loss_distance: 0.3,
            lr: 1e-4,
            params_millions: 0.04,
            wall_ms: 12,
        }
    }

    #[test]
    fn round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log = LossLog::create(&path, &[row(1)]).unwrap();
        log.push(&row(2)).unwrap();
        assert!(log.push(&row(2)).is_err());
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), LOSS_LOG_HEADER);
        assert_eq!(read_loss_log(&path).unwrap(), vec![row(1), row(2)]);
    }

    #[test]
    fn rejects_out_of_order_steps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        std::fs::write(
            &path,
            format!("{LOSS_LOG_HEADER}\n5,1,1,1,1,0,1,0\n5,1,1,1,1,0,1,0\n"),
        )
        .unwrap();
        assert!(read_loss_log(&path).is_err());
    }
}

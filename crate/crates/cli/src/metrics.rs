use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{CliError, IoContext, Result};

pub const METRICS_HEADER: &str = "epoch,split,metric,value";

/// Append-only `epoch,split,metric,value` log. Every row is flushed as it
/// is written.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).at(path)?;
        writeln!(file, "{METRICS_HEADER}").at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Reopens a log for a resumed run, dropping rows from epochs after
    /// `keep_through`.
    pub fn resume(path: &Path, keep_through: usize) -> Result<Self> {
        let rows = read_metrics(path)?;
        let mut text = format!("{METRICS_HEADER}\n");
        for r in rows.iter().filter(|r| r.epoch <= keep_through) {
            text.push_str(&r.to_line());
            text.push('\n');
        }
        fs::write(path, text).at(path)?;
        let file = OpenOptions::new().append(true).open(path).at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        let row = MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        };
        writeln!(self.file, "{}", row.to_line()).at(&self.path)?;
        self.file.flush().at(&self.path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    fn to_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.split, self.metric, self.value)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.at(path)?;
        let bad = |m: &str| CliError::usage(format!("{}:{}: {m}", path.display(), i + 1));
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(bad("unexpected header"));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        rows.push(MetricRow {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            split: f[1].to_string(),
            metric: f[2].to_string(),
            value: f[3].parse().map_err(|_| bad("bad value"))?,
        });
    }
    Ok(rows)
}

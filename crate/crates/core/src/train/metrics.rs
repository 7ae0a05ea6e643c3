use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,clean_acc,robust_acc,epoch_wall_seconds,train_forward_flops";

/// One line of the metrics CSV. Accuracies are empty on epochs without
/// evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub epoch_wall_seconds: f64,
    pub train_forward_flops: u64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.clean_acc),
            opt(self.robust_acc),
            self.epoch_wall_seconds,
            self.train_forward_flops
        )
    }
}

/// Append-only CSV sink; the header is written when the file is new.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.csv_line())?;
        self.file.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Point<'a> {
    series: &'a str,
    x: f64,
    y: f64,
}

/// Robust accuracy against epoch as JSON lines, one `{series, x, y}` object
/// per evaluated epoch.
pub fn plot_records(series: &str, rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for row in rows {
        if let Some(y) = row.robust_acc {
            let p = Point {
                series,
                x: row.epoch as f64,
                y,
            };
            out.push_str(&serde_json::to_string(&p).expect("plain struct"));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_plot_lines() {
        let rows = [
            MetricsRow {
                epoch: 1,
                lr: 0.5,
                train_loss: 1.25,
                clean_acc: None,
                robust_acc: None,
                epoch_wall_seconds: 0.0,
                train_forward_flops: 42,
            },
            MetricsRow {
                epoch: 2,
                lr: 0.25,
                train_loss: 1.0,
                clean_acc: Some(0.75),
                robust_acc: Some(0.5),
                epoch_wall_seconds: 1.5,
                train_forward_flops: 42,
            },
        ];
        assert_eq!(rows[0].csv_line(), "1,0.5,1.25,,,0,42");
        assert_eq!(rows[1].csv_line(), "2,0.25,1,0.75,0.5,1.5,42");
        assert_eq!(
            plot_records("agat \"40\"", &rows),
            "{\"series\":\"agat \\\"40\\\"\",\"x\":2.0,\"y\":0.5}\n"
        );
    }
}

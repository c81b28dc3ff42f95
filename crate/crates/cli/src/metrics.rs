//! `metrics.csv`: one row per logged scalar.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::CliError;

pub const HEADER: [&str; 6] = ["step", "variant", "metric", "value", "seed", "nfe"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    /// Network evaluations behind the value; 0 for training losses.
    pub nfe: u64,
}

impl MetricRow {
    pub fn new(step: u64, variant: &str, metric: &str, value: f64, seed: u64, nfe: u64) -> Self {
        Self {
            step,
            variant: variant.to_string(),
            metric: metric.to_string(),
            value,
            seed,
            nfe,
        }
    }

    fn fields(&self) -> [String; 6] {
        // `Display` for f64 is locale independent and round-trips
        [
            self.step.to_string(),
            self.variant.clone(),
            self.metric.clone(),
            self.value.to_string(),
            self.seed.to_string(),
            self.nfe.to_string(),
        ]
    }
}

/// Rows kept in memory and optionally streamed to a CSV file.
pub struct MetricsLog {
    rows: Vec<MetricRow>,
    writer: Option<csv::Writer<BufWriter<File>>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self {
            rows: Vec::new(),
            writer: None,
        }
    }

    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut writer = csv::Writer::from_writer(BufWriter::new(file));
        writer.write_record(HEADER)?;
        Ok(Self {
            rows: Vec::new(),
            writer: Some(writer),
        })
    }

    pub fn push(&mut self, row: MetricRow) -> Result<(), CliError> {
        if let Some(w) = &mut self.writer {
            w.write_record(row.fields())?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = MetricRow>) -> Result<(), CliError> {
        for r in rows {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| CliError::io("metrics.csv", e))?;
        }
        Ok(())
    }

    pub fn rows(&self) -> &[MetricRow] {
        &self.rows
    }

    /// Last value logged under `metric` with the given NFE.
    pub fn last(&self, metric: &str, nfe: u64) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.metric == metric && r.nfe == nfe)
            .map(|r| r.value)
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Reads a metrics file back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>, CliError> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(CliError::Config(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<&str, CliError> {
            rec.get(i)
                .ok_or_else(|| CliError::Config(format!("short metrics row {rec:?}")))
        };
        let parse_err = |e: String| CliError::Config(format!("bad metrics row {rec:?}: {e}"));
        rows.push(MetricRow {
            step: num(0)?.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            variant: num(1)?.to_string(),
            metric: num(2)?.to_string(),
            value: num(3)?.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?,
            seed: num(4)?.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            nfe: num(5)?.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
        });
    }
    Ok(rows)
}

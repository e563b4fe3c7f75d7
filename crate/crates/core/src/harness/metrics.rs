//! Append-only JSONL metric streams, CSV mirrors and cross-seed aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// One epoch of one run. Non-finite values cannot be written as JSON numbers,
/// so they are dropped from `values` and their names listed in `non_finite`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub config_hash: String,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub non_finite: Vec<String>,
}

impl MetricsRecord {
    pub fn new(epoch: usize, config_hash: &str, seed: u64, values: &BTreeMap<String, f64>) -> Self {
        let mut finite = BTreeMap::new();
        let mut non_finite = Vec::new();
        for (k, v) in values {
            if v.is_finite() {
                finite.insert(k.clone(), *v);
            } else {
                non_finite.push(k.clone());
            }
        }
        MetricsRecord {
            epoch,
            config_hash: config_hash.to_string(),
            seed,
            values: finite,
            non_finite,
        }
    }
}

pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            out: BufWriter::new(File::create(path)?),
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one line and flushes.
    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Wide CSV: `epoch,seed,config_hash` followed by the sorted union of metric names.
pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let keys: BTreeSet<&String> = records.iter().flat_map(|r| r.values.keys()).collect();
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = vec!["epoch".to_string(), "seed".into(), "config_hash".into()];
    header.extend(keys.iter().map(|k| k.to_string()));
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.seed.to_string(), r.config_hash.clone()];
        row.extend(keys.iter().map(|k| r.values.get(*k).map(|v| v.to_string()).unwrap_or_default()));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub epoch: usize,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single stream.
    pub std: f64,
    pub n: usize,
}

/// Mean and standard deviation per metric per epoch across streams. Streams
/// with different config hashes are refused unless `force` is set.
pub fn aggregate(streams: &[Vec<MetricsRecord>], force: bool) -> Result<Vec<AggregateRow>> {
    let hashes: BTreeSet<&str> = streams.iter().flatten().map(|r| r.config_hash.as_str()).collect();
    if hashes.len() > 1 && !force {
        return Err(LabError::Config(format!(
            "refusing to aggregate streams with different config hashes: {}",
            hashes.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let mut cells: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for r in streams.iter().flatten() {
        for (k, v) in &r.values {
            cells.entry((r.epoch, k.clone())).or_default().push(*v);
        }
    }
    Ok(cells
        .into_iter()
        .map(|((epoch, metric), xs)| {
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                epoch,
                metric,
                mean,
                std,
                n,
            }
        })
        .collect())
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "epoch,metric,mean,std,n")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.metric, r.mean, r.std, r.n)?;
    }
    out.flush()?;
    Ok(())
}

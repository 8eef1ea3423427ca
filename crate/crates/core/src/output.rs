//! Files written by a run: per-slot time series, channel log, summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::linearization::StabilityReport;
use crate::sim::{MetricsSummary, RunOutput, SlotRecord, SlotSummary};

/// Bumped whenever the time-series columns change.
pub const TIMESERIES_VERSION: u32 = 1;

pub const TIMESERIES_COLUMNS: [&str; 13] = [
    "slot",
    "stream_id",
    "enc_target",
    "enc_applied",
    "trans_rate",
    "buffer_bits",
    "tau_exact",
    "tau_est",
    "utility",
    "phi",
    "pi_acc",
    "underflow",
    "overflow",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub timeseries_version: u32,
    pub seed: u64,
    pub slots: usize,
    pub rows: usize,
    pub metrics: MetricsSummary,
    pub config: RunConfig,
}

impl RunSummary {
    pub fn new(config: &RunConfig, out: &RunOutput) -> Self {
        RunSummary {
            timeseries_version: TIMESERIES_VERSION,
            seed: config.seed,
            slots: out.slots.len(),
            rows: out.records.len(),
            metrics: out.metrics,
            config: config.clone(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_timeseries(path: &Path) -> Result<Vec<SlotRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TIMESERIES_COLUMNS {
        return Err(Error::Config(format!("{}: unexpected time-series header {header:?}", path.display())));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Writes `timeseries.csv`, `channel.csv` and `summary.toml` into `dir`.
pub fn write_run(dir: &Path, config: &RunConfig, out: &RunOutput) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("timeseries.csv"), &out.records)?;
    write_csv::<SlotSummary>(&dir.join("channel.csv"), &out.slots)?;
    let summary = RunSummary::new(config, out);
    write_toml(&dir.join("summary.toml"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
    pub structural: bool,
}

pub fn eigen_rows(report: &StabilityReport) -> Vec<EigenRow> {
    report
        .eigenvalues
        .iter()
        .zip(&report.structural)
        .map(|(&(re, im), &structural)| EigenRow { re, im, modulus: re.hypot(im), structural })
        .collect()
}

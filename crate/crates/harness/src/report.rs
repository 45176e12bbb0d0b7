//! Versioned CSV reports and atomic file output.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use film_denoise_core::metrics::MetricRecord;
use film_denoise_core::train::TrainReport;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// One metric row; the column order is the on-disk schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub method: String,
    pub noise_kind: String,
    pub sigma_tr_a: f64,
    pub sigma_tr_sigma: f64,
    pub sigma_val: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub residual_std: f64,
    pub n_images: usize,
}

impl MetricRow {
    pub fn new(config_hash: &str, seed: u64, method: &str, r: &MetricRecord) -> Self {
        MetricRow {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            method: method.to_string(),
            noise_kind: r.noise_kind.name().to_string(),
            sigma_tr_a: r.sigma_tr.a,
            sigma_tr_sigma: r.sigma_tr.sigma,
            sigma_val: r.sigma_val,
            psnr_db: r.psnr_db,
            ssim: r.ssim,
            residual_std: r.residual_std,
            n_images: r.n_images,
        }
    }
}

/// Per-epoch training loss row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub phase: u32,
    pub epoch: usize,
    pub train_loss: f64,
}

pub fn loss_rows(config_hash: &str, seed: u64, phase: u32, report: &TrainReport) -> Vec<LossRow> {
    report
        .epochs
        .iter()
        .map(|e| LossRow {
            schema_version: SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            phase,
            epoch: e.epoch,
            train_loss: e.train_loss,
        })
        .collect()
}

pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().context("flushing csv")
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    write_atomic(path, &to_csv(rows)?)
}

/// Reads a metric CSV, rejecting rows written under another schema version.
pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.clone();
    if header.get(0) != Some("schema_version") {
        bail!("{}: first column is not schema_version", path.display());
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let version: u32 = rec
            .get(0)
            .unwrap_or_default()
            .parse()
            .with_context(|| format!("{}: row {}: bad schema_version", path.display(), i + 1))?;
        if version != SCHEMA_VERSION {
            bail!("{}: row {}: unsupported schema version {version} (expected {SCHEMA_VERSION})", path.display(), i + 1);
        }
        rows.push(rec.deserialize(Some(&header))?);
    }
    Ok(rows)
}

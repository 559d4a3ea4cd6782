//! Neutral on-disk signal container.
//!
//! A signal is stored either as raw little-endian `f32` samples (`*.f32`) or
//! as a one-column CSV (`*.csv`), next to a sidecar `*.json` holding
//! `{sample_rate, label, domain, source_id}`. A dataset directory holds the
//! signals plus `manifest.json`, a list of `{signal_path, label, domain}`
//! entries with paths relative to the manifest.
//!
//! Recordings from public bearing datasets can be brought into this form by
//! exporting each channel segment as a CSV column and writing the sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Domain, LabeledSignal, RawSignal};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalMeta {
    pub sample_rate: f64,
    pub label: Option<usize>,
    pub domain: Domain,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub signal_path: PathBuf,
    pub label: Option<usize>,
    pub domain: Domain,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sidecar_path(signal_path: &Path) -> PathBuf {
    signal_path.with_extension("json")
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_f32_le(path: &Path, samples: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = samples.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

pub fn read_csv_column(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            // Tolerate a header row.
            Err(_) if out.is_empty() && line_no == 0 => {}
            Err(_) => {
                return Err(Error::InvalidArgument(format!(
                    "{}:{}: not a number: {field:?}",
                    path.display(),
                    line_no + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn read_meta(signal_path: &Path) -> Result<SignalMeta> {
    let path = sidecar_path(signal_path);
    Ok(serde_json::from_slice(&read_bytes(&path)?)?)
}

/// Reads a signal and its sidecar. CSV is chosen by extension, raw `f32`
/// otherwise.
pub fn read_signal(path: &Path) -> Result<LabeledSignal> {
    let meta = read_meta(path)?;
    let samples = match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv_column(path)?,
        _ => read_f32_le(path)?,
    };
    Ok(LabeledSignal {
        signal: RawSignal::new(samples, meta.sample_rate, meta.source_id)?,
        label: meta.label,
        domain: meta.domain,
    })
}

/// Writes `<dir>/<source_id>.f32` plus its sidecar and returns the signal path.
pub fn write_signal(dir: &Path, item: &LabeledSignal) -> Result<PathBuf> {
    let path = dir.join(format!("{}.f32", item.signal.source_id));
    write_f32_le(&path, &item.signal.samples)?;
    let meta = SignalMeta {
        sample_rate: item.signal.sample_rate,
        label: item.label,
        domain: item.domain,
        source_id: item.signal.source_id.clone(),
    };
    let sidecar = sidecar_path(&path);
    fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(path)
}

/// Writes every signal into `dir` and a manifest listing them.
pub fn write_dataset(dir: &Path, items: &[LabeledSignal]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(items.len());
    for item in items {
        let path = write_signal(dir, item)?;
        entries.push(ManifestEntry {
            signal_path: PathBuf::from(path.file_name().expect("file name")),
            label: item.label,
            domain: item.domain,
        });
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Loads every signal listed in a manifest. Manifest label and domain take
/// precedence over the sidecar.
pub fn load_manifest(path: &Path) -> Result<Vec<LabeledSignal>> {
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&read_bytes(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let mut item = read_signal(&base.join(&e.signal_path))?;
            item.label = e.label;
            item.domain = e.domain;
            Ok(item)
        })
        .collect()
}

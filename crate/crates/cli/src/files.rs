//! Reading and writing event logs and JSON documents.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use clickprep_core::ingest::{parse_events, InputFormat, RejectReport};
use clickprep_core::model::{EventLog, LogMetadata, ValidateOptions};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// `.csv` files are CSV, everything else JSON Lines, unless `explicit` says otherwise.
pub fn format_for(path: &Path, explicit: Option<InputFormat>) -> InputFormat {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => InputFormat::Csv,
        _ => InputFormat::Jsonl,
    })
}

/// Reads a raw batch log. Invalid rows land in the reject report.
pub fn read_raw(path: &Path, format: Option<InputFormat>) -> Result<(EventLog, RejectReport)> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let metadata = LogMetadata {
        source: path.display().to_string(),
        ..LogMetadata::default()
    };
    let out = parse_events(
        BufReader::new(file),
        format_for(path, format),
        &ValidateOptions::default(),
        metadata,
    )
    .with_context(|| format!("cannot read {}", path.display()))?;
    Ok(out)
}

/// Reads a log written by an earlier stage. Any invalid row is an error.
pub fn read_log(path: &Path) -> Result<EventLog> {
    let (log, rejects) = read_raw(path, None)?;
    if let Some(first) = rejects.rejects.first() {
        bail!(
            "{}: {} invalid rows, first at line {}: {}",
            path.display(),
            rejects.rejects.len(),
            first.line,
            first.reason
        );
    }
    Ok(log)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

pub fn write_log(path: &Path, log: &EventLog) -> Result<()> {
    let mut out = create(path)?;
    log.write_jsonl(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_rejects(path: &Path, rejects: &RejectReport) -> Result<()> {
    let mut out = create(path)?;
    for r in &rejects.rejects {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("cannot parse {}", path.display()))
}

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chorus_core::encoders::{ContextRecord, SensorSegment};
use chorus_core::shiftlab::{Dataset, SyntheticSpec};
use chorus_core::streaming::StreamEvent;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8], force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::file(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::file(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::file(path, e))?;
    tmp.persist(path).map_err(|e| CliError::file(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, force: bool) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    s.push('\n');
    write_atomic(path, s.as_bytes(), force)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub spec: SyntheticSpec,
    pub contexts: Vec<ContextRecord>,
    pub records: usize,
}

fn jsonl<T: Serialize>(first: Option<String>, items: &[T]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(f) = first {
        out.extend_from_slice(f.as_bytes());
        out.push(b'\n');
    }
    for it in items {
        serde_json::to_writer(&mut out, it).map_err(|e| CliError::Core(chorus_core::Error::Format(e.to_string())))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn dataset_bytes(ds: &Dataset) -> CliResult<Vec<u8>> {
    let header = DatasetHeader {
        spec: ds.spec.clone(),
        contexts: ds.contexts.clone(),
        records: ds.samples.len(),
    };
    let first = serde_json::to_string(&header).map_err(|e| CliError::Core(chorus_core::Error::Format(e.to_string())))?;
    jsonl(Some(first), &ds.samples)
}

pub fn write_dataset(path: &Path, ds: &Dataset, force: bool) -> CliResult<()> {
    write_atomic(path, &dataset_bytes(ds)?, force)
}

fn lines(path: &Path) -> CliResult<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::file(path, e))?;
    Ok(BufReader::new(f).lines().enumerate())
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let mut it = lines(path)?;
    let (_, first) = it.next().ok_or_else(|| CliError::format(path, "empty dataset file"))?;
    let first = first.map_err(|e| CliError::file(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| CliError::format(path, format!("line 1: {e}")))?;
    let mut samples = Vec::with_capacity(header.records);
    for (i, line) in it {
        let line = line.map_err(|e| CliError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SensorSegment =
            serde_json::from_str(&line).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?;
        if s.values.len() != s.channels * s.length {
            return Err(CliError::format(path, format!("line {}: segment size mismatch", i + 1)));
        }
        samples.push(s);
    }
    if samples.len() != header.records {
        return Err(CliError::format(
            path,
            format!("header announces {} records, found {}", header.records, samples.len()),
        ));
    }
    Ok(Dataset {
        spec: header.spec,
        contexts: header.contexts,
        samples,
    })
}

pub fn write_trace(path: &Path, events: &[StreamEvent], force: bool) -> CliResult<()> {
    write_atomic(path, &jsonl(None, events)?, force)
}

pub fn read_trace(path: &Path) -> CliResult<Vec<StreamEvent>> {
    let mut out = Vec::new();
    for (i, line) in lines(path)? {
        let line = line.map_err(|e| CliError::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

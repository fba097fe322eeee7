//! Line-delimited JSON files with a one-line versioned header.
//!
//! ```text
//! {"format":"framesel/labels","version":1,"run":{"config_hash":"..","seed":7,"tool_version":".."}}
//! {...record...}
//! ```
//!
//! Every line, including the last, ends in `\n`; a final line without one
//! is reported as truncated.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STORE_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamped into every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl RunInfo {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        RunInfo {
            config_hash: config_hash.into(),
            seed,
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunInfo>,
}

/// A record type with its own file kind.
pub trait Record: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

macro_rules! record_kinds {
    ($($ty:ty => $kind:literal,)*) => {
        $(impl Record for $ty {
            const KIND: &'static str = $kind;
        })*
    };
}

record_kinds! {
    crate::dataset::DatasetRecord => "dataset",
    crate::frame_model::VideoMeta => "video-meta",
    crate::frame_model::fixture::FeatureRecord => "features",
    crate::pipeline::PlanRecord => "plan",
    crate::pipeline::SpatialRecord => "spatial-labels",
    crate::pipeline::CaptionRecord => "captions",
    crate::pipeline::TemporalRecord => "temporal-labels",
    crate::pseudo_label::PseudoLabelRecord => "pseudo-labels",
    crate::pipeline::ScoreRecord => "scores",
    crate::selection::SelectionReport => "selections",
    crate::eval::EvalReport => "eval",
    crate::eval::SweepReport => "sweep",
    crate::training::LossReport => "train-log",
}

pub fn format_name(kind: &str) -> String {
    format!("framesel/{kind}")
}

pub fn header_line(kind: &str, run: Option<&RunInfo>) -> Result<String> {
    let h = Header {
        format: format_name(kind),
        version: STORE_VERSION,
        run: run.cloned(),
    };
    let mut s = serde_json::to_string(&h)?;
    s.push('\n');
    Ok(s)
}

pub fn encode_records<T: Record>(run: Option<&RunInfo>, records: &[T]) -> Result<Vec<u8>> {
    let mut out = header_line(T::KIND, run)?.into_bytes();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_records<T: Record>(path: &Path, run: Option<&RunInfo>, records: &[T]) -> Result<()> {
    let bytes = encode_records(run, records)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_records<T: Record>(path: &Path) -> Result<(Header, Vec<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(path, &bytes)
}

pub fn decode_records<T: Record>(path: &Path, bytes: &[u8]) -> Result<(Header, Vec<T>)> {
    let (header, lines) = split_checked(path, T::KIND, bytes)?;
    let mut out = Vec::with_capacity(lines.len());
    for (offset, line) in lines {
        let rec = serde_json::from_slice(line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            offset: offset as u64,
            reason: format!("bad record: {e}"),
        })?;
        out.push(rec);
    }
    Ok((header, out))
}

/// Validates the header and returns the body lines with their byte offsets.
pub fn split_checked<'a>(path: &Path, kind: &str, bytes: &'a [u8]) -> Result<(Header, Vec<(usize, &'a [u8])>)> {
    let corrupt = |offset: usize, reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.to_string(),
    };
    let mut lines = Vec::new();
    let mut start = 0;
    while start < bytes.len() {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(len) => {
                lines.push((start, &bytes[start..start + len]));
                start += len + 1;
            }
            None => return Err(corrupt(start, "truncated line (missing newline)")),
        }
    }
    let Some(&(_, first)) = lines.first() else {
        return Err(corrupt(0, "empty file (missing header)"));
    };
    let header: Header = serde_json::from_slice(first).map_err(|e| corrupt(0, &format!("bad header: {e}")))?;
    let want = format_name(kind);
    if !header.format.starts_with("framesel/") {
        return Err(corrupt(0, &format!("unknown format {}", header.format)));
    }
    if header.format != want {
        return Err(Error::config(format!(
            "{}: holds {} records, expected {want}",
            path.display(),
            header.format
        )));
    }
    if header.version != STORE_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: format!("{want} v{STORE_VERSION}"),
            found: format!("{} v{}", header.format, header.version),
        });
    }
    lines.remove(0);
    lines.retain(|(_, l)| !l.iter().all(|b| b.is_ascii_whitespace()));
    Ok((header, lines))
}

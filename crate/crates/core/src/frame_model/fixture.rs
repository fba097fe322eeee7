//! Fixture feature files.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic   b"FSFEAT"  (6 bytes)
//! version u16        (currently 1)
//! record* u32 payload_len, payload
//! payload u16 id_len, id bytes (utf-8), u32 frame_index, u32 g, u32 d_v,
//!         g*g*d_v f32 values (row-major, cell-major then feature)
//! ```
//!
//! The same records can also be stored as JSONL through [`crate::store`].

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TokenGrid;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"FSFEAT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub g: usize,
    pub d_v: usize,
    pub values: Vec<f32>,
}

impl FeatureRecord {
    pub fn from_grid(video_id: &str, grid: &TokenGrid) -> Self {
        FeatureRecord {
            video_id: video_id.to_string(),
            frame_index: grid.frame_index,
            g: grid.side,
            d_v: grid.dim,
            values: grid.values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_grid(&self) -> Result<TokenGrid> {
        TokenGrid::new(
            self.frame_index,
            self.g,
            self.d_v,
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }

    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        let id = self.video_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| Error::domain("video id longer than 65535 bytes"))?;
        let payload_len = 2 + id.len() + 12 + 4 * self.values.len();
        out.extend_from_slice(&(payload_len as u32).to_le_bytes());
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&(self.frame_index as u32).to_le_bytes());
        out.extend_from_slice(&(self.g as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_v as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

pub fn encode_features(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for rec in records {
        rec.encode(&mut out)?;
    }
    Ok(out)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let bytes = encode_features(records)?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    if cur.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            offset: 0,
            reason: "not a feature fixture file".into(),
        });
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: format!("features v{VERSION}"),
            found: format!("features v{version}"),
        });
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let start = cur.pos as u64;
        let payload_len = cur.u32("record length")? as usize;
        let payload_start = cur.pos;
        let id_len = cur.u16("video id length")? as usize;
        let id = cur.take(id_len, "video id")?;
        let video_id = String::from_utf8(id.to_vec()).map_err(|_| Error::Corrupt {
            path: path.to_path_buf(),
            offset: start,
            reason: "video id is not utf-8".into(),
        })?;
        let frame_index = cur.u32("frame index")? as usize;
        let g = cur.u32("grid side")? as usize;
        let d_v = cur.u32("feature dim")? as usize;
        let count = g * g * d_v;
        let raw = cur.take(count * 4, "feature values")?;
        if cur.pos - payload_start != payload_len {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                offset: start,
                reason: format!("record length {payload_len} does not match its contents"),
            });
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(FeatureRecord {
            video_id,
            frame_index,
            g,
            d_v,
            values,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<FeatureRecord> {
        vec![
            FeatureRecord {
                video_id: "a".into(),
                frame_index: 0,
                g: 1,
                d_v: 2,
                values: vec![1.0, -2.5],
            },
            FeatureRecord {
                video_id: "bb".into(),
                frame_index: 9,
                g: 2,
                d_v: 1,
                values: vec![0.0, 1.0, 2.0, 3.0],
            },
        ]
    }

    #[test]
    fn binary_roundtrip() {
        let bytes = encode_features(&sample()).unwrap();
        let back = decode_features(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back, sample());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_features(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode_features(Path::new("mem"), cut) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset > 8),
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_features(&sample()).unwrap();
        bytes[6] = 9;
        assert!(matches!(
            decode_features(Path::new("mem"), &bytes),
            Err(Error::Version { .. })
        ));
    }
}

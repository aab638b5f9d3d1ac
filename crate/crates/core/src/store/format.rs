//! Payload layout (all integers and floats little-endian):
//!
//! ```text
//! magic   "FMB1"
//! u32     record count
//! u32     embedding dimension D
//! u32     responses per prompt K
//! per record:
//!   u32   id length, then id bytes (UTF-8)
//!   u8    label
//!   u8    lmm prediction
//!   u8    hard
//!   (2 + 2K) x D f32: image, text, descriptions[0..K), emotions[0..K)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate_all, Dataset, DatasetManifest, MemeRecord, RawTexts, Split};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const RAW_TEXTS_FILE: &str = "raw_texts.jsonl";
const MAGIC: &[u8; 4] = b"FMB1";

pub fn payload_file(split: Split) -> String {
    format!("{}.fmb", split.as_str())
}

#[derive(Serialize, Deserialize)]
struct RawTextsLine {
    id: String,
    embedded_text: String,
    descriptions: Vec<String>,
    emotions: Vec<String>,
}

/// Writes the manifest, one payload per split and, when any record carries
/// them, the raw text audit file. Records are grouped by split on disk, in
/// their original relative order.
pub fn write_dataset(manifest: &DatasetManifest, records: &[MemeRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(manifest.format_version));
    }
    validate_all(manifest, records)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest_text = toml::to_string(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_text).map_err(|e| Error::io(&path, e))?;

    for split in Split::ALL {
        let members: Vec<&MemeRecord> = records.iter().filter(|r| r.split == split).collect();
        let bytes = encode_payload(manifest, &members);
        let path = dir.join(payload_file(split));
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }

    let raw_path = dir.join(RAW_TEXTS_FILE);
    if records.iter().any(|r| r.raw_texts.is_some()) {
        let mut out = Vec::new();
        for split in Split::ALL {
            for r in records.iter().filter(|r| r.split == split) {
                if let Some(raw) = &r.raw_texts {
                    let line = RawTextsLine {
                        id: r.id.clone(),
                        embedded_text: raw.embedded_text.clone(),
                        descriptions: raw.descriptions.clone(),
                        emotions: raw.emotions.clone(),
                    };
                    serde_json::to_writer(&mut out, &line).map_err(|e| Error::RawTexts(e.to_string()))?;
                    out.push(b'\n');
                }
            }
        }
        let mut f = fs::File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
        f.write_all(&out).map_err(|e| Error::io(&raw_path, e))?;
    } else if raw_path.exists() {
        fs::remove_file(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    }
    Ok(())
}

fn encode_payload(manifest: &DatasetManifest, records: &[&MemeRecord]) -> Vec<u8> {
    let d = manifest.embedding_dim;
    let k = manifest.responses_per_prompt;
    let per_record = 3 + 4 * d * (2 + 2 * k);
    let mut out = Vec::with_capacity(16 + records.len() * (per_record + 16));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.id.as_bytes());
        out.push(r.label);
        out.push(r.lmm_prediction);
        out.push(u8::from(r.hard));
        for (_, block) in r.blocks() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptPayload {
                path: self.path.to_owned(),
                reason: format!("truncated while reading {what} at byte {}", self.pos),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptPayload {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

fn decode_payload(path: &Path, bytes: &[u8], manifest: &DatasetManifest, split: Split) -> Result<Vec<MemeRecord>> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let count = cur.u32("record count")? as usize;
    let d = cur.u32("embedding dim")? as usize;
    let k = cur.u32("responses per prompt")? as usize;
    if d != manifest.embedding_dim || k != manifest.responses_per_prompt {
        return Err(corrupt(
            path,
            format!(
                "header D={d} K={k} disagrees with manifest D={} K={}",
                manifest.embedding_dim, manifest.responses_per_prompt
            ),
        ));
    }
    if count != manifest.count(split) {
        return Err(Error::CountMismatch {
            split: split.to_string(),
            manifest: manifest.count(split),
            payload: count,
        });
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("record {i}");
        let id_len = cur.u32(&what)? as usize;
        let id = std::str::from_utf8(cur.take(id_len, &what)?)
            .map_err(|_| corrupt(path, format!("record {i}: id is not UTF-8")))?
            .to_owned();
        let label = cur.u8(&what)?;
        let lmm_prediction = cur.u8(&what)?;
        let hard = match cur.u8(&what)? {
            0 => false,
            1 => true,
            other => return Err(corrupt(path, format!("record {id}: hard byte {other}"))),
        };
        let image = cur.f32s(d, &what)?;
        let text = cur.f32s(d, &what)?;
        let descriptions = (0..k).map(|_| cur.f32s(d, &what)).collect::<Result<Vec<_>>>()?;
        let emotions = (0..k).map(|_| cur.f32s(d, &what)).collect::<Result<Vec<_>>>()?;
        records.push(MemeRecord {
            id,
            split,
            label,
            lmm_prediction,
            hard,
            image,
            text,
            descriptions,
            emotions,
            raw_texts: None,
        });
    }
    if cur.pos != bytes.len() {
        return Err(corrupt(path, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok(records)
}

/// Loads and validates a dataset directory. Records come back in on-disk
/// order: train, then validation, then test.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let version: toml::Table = toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    match version.get("format_version").and_then(|v| v.as_integer()) {
        Some(v) if v == i64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(u32::try_from(v).unwrap_or(u32::MAX))),
        None => return Err(Error::Manifest("missing format_version".into())),
    }
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    manifest.validate()?;

    let mut records = Vec::new();
    for split in Split::ALL {
        let path = dir.join(payload_file(split));
        if !path.exists() && manifest.count(split) == 0 {
            continue;
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        records.extend(decode_payload(&path, &bytes, &manifest, split)?);
    }

    let raw_path = dir.join(RAW_TEXTS_FILE);
    if raw_path.exists() {
        attach_raw_texts(&raw_path, &mut records)?;
    }
    Dataset::new(manifest, records)
}

fn attach_raw_texts(path: &PathBuf, records: &mut [MemeRecord]) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let index: HashMap<String, usize> = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RawTextsLine =
            serde_json::from_str(&line).map_err(|e| Error::RawTexts(format!("line {}: {e}", lineno + 1)))?;
        let i = *index
            .get(&parsed.id)
            .ok_or_else(|| Error::RawTexts(format!("line {}: unknown id {:?}", lineno + 1, parsed.id)))?;
        records[i].raw_texts = Some(RawTexts {
            embedded_text: parsed.embedded_text,
            descriptions: parsed.descriptions,
            emotions: parsed.emotions,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::tests::record;

    fn sample(d: usize, k: usize) -> (DatasetManifest, Vec<MemeRecord>) {
        let mut recs = vec![
            record("t0", Split::Train, d, k),
            record("t1", Split::Train, d, k),
            record("v0", Split::Validation, d, k),
            record("s0", Split::Test, d, k),
        ];
        recs[1].label = 1;
        recs[1].hard = true;
        recs[0].image[0] = -1.25e-7;
        recs[0].raw_texts = Some(RawTexts {
            embedded_text: "when the \"vaccine\" hits".into(),
            descriptions: vec!["a dog".into(); k],
            emotions: vec!["joy".into(); k],
        });
        let m = DatasetManifest::for_records(d, k, "test-encoder", &recs);
        (m, recs)
    }

    #[test]
    fn round_trip_small() {
        let dir = tempfile::tempdir().unwrap();
        let (m, recs) = sample(4, 2);
        write_dataset(&m, &recs, dir.path()).unwrap();
        for f in [MANIFEST_FILE, "train.fmb", "validation.fmb", "test.fmb", RAW_TEXTS_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let ds = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        assert_eq!(ds.records, recs);
    }

    #[test]
    fn write_rejects_short_block() {
        let dir = tempfile::tempdir().unwrap();
        let (m, mut recs) = sample(4, 2);
        recs[2].image.truncate(3);
        let err = write_dataset(&m, &recs, dir.path()).unwrap_err();
        assert!(
            matches!(err, Error::DimensionMismatch { ref id, .. } if id == "v0"),
            "{err}"
        );
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let (m, recs) = sample(4, 2);
        write_dataset(&m, &recs, dir.path()).unwrap();
        let p = dir.path().join("train.fmb");
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::CorruptPayload { .. })));
    }

    #[test]
    fn manifest_count_larger_than_payload() {
        let dir = tempfile::tempdir().unwrap();
        let d = 3;
        let recs: Vec<_> = (0..9).map(|i| record(&format!("r{i}"), Split::Train, d, 1)).collect();
        let mut m = DatasetManifest::for_records(d, 1, "", &recs);
        write_dataset(&m, &recs, dir.path()).unwrap();
        m.split_counts.insert("train".into(), 10);
        fs::write(dir.path().join(MANIFEST_FILE), toml::to_string(&m).unwrap()).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::CountMismatch {
                manifest: 10,
                payload: 9,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsupported_version() {
        let dir = tempfile::tempdir().unwrap();
        let (m, recs) = sample(2, 1);
        write_dataset(&m, &recs, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            text.replace("format_version = 1", "format_version = 7"),
        )
        .unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::UnsupportedVersion(7))));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (m, recs) = sample(2, 1);
        write_dataset(&m, &recs, dir.path()).unwrap();
        let p = dir.path().join("test.fmb");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::CorruptPayload { .. })));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let (m, recs) = sample(4, 2);
        write_dataset(&m, &recs, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("train.fmb")).unwrap();
        assert_eq!(&bytes[..4], b"FMB1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &4u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..22], b"t0");
        assert_eq!(&bytes[22..25], &[0, 0, 0]);
        assert_eq!(&bytes[25..29], &(-1.25e-7f32).to_le_bytes());
        // two records, each 4 + 2 + 3 + 4 * 4 * (2 + 2 * 2) bytes
        assert_eq!(bytes.len(), 16 + 2 * (4 + 2 + 3 + 96));
    }
}

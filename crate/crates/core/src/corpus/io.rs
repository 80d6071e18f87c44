//! Corpus files.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic    "REMB1\0"
//! dim      u32
//! count    u64
//! count x  { id_len u16, id utf-8, identity u32, camera u16, source u16, dim x f32 }
//! table    { n u16, n x { len u16, utf-8 } }     source-tag strings
//! ```
//!
//! The JSONL alternative holds one `{"id","identity","camera","source","vector"}`
//! object per line.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Corpus, CorpusError, EmbeddingRecord};

pub const MAGIC: &[u8; 6] = b"REMB1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Binary,
}

impl CorpusFormat {
    /// `.jsonl`/`.json` select JSONL, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::Jsonl,
            _ => Self::Binary,
        }
    }
}

/// Loads a corpus, detecting the format from the leading magic bytes.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        decode_binary(&bytes)
    } else {
        decode_jsonl(&bytes)
    }
}

pub fn save_corpus(
    corpus: &Corpus,
    path: impl AsRef<Path>,
    format: CorpusFormat,
) -> Result<(), CorpusError> {
    let bytes = match format {
        CorpusFormat::Jsonl => encode_jsonl(corpus),
        CorpusFormat::Binary => encode_binary(corpus)?,
    };
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn encode_jsonl(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    for rec in corpus.records() {
        serde_json::to_writer(&mut out, rec).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn decode_jsonl(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    let mut records = Vec::new();
    let mut offset = 0u64;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let start = offset;
        offset += line.len() as u64;
        let trimmed = line.trim_ascii();
        if trimmed.is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_slice(trimmed).map_err(|e| {
            CorpusError::Format { offset: start + e.column().saturating_sub(1) as u64, message: e.to_string() }
        })?;
        records.push(rec);
    }
    Corpus::new(records)
}

fn too_long(what: &str, len: usize) -> CorpusError {
    CorpusError::Format { offset: 0, message: format!("{what} of length {len} exceeds u16") }
}

pub fn encode_binary(corpus: &Corpus) -> Result<Vec<u8>, CorpusError> {
    let mut tags: Vec<&str> = Vec::new();
    let mut tag_index: HashMap<&str, u16> = HashMap::new();
    let mut out = Vec::with_capacity(18 + corpus.len() * (16 + 4 * corpus.dim()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(corpus.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(corpus.len() as u64).to_le_bytes());
    for rec in corpus.records() {
        let id = rec.image_id.as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| too_long("image id", id.len()))?;
        let tag = match tag_index.get(rec.source.as_str()) {
            Some(&t) => t,
            None => {
                let t = u16::try_from(tags.len()).map_err(|_| too_long("source table", tags.len()))?;
                tags.push(&rec.source);
                tag_index.insert(&rec.source, t);
                t
            }
        };
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&rec.identity.to_le_bytes());
        out.extend_from_slice(&rec.camera.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        for x in &rec.vector {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&(tags.len() as u16).to_le_bytes());
    for t in tags {
        let len = u16::try_from(t.len()).map_err(|_| too_long("source tag", t.len()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CorpusError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CorpusError::Format {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], CorpusError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u16(&mut self, what: &str) -> Result<u16, CorpusError> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CorpusError> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64, CorpusError> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn string(&mut self, what: &str) -> Result<String, CorpusError> {
        let len = self.u16(what)? as usize;
        let at = self.pos as u64;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|e| CorpusError::Format { offset: at, message: format!("{what}: {e}") })
    }
}

pub fn decode_binary(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(CorpusError::Format { offset: 0, message: "bad magic".into() });
    }
    let dim = r.u32("dim")? as usize;
    let count = r.u64("count")?;
    let mut pending = Vec::new();
    for _ in 0..count {
        let image_id = r.string("image id")?;
        let identity = r.u32("identity")?;
        let camera = r.u16("camera")?;
        let tag_at = r.pos as u64;
        let tag = r.u16("source index")?;
        let raw = r.take(dim * 4, "vector")?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        pending.push((EmbeddingRecord { image_id, identity, camera, source: String::new(), vector }, tag, tag_at));
    }
    let n_tags = r.u16("source table length")?;
    let tags = (0..n_tags).map(|_| r.string("source tag")).collect::<Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(CorpusError::Format { offset: r.pos as u64, message: "trailing bytes".into() });
    }
    let records = pending
        .into_iter()
        .map(|(mut rec, tag, at)| {
            rec.source = tags
                .get(tag as usize)
                .ok_or_else(|| CorpusError::Format {
                    offset: at,
                    message: format!("source index {tag} outside table of {n_tags}"),
                })?
                .clone();
            Ok(rec)
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;
    Corpus::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Corpus {
        Corpus::new(vec![
            EmbeddingRecord {
                image_id: "m/0001_c1".into(),
                identity: 1,
                camera: 1,
                source: "market".into(),
                vector: vec![0.6, 0.8, 0.0],
            },
            EmbeddingRecord {
                image_id: "c/0002_c2".into(),
                identity: 2,
                camera: 2,
                source: "cuhk".into(),
                vector: vec![1.0, 2.0, 2.0],
            },
        ])
        .unwrap()
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        for (name, fmt) in [("c.jsonl", CorpusFormat::Jsonl), ("c.remb", CorpusFormat::Binary)] {
            let p = dir.path().join(name);
            save_corpus(&c, &p, fmt).unwrap();
            assert_eq!(load_corpus(&p).unwrap(), c);
        }
    }

    #[test]
    fn jsonl_and_binary_agree() {
        let c = sample();
        let a = decode_jsonl(&encode_jsonl(&c)).unwrap();
        let b = decode_binary(&encode_binary(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let bytes = encode_binary(&sample()).unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            match decode_binary(&bytes[..cut]) {
                Err(CorpusError::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_source_index_and_trailing_bytes() {
        let mut bytes = encode_binary(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_binary(&bytes), Err(CorpusError::Format { .. })));
    }

    #[test]
    fn malformed_jsonl_line() {
        let text = b"{\"id\":\"a\",\"identity\":1,\"camera\":0,\"source\":\"s\",\"vector\":[1.0]}\n{\"id\":\n";
        match decode_jsonl(text) {
            Err(CorpusError::Format { offset, .. }) => assert!(offset >= 63),
            other => panic!("{other:?}"),
        }
        let dup = b"{\"id\":\"a\",\"identity\":1,\"camera\":0,\"source\":\"s\",\"vector\":[1.0]}\n{\"id\":\"a\",\"identity\":1,\"camera\":0,\"source\":\"s\",\"vector\":[1.0]}\n";
        assert!(matches!(decode_jsonl(dup), Err(CorpusError::DuplicateId(_))));
    }
}

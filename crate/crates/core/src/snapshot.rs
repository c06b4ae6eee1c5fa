//! Embedding snapshots and the EDRF v1 file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "EDRF"
//! version      u16      1
//! dim          u16
//! class_count  u16
//! reserved     u16      0
//! stage_name   u16 length + UTF-8 bytes
//! class table  class_count x (u16 length + UTF-8 bytes)
//! token_count  u64
//! records      token_count x { token_uid u64, class_id u16, embedding dim x f32 }
//! ```
//!
//! A JSON-Lines form is accepted on input: a header object
//! `{"stage", "dim", "classes"}` followed by one `{"uid", "label", "vec"}`
//! object per line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::EmbeddingMatrix;

pub const MAGIC: &[u8; 4] = b"EDRF";
pub const VERSION: u16 = 1;
pub const BACKGROUND: &str = "O";

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub token_uid: u64,
    pub class_id: u16,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSnapshot {
    pub stage_name: String,
    pub dim: usize,
    /// Class names; `"O"` is always at index 0.
    pub class_table: Vec<String>,
    pub records: Vec<TokenRecord>,
}

impl EmbeddingSnapshot {
    pub fn new(stage_name: impl Into<String>, dim: usize, class_table: Vec<String>) -> Self {
        Self {
            stage_name: stage_name.into(),
            dim,
            class_table,
            records: Vec::new(),
        }
    }

    pub fn class_name(&self, class_id: u16) -> &str {
        &self.class_table[class_id as usize]
    }

    pub fn class_index(&self, name: &str) -> Option<u16> {
        self.class_table
            .iter()
            .position(|c| c == name)
            .map(|i| i as u16)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_table.len()];
        for r in &self.records {
            counts[r.class_id as usize] += 1;
        }
        counts
    }

    /// Checks every structural invariant; loading never repairs.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSnapshot(msg));
        if self.dim == 0 || self.dim > u16::MAX as usize {
            return bad(format!("dim {} out of range", self.dim));
        }
        if self.class_table.first().map(String::as_str) != Some(BACKGROUND) {
            return bad("class table must start with \"O\"".into());
        }
        if self.class_table.len() > u16::MAX as usize {
            return bad("too many classes".into());
        }
        let mut names = HashSet::new();
        for c in &self.class_table {
            if !names.insert(c.as_str()) {
                return bad(format!("duplicate class name {c:?}"));
            }
        }
        let mut uids = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !uids.insert(r.token_uid) {
                return bad(format!("duplicate token_uid {}", r.token_uid));
            }
            if r.class_id as usize >= self.class_table.len() {
                return bad(format!(
                    "class_id {} out of range for token {}",
                    r.class_id, r.token_uid
                ));
            }
            if r.embedding.len() != self.dim {
                return bad(format!(
                    "token {} has {} values, header dim is {}",
                    r.token_uid,
                    r.embedding.len(),
                    self.dim
                ));
            }
            if r.embedding.iter().any(|v| !v.is_finite()) {
                return bad(format!(
                    "token {} has a non-finite embedding value",
                    r.token_uid
                ));
            }
        }
        Ok(())
    }

    /// Size in bytes of the EDRF encoding.
    pub fn encoded_len(&self) -> usize {
        let strings: usize = std::iter::once(&self.stage_name)
            .chain(&self.class_table)
            .map(|s| 2 + s.len())
            .sum();
        12 + strings + 8 + self.records.len() * (8 + 2 + 4 * self.dim)
    }
}

fn put_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::InvalidSnapshot(format!("string of {} bytes is too long", s.len())))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

/// Writes `snapshot` as EDRF v1 and returns the number of bytes written.
pub fn write_snapshot<W: Write>(snapshot: &EmbeddingSnapshot, sink: W) -> Result<u64> {
    snapshot.validate()?;
    let mut out = BufWriter::new(sink);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(snapshot.dim as u16).to_le_bytes())?;
    out.write_all(&(snapshot.class_table.len() as u16).to_le_bytes())?;
    out.write_all(&0u16.to_le_bytes())?;
    put_str(&mut out, &snapshot.stage_name)?;
    for c in &snapshot.class_table {
        put_str(&mut out, c)?;
    }
    out.write_all(&(snapshot.records.len() as u64).to_le_bytes())?;
    for r in &snapshot.records {
        out.write_all(&r.token_uid.to_le_bytes())?;
        out.write_all(&r.class_id.to_le_bytes())?;
        for v in &r.embedding {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(snapshot.encoded_len() as u64)
}

struct LeReader<R> {
    inner: R,
}

impl<R: Read> LeReader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => {
                    Error::CorruptFile(format!("truncated in {what}"))
                }
                _ => Error::Io(e),
            })?;
        Ok(buf)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.bytes::<2>(what).map(u16::from_le_bytes)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => {
                    Error::CorruptFile(format!("truncated in {what}"))
                }
                _ => Error::Io(e),
            })?;
        String::from_utf8(buf).map_err(|_| Error::CorruptFile(format!("{what} is not UTF-8")))
    }
}

/// Reads and validates an EDRF v1 snapshot.
pub fn read_snapshot<R: Read>(source: R) -> Result<EmbeddingSnapshot> {
    let mut rd = LeReader {
        inner: BufReader::new(source),
    };
    let magic = rd.bytes::<4>("magic").map_err(|e| match e {
        Error::CorruptFile(_) => Error::NotEdrf,
        other => other,
    })?;
    if &magic != MAGIC {
        return Err(Error::NotEdrf);
    }
    let version = rd.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dim = rd.u16("dim")? as usize;
    let class_count = rd.u16("class count")? as usize;
    let reserved = rd.u16("reserved")?;
    if reserved != 0 {
        return Err(Error::CorruptFile(format!(
            "reserved field is {reserved}, expected 0"
        )));
    }
    let stage_name = rd.string("stage name")?;
    let class_table = (0..class_count)
        .map(|_| rd.string("class table"))
        .collect::<Result<Vec<_>>>()?;
    let token_count = u64::from_le_bytes(rd.bytes::<8>("token count")?);

    let mut records = Vec::new();
    let mut raw = vec![0u8; 4 * dim];
    for _ in 0..token_count {
        let token_uid = u64::from_le_bytes(rd.bytes::<8>("record")?);
        let class_id = rd.u16("record")?;
        rd.inner.read_exact(&mut raw).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::CorruptFile("truncated in record".into()),
            _ => Error::Io(e),
        })?;
        let embedding = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(TokenRecord {
            token_uid,
            class_id,
            embedding,
        });
    }
    let mut probe = [0u8; 1];
    if rd.inner.read(&mut probe)? != 0 {
        return Err(Error::CorruptFile(
            "trailing bytes after last record".into(),
        ));
    }

    let snapshot = EmbeddingSnapshot {
        stage_name,
        dim,
        class_table,
        records,
    };
    snapshot.validate()?;
    Ok(snapshot)
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    stage: String,
    dim: usize,
    classes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    uid: u64,
    label: String,
    vec: Vec<f32>,
}

/// Reads the JSON-Lines representation.
pub fn read_snapshot_jsonl<R: Read>(source: R) -> Result<EmbeddingSnapshot> {
    let mut lines = BufReader::new(source).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::CorruptFile("missing JSONL header line".into()))??;
    let header: JsonlHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::CorruptFile(format!("bad JSONL header: {e}")))?;
    let index: HashMap<&str, u16> = header
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u16))
        .collect();
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line)
            .map_err(|e| Error::CorruptFile(format!("line {}: {e}", lineno + 2)))?;
        let class_id = *index.get(rec.label.as_str()).ok_or_else(|| {
            Error::InvalidSnapshot(format!(
                "line {}: label {:?} not in class table",
                lineno + 2,
                rec.label
            ))
        })?;
        records.push(TokenRecord {
            token_uid: rec.uid,
            class_id,
            embedding: rec.vec,
        });
    }
    let snapshot = EmbeddingSnapshot {
        stage_name: header.stage,
        dim: header.dim,
        class_table: header.classes,
        records,
    };
    snapshot.validate()?;
    Ok(snapshot)
}

pub fn write_snapshot_jsonl<W: Write>(snapshot: &EmbeddingSnapshot, sink: W) -> Result<()> {
    snapshot.validate()?;
    let mut out = BufWriter::new(sink);
    let header = JsonlHeader {
        stage: snapshot.stage_name.clone(),
        dim: snapshot.dim,
        classes: snapshot.class_table.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for r in &snapshot.records {
        let rec = JsonlRecord {
            uid: r.token_uid,
            label: snapshot.class_name(r.class_id).to_owned(),
            vec: r.embedding.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a snapshot from disk, accepting either EDRF or the JSONL form.
pub fn load_snapshot(path: &Path) -> Result<EmbeddingSnapshot> {
    let mut file = BufReader::new(File::open(path)?);
    let first = file.fill_buf()?.first().copied();
    match first {
        Some(b'{') => read_snapshot_jsonl(file),
        _ => read_snapshot(file),
    }
}

pub fn save_snapshot(snapshot: &EmbeddingSnapshot, path: &Path) -> Result<u64> {
    write_snapshot(snapshot, File::create(path)?)
}

/// Aligned before/after embeddings of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPairs {
    pub class: String,
    pub token_uids: Vec<u64>,
    pub before: EmbeddingMatrix,
    pub after: EmbeddingMatrix,
}

impl ClassPairs {
    pub fn len(&self) -> usize {
        self.token_uids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_uids.is_empty()
    }
}

/// Inner join of two snapshots on `token_uid`, grouped by the before label.
#[derive(Debug, Clone)]
pub struct AlignedPairSet {
    pub dim: usize,
    /// Keyed by class name, one entry per class of the before snapshot.
    pub classes: BTreeMap<String, ClassPairs>,
    /// Before-snapshot tokens with no partner.
    pub dropped_before: usize,
    /// After-snapshot tokens with no partner.
    pub dropped_after: usize,
}

impl AlignedPairSet {
    pub fn n_aligned(&self, class: &str) -> usize {
        self.classes.get(class).map_or(0, ClassPairs::len)
    }

    pub fn total_aligned(&self) -> usize {
        self.classes.values().map(ClassPairs::len).sum()
    }

    pub fn dropped(&self) -> usize {
        self.dropped_before + self.dropped_after
    }
}

pub fn align(before: &EmbeddingSnapshot, after: &EmbeddingSnapshot) -> Result<AlignedPairSet> {
    if before.dim != after.dim {
        return Err(Error::DimMismatch {
            expected: before.dim,
            actual: after.dim,
        });
    }
    let after_by_uid: HashMap<u64, &TokenRecord> =
        after.records.iter().map(|r| (r.token_uid, r)).collect();

    let mut grouped: Vec<(Vec<u64>, Vec<f32>, Vec<f32>)> =
        vec![Default::default(); before.class_table.len()];
    let mut dropped_before = 0;
    for r in &before.records {
        match after_by_uid.get(&r.token_uid) {
            Some(partner) => {
                let (uids, b, a) = &mut grouped[r.class_id as usize];
                uids.push(r.token_uid);
                b.extend_from_slice(&r.embedding);
                a.extend_from_slice(&partner.embedding);
            }
            None => dropped_before += 1,
        }
    }
    let matched: usize = grouped.iter().map(|g| g.0.len()).sum();

    let mut classes = BTreeMap::new();
    for (name, (token_uids, b, a)) in before.class_table.iter().zip(grouped) {
        classes.insert(
            name.clone(),
            ClassPairs {
                class: name.clone(),
                token_uids,
                before: EmbeddingMatrix::new(before.dim, b)?,
                after: EmbeddingMatrix::new(before.dim, a)?,
            },
        );
    }
    Ok(AlignedPairSet {
        dim: before.dim,
        classes,
        dropped_before,
        dropped_after: after.records.len() - matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(uids: &[u64]) -> EmbeddingSnapshot {
        let mut s = EmbeddingSnapshot::new("t", 2, vec!["O".into(), "PER".into()]);
        for (i, &uid) in uids.iter().enumerate() {
            s.records.push(TokenRecord {
                token_uid: uid,
                class_id: (i % 2) as u16,
                embedding: vec![uid as f32, -(uid as f32) * 0.5],
            });
        }
        s
    }

    fn encode(s: &EmbeddingSnapshot) -> Vec<u8> {
        let mut buf = Vec::new();
        write_snapshot(s, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_snapshot_is_header_only() {
        let s = EmbeddingSnapshot::new("orig", 4, vec!["O".into()]);
        let bytes = encode(&s);
        // 12 fixed + (2+4) stage + (2+1) class + 8 count
        assert_eq!(bytes.len(), 29);
        assert_eq!(read_snapshot(&bytes[..]).unwrap(), s);
    }

    #[test]
    fn layout_arithmetic() {
        let s = snap(&[1, 2, 3]);
        let header = 12 + (2 + 1) + (2 + 1) + (2 + 3) + 8;
        let bytes = encode(&s);
        assert_eq!(bytes.len(), header + 3 * (8 + 2 + 2 * 4));
        assert_eq!(s.encoded_len(), bytes.len());
        assert_eq!(&bytes[..4], b"EDRF");
        assert_eq!(&bytes[4..6], &[1, 0]);
    }

    #[test]
    fn junk_magic() {
        let mut bytes = encode(&snap(&[1]));
        bytes[..4].copy_from_slice(b"JUNK");
        assert!(matches!(read_snapshot(&bytes[..]), Err(Error::NotEdrf)));
        assert!(matches!(read_snapshot(&b"ED"[..]), Err(Error::NotEdrf)));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&snap(&[1]));
        bytes[4] = 2;
        assert!(matches!(
            read_snapshot(&bytes[..]),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncation_mid_record() {
        let bytes = encode(&snap(&[1, 2, 3]));
        for cut in [bytes.len() - 1, bytes.len() - 9, 20] {
            assert!(
                matches!(read_snapshot(&bytes[..cut]), Err(Error::CorruptFile(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn duplicate_uid_rejected_on_read_and_write() {
        let s = snap(&[7, 7]);
        assert!(matches!(
            write_snapshot(&s, Vec::new()),
            Err(Error::InvalidSnapshot(_))
        ));
        // hand-patch a valid file so two records share a uid
        let mut bytes = encode(&snap(&[7, 8]));
        let rec = 8 + 2 + 8;
        let second = bytes.len() - rec;
        bytes[second..second + 8].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(
            read_snapshot(&bytes[..]),
            Err(Error::InvalidSnapshot(_))
        ));
    }

    #[test]
    fn class_table_without_background_rejected() {
        let mut s = snap(&[1]);
        s.class_table = vec!["PER".into(), "O".into()];
        assert!(matches!(s.validate(), Err(Error::InvalidSnapshot(_))));
    }

    #[test]
    fn class_id_out_of_range_rejected() {
        let mut s = snap(&[1]);
        s.records[0].class_id = 5;
        assert!(matches!(s.validate(), Err(Error::InvalidSnapshot(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&snap(&[1]));
        bytes.push(0);
        assert!(matches!(
            read_snapshot(&bytes[..]),
            Err(Error::CorruptFile(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let s = snap(&[4, 5, 6]);
        let mut buf = Vec::new();
        write_snapshot_jsonl(&s, &mut buf).unwrap();
        assert_eq!(read_snapshot_jsonl(&buf[..]).unwrap(), s);
    }

    #[test]
    fn jsonl_unknown_label() {
        let text = "{\"stage\":\"x\",\"dim\":1,\"classes\":[\"O\"]}\n{\"uid\":1,\"label\":\"PER\",\"vec\":[0.5]}\n";
        assert!(matches!(
            read_snapshot_jsonl(text.as_bytes()),
            Err(Error::InvalidSnapshot(_))
        ));
    }

    #[test]
    fn align_self_join() {
        let s = snap(&[1, 2, 3, 4, 5]);
        let pairs = align(&s, &s).unwrap();
        let counts = s.class_counts();
        assert_eq!(pairs.n_aligned("O"), counts[0]);
        assert_eq!(pairs.n_aligned("PER"), counts[1]);
        assert_eq!(pairs.dropped(), 0);
    }

    #[test]
    fn align_disjoint() {
        let pairs = align(&snap(&[1, 2]), &snap(&[3, 4, 5])).unwrap();
        assert_eq!(pairs.total_aligned(), 0);
        assert_eq!(pairs.dropped_before, 2);
        assert_eq!(pairs.dropped_after, 3);
    }

    #[test]
    fn align_partial_overlap() {
        let pairs = align(&snap(&[1, 2, 3]), &snap(&[2, 3, 4])).unwrap();
        let mut uids: Vec<u64> = pairs
            .classes
            .values()
            .flat_map(|c| c.token_uids.clone())
            .collect();
        uids.sort();
        assert_eq!(uids, vec![2, 3]);
        assert_eq!(pairs.dropped_before, 1);
        assert_eq!(pairs.dropped_after, 1);
    }

    #[test]
    fn align_groups_by_before_label() {
        let before = snap(&[10, 11]);
        let mut after = before.clone();
        for r in &mut after.records {
            r.class_id = 1 - r.class_id;
        }
        let pairs = align(&before, &after).unwrap();
        assert_eq!(pairs.classes["O"].token_uids, vec![10]);
        assert_eq!(pairs.classes["PER"].token_uids, vec![11]);
    }

    #[test]
    fn align_dim_mismatch() {
        let a = snap(&[1]);
        let mut b = snap(&[1]);
        b.dim = 3;
        assert!(matches!(
            align(&a, &b),
            Err(Error::DimMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }
}

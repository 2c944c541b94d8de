//! Activation dump directory: a JSON manifest plus one binary file per sample.
//!
//! Per-sample layout, all little-endian:
//!
//! | field     | type             | count   |
//! |-----------|------------------|---------|
//! | magic     | `b"FVD1"`        | 4 bytes |
//! | T         | u32              | 1       |
//! | d         | u32              | 1       |
//! | P = \|V_D\| | u32            | 1       |
//! | hidden    | f32, row-major   | T × d   |
//! | targets   | u32 (V_D index)  | T       |
//! | probs     | f32, row-major   | T × P   |
//! | residual  | f32              | T       |
//! | crc32     | u32              | 1       |
//!
//! The checksum covers every byte before it, magic included.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{validate_record, ProbRow, RestrictedVocab, Role, SampleRecord, TokenId};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAGIC: &[u8; 4] = b"FVD1";
const SAMPLE_EXT: &str = "fvd";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub embedding_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_vocab_size: Option<u32>,
    pub restricted_vocab: Vec<TokenId>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<bool>,
    pub file: String,
    pub byte_length: u64,
}

impl Manifest {
    /// The dataset vocabulary as a shareable domain.
    pub fn vocab(&self) -> Result<Arc<RestrictedVocab>> {
        RestrictedVocab::from_sorted(self.restricted_vocab.clone()).map(Arc::new)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            message,
        };
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        if self.embedding_dim == 0 {
            return Err(bad("embedding_dim must be positive".into()));
        }
        if let Some(w) = self.restricted_vocab.windows(2).find(|w| w[0] >= w[1]) {
            return Err(bad(format!(
                "restricted_vocab not strictly ascending at {} -> {}",
                w[0], w[1]
            )));
        }
        if let (Some(size), Some(last)) = (self.global_vocab_size, self.restricted_vocab.last()) {
            if last.0 >= size {
                return Err(bad(format!("token {last} >= global_vocab_size {size}")));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }
}

/// Dataset-level parameters of a dump; the sample list is derived from the
/// records written.
#[derive(Clone, Debug)]
pub struct DumpLayout {
    pub embedding_dim: usize,
    pub global_vocab_size: Option<u32>,
    pub vocab: Arc<RestrictedVocab>,
}

/// Size in bytes of a sample file with `t` positions.
pub fn record_byte_length(t: usize, d: usize, p: usize) -> u64 {
    (HEADER_LEN + 4 * (t * d + t + t * p + t) + 4) as u64
}

/// Encodes the tensor part of a record in the binary layout.
pub fn encode_record(rec: &SampleRecord) -> Result<Vec<u8>> {
    let t = rec.targets.len();
    let d = rec.dim;
    let p = rec.domain.len();
    let mut buf = Vec::with_capacity(record_byte_length(t, d, p) as usize);
    buf.extend_from_slice(MAGIC);
    for n in [t, d, p] {
        let n = u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{n} exceeds u32")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    for &x in &rec.hidden {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for &tok in &rec.targets {
        let j = rec.domain.local(tok).ok_or(Error::MissingToken(tok.0))?;
        buf.extend_from_slice(&(j as u32).to_le_bytes());
    }
    for row in &rec.probs {
        if row.values.len() != p {
            return Err(Error::LengthMismatch {
                what: "probability row",
                expected: p,
                found: row.values.len(),
            });
        }
        for &x in &row.values {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    for row in &rec.probs {
        buf.extend_from_slice(&(row.residual_mass as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        v
    }

    fn f32(&mut self) -> f64 {
        f32::from_bits(self.u32()) as f64
    }
}

/// Decodes a sample file. Metadata comes from the manifest entry; the
/// probability domain must be the manifest vocabulary.
pub fn decode_record(bytes: &[u8], entry: &SampleEntry, domain: &Arc<RestrictedVocab>) -> Result<SampleRecord> {
    let corrupt = |message: String| Error::Corrupt {
        id: entry.id.clone(),
        message,
    };
    if bytes.len() < HEADER_LEN + 4 {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let t = cur.u32() as usize;
    let d = cur.u32() as usize;
    let p = cur.u32() as usize;
    let expected = record_byte_length(t, d, p);
    if bytes.len() as u64 != expected {
        return Err(corrupt(format!(
            "header implies {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum {
            id: entry.id.clone(),
            stored,
            computed,
        });
    }
    if p != domain.len() {
        return Err(corrupt(format!("P = {p} but the manifest vocabulary has {}", domain.len())));
    }

    let hidden: Vec<f64> = (0..t * d).map(|_| cur.f32()).collect();
    let mut targets = Vec::with_capacity(t);
    for k in 0..t {
        let j = cur.u32() as usize;
        if j >= p {
            return Err(corrupt(format!("target index {j} at position {k} >= P = {p}")));
        }
        targets.push(domain.token(j));
    }
    let mut probs: Vec<ProbRow> = (0..t)
        .map(|_| ProbRow {
            values: (0..p).map(|_| cur.f32()).collect(),
            residual_mass: 0.0,
        })
        .collect();
    for row in &mut probs {
        row.residual_mass = cur.f32();
    }

    Ok(SampleRecord {
        id: entry.id.clone(),
        role: entry.role,
        class_label: entry.class_label.clone(),
        clean: entry.clean,
        targets,
        hidden,
        dim: d,
        probs,
        domain: domain.clone(),
    })
}

fn sample_file_name(index: usize) -> String {
    format!("{index:06}.{SAMPLE_EXT}")
}

/// Writes a dump directory, replacing any previous dump there.
///
/// Every record is checked against `layout` before its file is written; on
/// the first inconsistency the call fails and no manifest is written.
pub fn write_dump<I>(dir: &Path, layout: &DumpLayout, records: I) -> Result<Manifest>
where
    I: IntoIterator<Item = SampleRecord>,
{
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (index, rec) in records.into_iter().enumerate() {
        let inconsistent = |message: String| Error::Inconsistent {
            id: rec.id.clone(),
            message,
        };
        if rec.dim != layout.embedding_dim {
            return Err(inconsistent(format!(
                "embedding dim {} but manifest declares {}",
                rec.dim, layout.embedding_dim
            )));
        }
        if rec.domain.as_ref() != layout.vocab.as_ref() {
            return Err(inconsistent("probability domain differs from the dump vocabulary".into()));
        }
        if let Some(size) = layout.global_vocab_size {
            if let Some(bad) = rec.targets.iter().find(|t| t.0 >= size) {
                return Err(inconsistent(format!("token {bad} >= global vocab size {size}")));
            }
        }
        let report = validate_record(&rec, &layout.vocab);
        if !report.is_valid() {
            return Err(inconsistent(report.to_string()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id.clone()));
        }
        let bytes = encode_record(&rec)?;
        let file = sample_file_name(index);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        samples.push(SampleEntry {
            id: rec.id,
            role: rec.role,
            class_label: rec.class_label,
            clean: rec.clean,
            file,
            byte_length: bytes.len() as u64,
        });
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        embedding_dim: layout.embedding_dim,
        global_vocab_size: layout.global_vocab_size,
        restricted_vocab: layout.vocab.tokens().to_vec(),
        samples,
    };
    let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        f.write_all(text.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(&tmp, e))?;
    }
    let final_path = dir.join(MANIFEST_FILE);
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    remove_stale_samples(dir, &manifest)?;
    Ok(manifest)
}

fn remove_stale_samples(dir: &Path, manifest: &Manifest) -> Result<()> {
    let live: HashSet<&str> = manifest.samples.iter().map(|s| s.file.as_str()).collect();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_sample = path.extension().is_some_and(|e| e == SAMPLE_EXT);
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if is_sample && !live.contains(name) {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Loads and checks the manifest of a dump directory.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    manifest.check(&path)?;
    Ok(manifest)
}

/// Opens a dump for streaming. Records are read one at a time in manifest
/// order; each is length-checked, checksum-verified and validated.
pub fn read_dump(dir: &Path) -> Result<(Manifest, DumpReader)> {
    let manifest = read_manifest(dir)?;
    let reader = DumpReader {
        dir: dir.to_path_buf(),
        domain: manifest.vocab()?,
        dim: manifest.embedding_dim,
        global_vocab_size: manifest.global_vocab_size,
        samples: manifest.samples.clone(),
        next: 0,
    };
    Ok((manifest, reader))
}

/// Reads a whole dump into memory.
pub fn read_all(dir: &Path) -> Result<(Manifest, Vec<SampleRecord>)> {
    let (manifest, reader) = read_dump(dir)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

pub struct DumpReader {
    dir: PathBuf,
    domain: Arc<RestrictedVocab>,
    dim: usize,
    global_vocab_size: Option<u32>,
    samples: Vec<SampleEntry>,
    next: usize,
}

impl DumpReader {
    pub fn domain(&self) -> &Arc<RestrictedVocab> {
        &self.domain
    }

    fn load(&self, entry: &SampleEntry) -> Result<SampleRecord> {
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let actual = bytes.len() as u64;
        if actual < entry.byte_length {
            return Err(Error::Truncated {
                id: entry.id.clone(),
                expected: entry.byte_length,
                actual,
            });
        }
        if actual != entry.byte_length {
            return Err(Error::Corrupt {
                id: entry.id.clone(),
                message: format!("expected {} bytes, got {actual}", entry.byte_length),
            });
        }
        let rec = decode_record(&bytes, entry, &self.domain)?;
        if rec.dim != self.dim {
            return Err(Error::Inconsistent {
                id: entry.id.clone(),
                message: format!("embedding dim {} but manifest declares {}", rec.dim, self.dim),
            });
        }
        if let Some(size) = self.global_vocab_size {
            if let Some(bad) = rec.targets.iter().find(|t| t.0 >= size) {
                return Err(Error::Inconsistent {
                    id: entry.id.clone(),
                    message: format!("token {bad} >= global vocab size {size}"),
                });
            }
        }
        let report = validate_record(&rec, &self.domain);
        if !report.is_valid() {
            return Err(Error::InvalidRecord {
                id: entry.id.clone(),
                violations: report.to_string(),
            });
        }
        Ok(rec)
    }
}

impl Iterator for DumpReader {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let entry = self.samples.get(self.next)?;
        self.next += 1;
        Some(self.load(entry))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.samples.len() - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for DumpReader {}

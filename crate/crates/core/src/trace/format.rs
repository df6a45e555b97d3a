//! On-disk layout of a trace directory:
//!
//! ```text
//! manifest.json      metadata and byte offsets
//! attn.bin           concatenated f32 LE attention payloads, [heads, rows, cols] row-major
//! emb.bin            concatenated f32 LE embedding payloads, [tokens, dim] row-major
//! annotations.jsonl  one AnnotationRecord per line
//! ```

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{
    AnnotationRecord, AttentionBlock, EmbeddingRecord, Modality, ModelDescriptor, Sample, SampleTrace,
    TraceDataset,
};
use super::validate::validate_trace;
use super::TraceError;

pub const FORMAT_VERSION: &str = "vtf-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ATTN_FILE: &str = "attn.bin";
pub const EMB_FILE: &str = "emb.bin";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub stream_tag: String,
    pub layer: usize,
    pub src: Modality,
    pub tgt: Modality,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub offset_bytes: u64,
}

impl BlockEntry {
    pub fn byte_len(&self) -> u64 {
        (self.heads * self.rows * self.cols * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub stream_tag: String,
    pub layer: i32,
    pub tokens: usize,
    pub dim: usize,
    pub offset_bytes: u64,
}

impl EmbeddingEntry {
    pub fn byte_len(&self) -> u64 {
        (self.tokens * self.dim * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndexEntry {
    pub id: String,
    pub m: usize,
    pub n: usize,
    pub blocks: Vec<BlockEntry>,
    pub embeddings: Vec<EmbeddingEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format_version: String,
    pub dtype: Dtype,
    pub endianness: Endianness,
    pub model: ModelDescriptor,
    pub samples: Vec<SampleIndexEntry>,
}

/// A validated trace directory opened for random access. Holds no file handles, so it can be
/// shared across threads; each read opens its own handle.
#[derive(Debug, Clone)]
pub struct TraceStore {
    root: PathBuf,
    manifest: TraceManifest,
    index: HashMap<String, usize>,
}

impl TraceStore {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &TraceManifest {
        &self.manifest
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.samples.iter().map(|s| s.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }
}

fn require(path: PathBuf) -> Result<PathBuf, TraceError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(TraceError::MissingFile(path))
    }
}

/// Parses and validates `manifest.json` of a trace directory, including blob bounds.
pub fn load_manifest(dir: impl AsRef<Path>) -> Result<TraceStore, TraceError> {
    let root = dir.as_ref().to_path_buf();
    let manifest_path = require(root.join(MANIFEST_FILE))?;
    let attn_path = require(root.join(ATTN_FILE))?;
    let emb_path = require(root.join(EMB_FILE))?;

    let text = fs::read_to_string(&manifest_path)?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| TraceError::BadMagic(format!("manifest is not JSON: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| TraceError::BadMagic("manifest has no format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(TraceError::VersionMismatch { found: version.to_string() });
    }
    for (key, want) in [("dtype", "f32"), ("endianness", "little")] {
        let found = raw.get(key).and_then(|v| v.as_str()).unwrap_or("");
        if found != want {
            return Err(TraceError::UnsupportedEncoding(format!("{key} = {found:?}, expected {want:?}")));
        }
    }
    let manifest: TraceManifest = serde_json::from_value(raw)?;
    manifest.model.validate()?;

    let mut index = HashMap::with_capacity(manifest.samples.len());
    for (i, s) in manifest.samples.iter().enumerate() {
        if index.insert(s.id.clone(), i).is_some() {
            return Err(TraceError::DuplicateSampleId(s.id.clone()));
        }
        check_entry_shapes(&manifest.model, s)?;
    }

    let attn_len = fs::metadata(&attn_path)?.len();
    let emb_len = fs::metadata(&emb_path)?.len();
    let blocks = manifest
        .samples
        .iter()
        .flat_map(|s| s.blocks.iter().map(move |b| (s.id.as_str(), b.offset_bytes, b.byte_len())));
    check_regions(ATTN_FILE, attn_len, blocks)?;
    let embs = manifest
        .samples
        .iter()
        .flat_map(|s| s.embeddings.iter().map(move |e| (s.id.as_str(), e.offset_bytes, e.byte_len())));
    check_regions(EMB_FILE, emb_len, embs)?;

    Ok(TraceStore { root, manifest, index })
}

fn check_entry_shapes(model: &ModelDescriptor, s: &SampleIndexEntry) -> Result<(), TraceError> {
    let bad = |what: String| Err(TraceError::InvalidManifest(format!("sample {}: {what}", s.id)));
    if s.m == 0 || s.n == 0 {
        return bad(format!("m = {}, n = {} (both must be >= 1)", s.m, s.n));
    }
    for b in &s.blocks {
        let Some(dims) = model.stream(&b.stream_tag) else {
            return bad(format!("unknown stream {:?}", b.stream_tag));
        };
        if !model.allows_block(&b.stream_tag, b.src, b.tgt) {
            return bad(format!("block {} {}->{} not allowed", b.stream_tag, b.src, b.tgt));
        }
        if b.layer >= dims.layer_count || b.heads != dims.head_count {
            return bad(format!("block {} L{} has {} heads, model declares {}x{}",
                b.stream_tag, b.layer, b.heads, dims.layer_count, dims.head_count));
        }
        if b.rows != b.src.token_count(s.m, s.n) || b.cols != b.tgt.token_count(s.m, s.n) {
            return bad(format!("block {} L{} shape {}x{} inconsistent with m={}, n={}",
                b.stream_tag, b.layer, b.rows, b.cols, s.m, s.n));
        }
    }
    for e in &s.embeddings {
        let Some(dims) = model.stream(&e.stream_tag) else {
            return bad(format!("unknown embedding stream {:?}", e.stream_tag));
        };
        if !model.allows_embedding(&e.stream_tag)
            || e.dim != dims.hidden_dim
            || e.layer < -1
            || e.layer >= dims.layer_count as i32
            || e.tokens != model.embedding_tokens(&e.stream_tag, s.m, s.n)
        {
            return bad(format!("embedding {} L{} inconsistent with model", e.stream_tag, e.layer));
        }
    }
    Ok(())
}

fn check_regions<'a>(
    file: &'static str,
    file_len: u64,
    regions: impl Iterator<Item = (&'a str, u64, u64)>,
) -> Result<(), TraceError> {
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for (id, offset, len) in regions {
        if len == 0 {
            continue;
        }
        if offset >= file_len {
            return Err(TraceError::OffsetOverlap(format!(
                "{file}: sample {id} offset {offset} at or past end of file ({file_len} bytes)"
            )));
        }
        if offset + len > file_len {
            return Err(TraceError::TruncatedBlob {
                file,
                needed: offset + len,
                len: file_len,
            });
        }
        spans.push((offset, offset + len, id));
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(TraceError::OffsetOverlap(format!(
                "{file}: region [{}, {}) of {} overlaps [{}, {}) of {}",
                pair[1].0, pair[1].1, pair[1].2, pair[0].0, pair[0].1, pair[0].2
            )));
        }
    }
    Ok(())
}

fn read_f32s(file: &mut File, name: &'static str, offset: u64, count: usize) -> Result<Vec<f32>, TraceError> {
    let len = file.metadata()?.len();
    let needed = offset + count as u64 * 4;
    if needed > len {
        return Err(TraceError::TruncatedBlob { file: name, needed, len });
    }
    file.seek(SeekFrom::Start(offset))?;
    let mut bytes = vec![0u8; count * 4];
    file.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Decodes one sample's tensors.
pub fn read_sample(store: &TraceStore, sample_id: &str) -> Result<SampleTrace, TraceError> {
    let idx = *store
        .index
        .get(sample_id)
        .ok_or_else(|| TraceError::UnknownSample(sample_id.to_string()))?;
    let entry = &store.manifest.samples[idx];
    let mut attn = File::open(store.root.join(ATTN_FILE))?;
    let mut emb = File::open(store.root.join(EMB_FILE))?;

    let mut attention_blocks = Vec::with_capacity(entry.blocks.len());
    for b in &entry.blocks {
        let values = read_f32s(&mut attn, ATTN_FILE, b.offset_bytes, b.heads * b.rows * b.cols)?;
        attention_blocks.push(AttentionBlock {
            stream_tag: b.stream_tag.clone(),
            layer: b.layer,
            src: b.src,
            tgt: b.tgt,
            heads: b.heads,
            rows: b.rows,
            cols: b.cols,
            values,
        });
    }
    let mut embeddings = Vec::with_capacity(entry.embeddings.len());
    for e in &entry.embeddings {
        let values = read_f32s(&mut emb, EMB_FILE, e.offset_bytes, e.tokens * e.dim)?;
        embeddings.push(EmbeddingRecord {
            stream_tag: e.stream_tag.clone(),
            layer: e.layer,
            tokens: e.tokens,
            dim: e.dim,
            values,
        });
    }
    Ok(SampleTrace {
        sample_id: entry.id.clone(),
        token_types: SampleTrace::layout_for(entry.m, entry.n),
        attention_blocks,
        embeddings,
    })
}

/// Reads `annotations.jsonl`; a missing file means no annotations.
pub fn read_annotations(store: &TraceStore) -> Result<HashMap<String, AnnotationRecord>, TraceError> {
    let path = store.root.join(ANNOTATIONS_FILE);
    let mut out = HashMap::new();
    if !path.is_file() {
        return Ok(out);
    }
    for (lineno, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| TraceError::InvalidAnnotation(format!("line {}: {e}", lineno + 1)))?;
        if !store.index.contains_key(&record.sample_id) {
            return Err(TraceError::InvalidAnnotation(format!(
                "line {}: unknown sample {:?}",
                lineno + 1,
                record.sample_id
            )));
        }
        if out.insert(record.sample_id.clone(), record).is_some() {
            return Err(TraceError::InvalidAnnotation(format!("line {}: duplicate record", lineno + 1)));
        }
    }
    Ok(out)
}

/// Loads every sample and its annotations into memory, in manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<TraceDataset, TraceError> {
    let store = load_manifest(dir)?;
    let mut annotations = read_annotations(&store)?;
    let samples = store
        .manifest
        .samples
        .iter()
        .map(|entry| {
            let trace = read_sample(&store, &entry.id)?;
            let annotation = annotations
                .remove(&entry.id)
                .unwrap_or_else(|| AnnotationRecord::empty(entry.id.clone()));
            Ok(Sample { trace, annotation })
        })
        .collect::<Result<Vec<_>, TraceError>>()?;
    Ok(TraceDataset { model: store.manifest.model.clone(), samples })
}

/// Writes a dataset as a trace directory, creating `dir` if needed. Every sample must pass
/// validation.
pub fn write_dataset(dataset: &TraceDataset, dir: impl AsRef<Path>) -> Result<TraceManifest, TraceError> {
    dataset.model.validate()?;
    let mut ids = HashSet::new();
    let mut violations = Vec::new();
    for s in &dataset.samples {
        if !ids.insert(s.id()) {
            return Err(TraceError::DuplicateSampleId(s.id().to_string()));
        }
        let report = validate_trace(&s.trace, Some(&dataset.model), Some(&s.annotation));
        violations.extend(report.violations);
    }
    if !violations.is_empty() {
        return Err(TraceError::InvariantViolation(violations));
    }

    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut attn = BufWriter::new(File::create(dir.join(ATTN_FILE))?);
    let mut emb = BufWriter::new(File::create(dir.join(EMB_FILE))?);
    let mut ann = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    let (mut attn_off, mut emb_off) = (0u64, 0u64);
    let mut entries = Vec::with_capacity(dataset.samples.len());

    for s in &dataset.samples {
        let (m, n) = s.trace.segment_lengths().expect("validated layout");
        let mut blocks = Vec::with_capacity(s.trace.attention_blocks.len());
        for b in &s.trace.attention_blocks {
            write_f32s(&mut attn, &b.values)?;
            blocks.push(BlockEntry {
                stream_tag: b.stream_tag.clone(),
                layer: b.layer,
                src: b.src,
                tgt: b.tgt,
                heads: b.heads,
                rows: b.rows,
                cols: b.cols,
                offset_bytes: attn_off,
            });
            attn_off += b.byte_len();
        }
        let mut embeddings = Vec::with_capacity(s.trace.embeddings.len());
        for e in &s.trace.embeddings {
            write_f32s(&mut emb, &e.values)?;
            embeddings.push(EmbeddingEntry {
                stream_tag: e.stream_tag.clone(),
                layer: e.layer,
                tokens: e.tokens,
                dim: e.dim,
                offset_bytes: emb_off,
            });
            emb_off += e.byte_len();
        }
        serde_json::to_writer(&mut ann, &s.annotation)?;
        ann.write_all(b"\n")?;
        entries.push(SampleIndexEntry { id: s.id().to_string(), m, n, blocks, embeddings });
    }
    attn.flush()?;
    emb.flush()?;
    ann.flush()?;

    let manifest = TraceManifest {
        format_version: FORMAT_VERSION.to_string(),
        dtype: Dtype::F32,
        endianness: Endianness::Little,
        model: dataset.model.clone(),
        samples: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

fn write_f32s(out: &mut impl Write, values: &[f32]) -> Result<(), TraceError> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

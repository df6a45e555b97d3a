//! Trace datasets: in-memory types, the on-disk trace directory format and validation.

mod format;
mod types;
mod validate;

use std::path::PathBuf;

use thiserror::Error;

pub use format::{
    load_dataset, load_manifest, read_annotations, read_sample, write_dataset, BlockEntry, Dtype,
    EmbeddingEntry, Endianness, SampleIndexEntry, TraceManifest, TraceStore, ANNOTATIONS_FILE, ATTN_FILE,
    EMB_FILE, FORMAT_VERSION, MANIFEST_FILE,
};
pub use types::*;
pub use validate::{validate_trace, Check, ValidationReport, Violation, ROW_SUM_TOLERANCE};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("not a trace manifest: {0}")]
    BadMagic(String),
    #[error("unsupported format version {found:?} (expected {FORMAT_VERSION:?})")]
    VersionMismatch { found: String },
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("bad blob offsets: {0}")]
    OffsetOverlap(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid annotations: {0}")]
    InvalidAnnotation(String),
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("{file} truncated: need {needed} bytes, file has {len}")]
    TruncatedBlob { file: &'static str, needed: u64, len: u64 },
    #[error("{} invariant violation(s), first: {}", .0.len(), .0[0])]
    InvariantViolation(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Validates every sample of an in-memory dataset against the model and its annotations.
pub fn validate_dataset(dataset: &TraceDataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    for s in &dataset.samples {
        report.extend(validate_trace(&s.trace, Some(&dataset.model), Some(&s.annotation)));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, m: usize, n: usize) -> Sample {
        let s = m + n + 2;
        let mut block = AttentionBlock::zeros(JOINT, 0, Modality::Joint, Modality::Joint, 2, s, s);
        for h in 0..2 {
            for r in 0..s {
                let row = block.row_mut(h, r);
                row[(r + h) % s] = 1.0;
            }
        }
        let emb = EmbeddingRecord {
            stream_tag: JOINT.into(),
            layer: 0,
            tokens: s,
            dim: 3,
            values: (0..s * 3).map(|v| v as f32 * 0.5).collect(),
        };
        Sample {
            trace: SampleTrace {
                sample_id: id.into(),
                token_types: SampleTrace::layout_for(m, n),
                attention_blocks: vec![block],
                embeddings: vec![emb],
            },
            annotation: AnnotationRecord::empty(id),
        }
    }

    fn dataset() -> TraceDataset {
        TraceDataset {
            model: ModelDescriptor::single_stream(StreamDims::new(1, 2, 3)),
            samples: vec![sample("a", 1, 2), sample("b", 2, 1)],
        }
    }

    #[test]
    fn roundtrip_small_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn unknown_sample_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(), dir.path()).unwrap();
        let store = load_manifest(dir.path()).unwrap();
        assert!(matches!(read_sample(&store, "zz"), Err(TraceError::UnknownSample(_))));
        std::fs::remove_file(dir.path().join(EMB_FILE)).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(TraceError::MissingFile(_))));
    }

    #[test]
    fn nan_rejected_on_write() {
        let mut ds = dataset();
        ds.samples[0].trace.attention_blocks[0].values[3] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_dataset(&ds, dir.path()), Err(TraceError::InvariantViolation(_))));
    }

    #[test]
    fn truncated_attention_blob() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&dataset(), dir.path()).unwrap();
        let store = load_manifest(dir.path()).unwrap();
        let path = dir.path().join(ATTN_FILE);
        let len = std::fs::metadata(&path).unwrap().len();
        std::fs::OpenOptions::new().write(true).open(&path).unwrap().set_len(len - 4).unwrap();
        assert!(matches!(read_sample(&store, "b"), Err(TraceError::TruncatedBlob { .. })));
        assert!(matches!(load_manifest(dir.path()), Err(TraceError::TruncatedBlob { .. })));
    }

    #[test]
    fn offset_past_end_and_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&dataset(), dir.path()).unwrap();
        let attn_len = std::fs::metadata(dir.path().join(ATTN_FILE)).unwrap().len();

        let mut bad = manifest.clone();
        bad.samples[1].blocks[0].offset_bytes = attn_len + 16;
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(TraceError::OffsetOverlap(_))));

        let mut bad = manifest.clone();
        bad.samples[1].blocks[0].offset_bytes = 4;
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(TraceError::OffsetOverlap(_))));
    }

    #[test]
    fn duplicate_id_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&dataset(), dir.path()).unwrap();
        let mut bad = manifest.clone();
        bad.samples[1].id = "a".into();
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(TraceError::DuplicateSampleId(_))));

        let mut bad = manifest;
        bad.format_version = "vtf-2".into();
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(TraceError::VersionMismatch { .. })));

        std::fs::write(dir.path().join(MANIFEST_FILE), "\u{0}\u{1}binary").unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(TraceError::BadMagic(_))));
    }
}

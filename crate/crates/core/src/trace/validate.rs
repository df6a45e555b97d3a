use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::types::{AnnotationRecord, ModelDescriptor, SampleTrace, TokenType};

/// Maximum tolerated `|Σ row − 1|` for an attention row.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Layout,
    BlockMeta,
    BlockShape,
    DuplicateBlock,
    NonFinite,
    UnitInterval,
    RowStochastic,
    EmbeddingMeta,
    EmbeddingShape,
    SpanBounds,
    UnknownPhrase,
    DuplicatePhrase,
    RegionBounds,
    SampleMismatch,
}

impl Check {
    pub fn name(self) -> &'static str {
        match self {
            Check::Layout => "layout",
            Check::BlockMeta => "block_meta",
            Check::BlockShape => "block_shape",
            Check::DuplicateBlock => "duplicate_block",
            Check::NonFinite => "non_finite",
            Check::UnitInterval => "unit_interval",
            Check::RowStochastic => "row_stochastic",
            Check::EmbeddingMeta => "embedding_meta",
            Check::EmbeddingShape => "embedding_shape",
            Check::SpanBounds => "span_bounds",
            Check::UnknownPhrase => "unknown_phrase",
            Check::DuplicatePhrase => "duplicate_phrase",
            Check::RegionBounds => "region_bounds",
            Check::SampleMismatch => "sample_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub sample_id: String,
    pub check: Check,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}, {}", self.sample_id, self.check.name(), self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, check: Check) -> bool {
        self.violations.iter().any(|v| v.check == check)
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }
}

struct Collector<'a> {
    sample_id: &'a str,
    report: ValidationReport,
}

impl Collector<'_> {
    fn push(&mut self, check: Check, detail: String) {
        self.report.violations.push(Violation {
            sample_id: self.sample_id.to_string(),
            check,
            detail,
        });
    }
}

/// Lists every violated invariant of a decoded sample. Model-dependent checks run only when
/// `model` is given, annotation checks only when `annotation` is given.
pub fn validate_trace(
    sample: &SampleTrace,
    model: Option<&ModelDescriptor>,
    annotation: Option<&AnnotationRecord>,
) -> ValidationReport {
    let mut out = Collector { sample_id: &sample.sample_id, report: ValidationReport::default() };

    let lengths = sample.segment_lengths();
    if lengths.is_none() {
        out.push(Check::Layout, layout_detail(&sample.token_types));
    }

    let mut seen = HashSet::new();
    for block in &sample.attention_blocks {
        let name = format!("{} L{} {}->{}", block.stream_tag, block.layer, block.src, block.tgt);
        if !seen.insert((block.stream_tag.as_str(), block.layer, block.src, block.tgt)) {
            out.push(Check::DuplicateBlock, name.clone());
        }
        if let Some(model) = model {
            match model.stream(&block.stream_tag) {
                Some(dims) if model.allows_block(&block.stream_tag, block.src, block.tgt) => {
                    if block.layer >= dims.layer_count {
                        out.push(
                            Check::BlockMeta,
                            format!("{name}: layer {} >= layer_count {}", block.layer, dims.layer_count),
                        );
                    }
                    if block.heads != dims.head_count {
                        out.push(
                            Check::BlockMeta,
                            format!("{name}: heads {} != head_count {}", block.heads, dims.head_count),
                        );
                    }
                }
                _ => out.push(Check::BlockMeta, format!("{name}: not allowed for {:?}", model.architecture)),
            }
        }
        if let Some((m, n)) = lengths {
            let (rows, cols) = (block.src.token_count(m, n), block.tgt.token_count(m, n));
            if block.rows != rows || block.cols != cols {
                out.push(
                    Check::BlockShape,
                    format!("{name}: {}x{} but tokens imply {rows}x{cols}", block.rows, block.cols),
                );
            }
        }
        if block.values.len() != block.heads * block.rows * block.cols {
            out.push(
                Check::BlockShape,
                format!("{name}: {} values for [{}, {}, {}]", block.values.len(), block.heads, block.rows, block.cols),
            );
            continue;
        }
        check_rows(&mut out, &name, block.heads, block.rows, block.cols, &block.values);
    }

    let mut seen = HashSet::new();
    for emb in &sample.embeddings {
        let name = format!("{} L{}", emb.stream_tag, emb.layer);
        if !seen.insert((emb.stream_tag.as_str(), emb.layer)) {
            out.push(Check::EmbeddingMeta, format!("{name}: duplicate record"));
        }
        if emb.values.len() != emb.tokens * emb.dim {
            out.push(
                Check::EmbeddingShape,
                format!("{name}: {} values for [{}, {}]", emb.values.len(), emb.tokens, emb.dim),
            );
        }
        if emb.values.iter().any(|v| !v.is_finite()) {
            out.push(Check::NonFinite, format!("{name}: non-finite embedding value"));
        }
        if let Some(model) = model {
            match model.stream(&emb.stream_tag) {
                Some(dims) if model.allows_embedding(&emb.stream_tag) => {
                    if emb.layer < -1 || emb.layer >= dims.layer_count as i32 {
                        out.push(Check::EmbeddingMeta, format!("{name}: layer out of range"));
                    }
                    if emb.dim != dims.hidden_dim {
                        out.push(
                            Check::EmbeddingShape,
                            format!("{name}: dim {} != hidden_dim {}", emb.dim, dims.hidden_dim),
                        );
                    }
                    if let Some((m, n)) = lengths {
                        let tokens = model.embedding_tokens(&emb.stream_tag, m, n);
                        if emb.tokens != tokens {
                            out.push(
                                Check::EmbeddingShape,
                                format!("{name}: {} tokens but sample implies {tokens}", emb.tokens),
                            );
                        }
                    }
                }
                _ => out.push(Check::EmbeddingMeta, format!("{name}: stream not allowed")),
            }
        }
    }

    if let Some(ann) = annotation {
        check_annotation(&mut out, ann, lengths);
    }
    out.report
}

fn layout_detail(types: &[TokenType]) -> String {
    let cls = types.iter().filter(|t| **t == TokenType::Cls).count();
    let sep = types.iter().filter(|t| **t == TokenType::Sep).count();
    format!(
        "expected [CLS] text+ [SEP] visual+ (len {}, {cls} CLS, {sep} SEP, first {:?})",
        types.len(),
        types.first()
    )
}

fn check_rows(out: &mut Collector<'_>, name: &str, heads: usize, rows: usize, cols: usize, values: &[f32]) {
    for h in 0..heads {
        for r in 0..rows {
            let row = &values[(h * rows + r) * cols..(h * rows + r + 1) * cols];
            if row.iter().any(|v| !v.is_finite()) {
                out.push(Check::NonFinite, format!("{name} H{h} row {r}"));
                continue;
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                out.push(Check::UnitInterval, format!("{name} H{h} row {r}: value outside [0,1]"));
            }
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            let dev = (sum - 1.0).abs();
            if dev > ROW_SUM_TOLERANCE {
                out.push(
                    Check::RowStochastic,
                    format!("|Σ−1|={dev:.1e} > {ROW_SUM_TOLERANCE:.0e} ({name} H{h} row {r})"),
                );
            }
        }
    }
}

fn check_annotation(out: &mut Collector<'_>, ann: &AnnotationRecord, lengths: Option<(usize, usize)>) {
    if ann.sample_id != out.sample_id {
        let detail = format!("annotation for {:?}", ann.sample_id);
        out.push(Check::SampleMismatch, detail);
    }
    let mut ids = HashSet::new();
    for phrase in &ann.phrases {
        if !ids.insert(phrase.phrase_id.as_str()) {
            out.push(Check::DuplicatePhrase, phrase.phrase_id.clone());
        }
        let [start, end] = phrase.token_span;
        let bad = start >= end || lengths.is_some_and(|(m, _)| end > m);
        if bad {
            let m = lengths.map_or("?".to_string(), |(m, _)| m.to_string());
            out.push(
                Check::SpanBounds,
                format!("phrase {} span [{start},{end}) outside text segment of length {m}", phrase.phrase_id),
            );
        }
    }
    let n = lengths.map(|(_, n)| n);
    for link in &ann.coref_links {
        if !ids.contains(link.phrase_id.as_str()) {
            out.push(Check::UnknownPhrase, format!("coref link to {:?}", link.phrase_id));
        }
        if n.is_some_and(|n| link.region_index >= n) {
            out.push(
                Check::RegionBounds,
                format!("coref region {} >= {}", link.region_index, n.unwrap_or(0)),
            );
        }
    }
    for rel in &ann.relations {
        for region in [rel.subj_region, rel.obj_region] {
            if n.is_some_and(|n| region >= n) {
                out.push(
                    Check::RegionBounds,
                    format!("relation {} region {region} >= {}", rel.predicate_id, n.unwrap_or(0)),
                );
            }
        }
    }
}

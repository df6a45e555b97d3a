use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::TraceError;

/// How the model arranges its transformer stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One encoder over the concatenated `[CLS] text [SEP] regions` sequence.
    SingleStream,
    /// Per-modality encoders followed by a cross-modality encoder.
    TwoStream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDims {
    pub layer_count: usize,
    pub head_count: usize,
    pub hidden_dim: usize,
}

impl StreamDims {
    pub fn new(layer_count: usize, head_count: usize, hidden_dim: usize) -> Self {
        Self { layer_count, head_count, hidden_dim }
    }
}

pub const JOINT: &str = "joint";
pub const TEXT: &str = "text";
pub const VISUAL: &str = "visual";
pub const CROSS: &str = "cross";
/// Cross-attention sublayer of a two-stream cross encoder layer.
pub const CROSS_XATT: &str = "cross.xatt";
/// Per-modality self-attention sublayer of a two-stream cross encoder layer.
pub const CROSS_SELF: &str = "cross.self";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub architecture: Architecture,
    pub streams: BTreeMap<String, StreamDims>,
}

impl ModelDescriptor {
    pub fn single_stream(dims: StreamDims) -> Self {
        let mut streams = BTreeMap::new();
        streams.insert(JOINT.to_string(), dims);
        Self { architecture: Architecture::SingleStream, streams }
    }

    pub fn two_stream(text: StreamDims, visual: StreamDims, cross: StreamDims) -> Self {
        let mut streams = BTreeMap::new();
        streams.insert(TEXT.to_string(), text);
        streams.insert(VISUAL.to_string(), visual);
        streams.insert(CROSS.to_string(), cross);
        Self { architecture: Architecture::TwoStream, streams }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        let expected: &[&str] = match self.architecture {
            Architecture::SingleStream => &[JOINT],
            Architecture::TwoStream => &[CROSS, TEXT, VISUAL],
        };
        let found: Vec<&str> = self.streams.keys().map(String::as_str).collect();
        if found != expected {
            return Err(TraceError::InvalidManifest(format!(
                "{:?} model must declare streams {:?}, found {:?}",
                self.architecture, expected, found
            )));
        }
        for (tag, dims) in &self.streams {
            if dims.layer_count == 0 || dims.head_count == 0 || dims.hidden_dim == 0 {
                return Err(TraceError::InvalidManifest(format!(
                    "stream {tag}: layer_count, head_count and hidden_dim must be >= 1"
                )));
            }
        }
        Ok(())
    }

    /// Dimensions for a block or embedding tag; sublayer suffixes (`cross.xatt`) resolve to
    /// their base stream.
    pub fn stream(&self, tag: &str) -> Option<&StreamDims> {
        let base = tag.split('.').next().unwrap_or(tag);
        self.streams.get(base)
    }

    /// Stream whose embeddings cover both modalities of the sequence.
    pub fn fused_stream(&self) -> &'static str {
        match self.architecture {
            Architecture::SingleStream => JOINT,
            Architecture::TwoStream => CROSS,
        }
    }

    /// Stream whose embeddings cover the text tokens before any cross-modal mixing.
    pub fn text_stream(&self) -> &'static str {
        match self.architecture {
            Architecture::SingleStream => JOINT,
            Architecture::TwoStream => TEXT,
        }
    }

    /// Block tags and modality pairs legal for this architecture.
    pub fn allows_block(&self, tag: &str, src: Modality, tgt: Modality) -> bool {
        use Modality::*;
        match (self.architecture, tag) {
            (Architecture::SingleStream, JOINT) => src == Joint && tgt == Joint,
            (Architecture::TwoStream, TEXT) => src == Text && tgt == Text,
            (Architecture::TwoStream, VISUAL) => src == Visual && tgt == Visual,
            (Architecture::TwoStream, CROSS_XATT) => {
                matches!((src, tgt), (Text, Visual) | (Visual, Text))
            }
            (Architecture::TwoStream, CROSS_SELF) => {
                matches!((src, tgt), (Text, Text) | (Visual, Visual))
            }
            _ => false,
        }
    }

    /// Embedding tags legal for this architecture.
    pub fn allows_embedding(&self, tag: &str) -> bool {
        match self.architecture {
            Architecture::SingleStream => tag == JOINT,
            Architecture::TwoStream => matches!(tag, TEXT | VISUAL | CROSS),
        }
    }

    /// Number of tokens an embedding record of `tag` holds for a sample with `m` text and `n`
    /// visual tokens.
    pub fn embedding_tokens(&self, tag: &str, m: usize, n: usize) -> usize {
        match tag {
            TEXT => m + 2,
            VISUAL => n,
            _ => m + n + 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TokenType {
    Cls,
    Text,
    Sep,
    Visual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Joint,
    Text,
    Visual,
}

impl Modality {
    /// Number of rows/cols a block side of this modality spans.
    pub fn token_count(self, m: usize, n: usize) -> usize {
        match self {
            Modality::Joint => m + n + 2,
            Modality::Text => m + 2,
            Modality::Visual => n,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Joint => "joint",
            Modality::Text => "text",
            Modality::Visual => "visual",
        })
    }
}

/// `heads` stacked row-stochastic attention maps, stored heads-outermost and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub stream_tag: String,
    pub layer: usize,
    pub src: Modality,
    pub tgt: Modality,
    pub heads: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl AttentionBlock {
    pub fn zeros(
        stream_tag: impl Into<String>,
        layer: usize,
        src: Modality,
        tgt: Modality,
        heads: usize,
        rows: usize,
        cols: usize,
    ) -> Self {
        Self {
            stream_tag: stream_tag.into(),
            layer,
            src,
            tgt,
            heads,
            rows,
            cols,
            values: vec![0.0; heads * rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, head: usize, row: usize, col: usize) -> f32 {
        self.values[(head * self.rows + row) * self.cols + col]
    }

    #[inline]
    pub fn row(&self, head: usize, row: usize) -> &[f32] {
        let start = (head * self.rows + row) * self.cols;
        &self.values[start..start + self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, head: usize, row: usize) -> &mut [f32] {
        let start = (head * self.rows + row) * self.cols;
        &mut self.values[start..start + self.cols]
    }

    pub fn byte_len(&self) -> u64 {
        (self.heads * self.rows * self.cols * 4) as u64
    }
}

/// Token embeddings `[tokens, dim]` of one stream at one layer. Layer −1 holds raw input
/// embeddings when present.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub stream_tag: String,
    pub layer: i32,
    pub tokens: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl EmbeddingRecord {
    #[inline]
    pub fn token(&self, index: usize) -> &[f32] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn token_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn byte_len(&self) -> u64 {
        (self.tokens * self.dim * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub sample_id: String,
    pub token_types: Vec<TokenType>,
    pub attention_blocks: Vec<AttentionBlock>,
    pub embeddings: Vec<EmbeddingRecord>,
}

impl SampleTrace {
    /// `[CLS] t_1..t_m [SEP] v_1..v_n`.
    pub fn layout_for(m: usize, n: usize) -> Vec<TokenType> {
        let mut types = Vec::with_capacity(m + n + 2);
        types.push(TokenType::Cls);
        types.extend(std::iter::repeat_n(TokenType::Text, m));
        types.push(TokenType::Sep);
        types.extend(std::iter::repeat_n(TokenType::Visual, n));
        types
    }

    /// Text and visual token counts `(m, n)`, or `None` when the layout is malformed.
    pub fn segment_lengths(&self) -> Option<(usize, usize)> {
        let types = &self.token_types;
        if types.first() != Some(&TokenType::Cls) {
            return None;
        }
        let sep = types.iter().position(|t| *t == TokenType::Sep)?;
        let m = sep - 1;
        let n = types.len() - sep - 1;
        let text_ok = types[1..sep].iter().all(|t| *t == TokenType::Text);
        let vis_ok = types[sep + 1..].iter().all(|t| *t == TokenType::Visual);
        (m >= 1 && n >= 1 && text_ok && vis_ok).then_some((m, n))
    }

    pub fn block(&self, stream_tag: &str, layer: usize, src: Modality, tgt: Modality) -> Option<&AttentionBlock> {
        self.attention_blocks
            .iter()
            .find(|b| b.layer == layer && b.src == src && b.tgt == tgt && b.stream_tag == stream_tag)
    }

    pub fn block_mut(
        &mut self,
        stream_tag: &str,
        layer: usize,
        src: Modality,
        tgt: Modality,
    ) -> Option<&mut AttentionBlock> {
        self.attention_blocks
            .iter_mut()
            .find(|b| b.layer == layer && b.src == src && b.tgt == tgt && b.stream_tag == stream_tag)
    }

    pub fn embedding(&self, stream_tag: &str, layer: i32) -> Option<&EmbeddingRecord> {
        self.embeddings.iter().find(|e| e.layer == layer && e.stream_tag == stream_tag)
    }

    pub fn embedding_mut(&mut self, stream_tag: &str, layer: i32) -> Option<&mut EmbeddingRecord> {
        self.embeddings
            .iter_mut()
            .find(|e| e.layer == layer && e.stream_tag == stream_tag)
    }
}

/// Entity types of visual coreference links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorefLabel {
    People,
    Bodyparts,
    Scene,
    Clothing,
    Animals,
    Instruments,
    Vehicles,
    Other,
}

impl CorefLabel {
    pub const ALL: [CorefLabel; 8] = [
        CorefLabel::People,
        CorefLabel::Bodyparts,
        CorefLabel::Scene,
        CorefLabel::Clothing,
        CorefLabel::Animals,
        CorefLabel::Instruments,
        CorefLabel::Vehicles,
        CorefLabel::Other,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|l| *l == self).expect("label in ALL")
    }

    pub fn name(self) -> &'static str {
        match self {
            CorefLabel::People => "people",
            CorefLabel::Bodyparts => "bodyparts",
            CorefLabel::Scene => "scene",
            CorefLabel::Clothing => "clothing",
            CorefLabel::Animals => "animals",
            CorefLabel::Instruments => "instruments",
            CorefLabel::Vehicles => "vehicles",
            CorefLabel::Other => "other",
        }
    }
}

impl fmt::Display for CorefLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorefLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CorefLabel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown coref label {s:?}"))
    }
}

/// A noun phrase; `token_span` is a half-open range over text positions (0 = first text token,
/// i.e. sequence position 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phrase {
    pub phrase_id: String,
    pub token_span: [usize; 2],
    #[serde(default)]
    pub surface_text: String,
}

impl Phrase {
    /// Sequence positions covered by the phrase.
    pub fn positions(&self) -> std::ops::Range<usize> {
        self.token_span[0] + 1..self.token_span[1] + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorefLink {
    pub phrase_id: String,
    pub region_index: usize,
    pub label: CorefLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subj_region: usize,
    pub obj_region: usize,
    pub predicate_id: String,
    pub annotation_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    #[serde(default)]
    pub phrases: Vec<Phrase>,
    #[serde(default)]
    pub coref_links: Vec<CorefLink>,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

impl AnnotationRecord {
    pub fn empty(sample_id: impl Into<String>) -> Self {
        Self { sample_id: sample_id.into(), ..Default::default() }
    }

    pub fn phrase(&self, phrase_id: &str) -> Option<&Phrase> {
        self.phrases.iter().find(|p| p.phrase_id == phrase_id)
    }
}

/// One trace together with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub trace: SampleTrace,
    pub annotation: AnnotationRecord,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.trace.sample_id
    }
}

/// A fully decoded dataset held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub model: ModelDescriptor,
    pub samples: Vec<Sample>,
}

impl TraceDataset {
    pub fn sample(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id() == sample_id)
    }

    /// Sample indices ordered by sample id; reductions run in this order so results do not
    /// depend on storage order.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.sort_by(|&a, &b| self.samples[a].id().cmp(self.samples[b].id()));
        order
    }
}

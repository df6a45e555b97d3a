//! Closed-form per-head attention statistics: modality importance of the `[CLS]` row,
//! image-to-text heads, and coreference / relation max-attention tables with random baselines.

mod modality;
mod pairs;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use modality::{image_to_text_heads, mi_aggregate, modality_importance, HeadMi, I2tResult, MiResult};
pub use pairs::{
    coref_head_stats, relation_head_stats, BaselineStat, Direction, HeadStatEntry, HeadStatTable, PairStatsOptions,
};

use crate::trace::{
    Architecture, AttentionBlock, Modality, ModelDescriptor, SampleTrace, CROSS, CROSS_SELF, CROSS_XATT, JOINT, VISUAL,
};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("this statistic is defined for single-stream models only")]
    NotSingleStream,
    #[error("sample {0} has no [CLS] row in its joint blocks")]
    MissingClsRow(String),
    #[error("sample {sample} is missing the {what} block")]
    MissingBlock { sample: String, what: String },
    #[error("sample {0} has a malformed token layout")]
    BadLayout(String),
    #[error("sample {sample}: {what}")]
    BadAnnotation { sample: String, what: String },
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("dataset has no coreference links")]
    NoCorefLinks,
    #[error("dataset has no relation annotations")]
    NoRelations,
}

/// Per-head matrix `[layer row][head]`.
pub type HeadGrid = Vec<Vec<f64>>;

/// A head addressed by its row in a [`HeadLayout`] and its head index (both 0-based).
/// Displayed 1-based as `layer-head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.layer + 1, self.head + 1)
    }
}

/// Largest cell of a grid; ties go to the lowest `(layer, head)`.
pub fn grid_argmax(grid: &HeadGrid) -> (HeadId, f64) {
    let mut best = (HeadId::new(0, 0), f64::NEG_INFINITY);
    for (l, row) in grid.iter().enumerate() {
        for (h, &v) in row.iter().enumerate() {
            if v > best.1 {
                best = (HeadId::new(l, h), v);
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRef {
    pub stream_tag: String,
    pub layer: usize,
}

/// Ordered list of attention layers forming the rows of a per-head table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadLayout {
    pub architecture: Architecture,
    pub layers: Vec<LayerRef>,
    pub heads: usize,
}

impl HeadLayout {
    fn stream_rows(model: &ModelDescriptor, tag: &str) -> Vec<LayerRef> {
        let dims = model.stream(tag).expect("validated model");
        (0..dims.layer_count).map(|layer| LayerRef { stream_tag: tag.to_string(), layer }).collect()
    }

    fn heads_of(model: &ModelDescriptor, tags: &[&str]) -> usize {
        tags.iter().map(|t| model.stream(t).expect("validated model").head_count).max().unwrap_or(0)
    }

    /// All joint layers of a single-stream model.
    pub fn joint(model: &ModelDescriptor) -> Result<Self, StatsError> {
        if model.architecture != Architecture::SingleStream {
            return Err(StatsError::NotSingleStream);
        }
        Ok(Self {
            architecture: model.architecture,
            layers: Self::stream_rows(model, JOINT),
            heads: Self::heads_of(model, &[JOINT]),
        })
    }

    /// Layers carrying text↔visual attention: joint layers, or the cross encoder's
    /// `cross_tag` sublayer (cross-attention by default) for two-stream models.
    pub fn cross_modal(model: &ModelDescriptor, cross_tag: &str) -> Self {
        match model.architecture {
            Architecture::SingleStream => Self::joint(model).expect("single stream"),
            Architecture::TwoStream => {
                let mut layers = Self::stream_rows(model, CROSS);
                layers.iter_mut().for_each(|l| l.stream_tag = cross_tag.to_string());
                Self { architecture: model.architecture, layers, heads: Self::heads_of(model, &[CROSS]) }
            }
        }
    }

    /// Layers carrying visual→visual attention: joint layers, or the visual stream followed by
    /// the cross encoder's self-attention sublayer for two-stream models.
    pub fn visual_self(model: &ModelDescriptor) -> Self {
        match model.architecture {
            Architecture::SingleStream => Self::joint(model).expect("single stream"),
            Architecture::TwoStream => {
                let mut layers = Self::stream_rows(model, VISUAL);
                let mut cross = Self::stream_rows(model, CROSS);
                cross.iter_mut().for_each(|l| l.stream_tag = CROSS_SELF.to_string());
                layers.extend(cross);
                Self { architecture: model.architecture, layers, heads: Self::heads_of(model, &[VISUAL, CROSS]) }
            }
        }
    }

    pub fn default_coref(model: &ModelDescriptor) -> Self {
        Self::cross_modal(model, CROSS_XATT)
    }

    pub fn row_labels(&self) -> Vec<String> {
        self.layers.iter().map(|l| format!("{} L{}", l.stream_tag, l.layer)).collect()
    }

    pub fn zeros(&self) -> HeadGrid {
        vec![vec![0.0; self.heads]; self.layers.len()]
    }

    /// Keeps only the given layer rows and heads (0-based). Used for head selection in probers.
    pub fn restrict(&self, rows: Option<&[usize]>, heads: Option<&[usize]>) -> HeadSelection {
        let rows: Vec<usize> = match rows {
            Some(r) => r.iter().copied().filter(|&r| r < self.layers.len()).collect(),
            None => (0..self.layers.len()).collect(),
        };
        let heads: Vec<usize> = match heads {
            Some(h) => h.iter().copied().filter(|&h| h < self.heads).collect(),
            None => (0..self.heads).collect(),
        };
        let mut selected = Vec::new();
        for &r in &rows {
            for &h in &heads {
                selected.push(HeadId::new(r, h));
            }
        }
        HeadSelection { layout: self.clone(), heads: selected }
    }
}

/// An ordered subset of heads of a layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub layout: HeadLayout,
    pub heads: Vec<HeadId>,
}

impl HeadSelection {
    pub fn all(layout: HeadLayout) -> Self {
        layout.restrict(None, None)
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Token geometry of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub architecture: Architecture,
    pub m: usize,
    pub n: usize,
}

impl Geometry {
    pub fn of(trace: &SampleTrace, architecture: Architecture) -> Result<Self, StatsError> {
        let (m, n) = trace.segment_lengths().ok_or_else(|| StatsError::BadLayout(trace.sample_id.clone()))?;
        Ok(Self { architecture, m, n })
    }

    /// Sequence position of region `r`.
    pub fn region_position(&self, r: usize) -> usize {
        self.m + 2 + r
    }

    /// Block modality of a sequence position.
    pub fn modality(&self, position: usize) -> Modality {
        match self.architecture {
            Architecture::SingleStream => Modality::Joint,
            Architecture::TwoStream if position < self.m + 2 => Modality::Text,
            Architecture::TwoStream => Modality::Visual,
        }
    }

    /// Row/column index of a sequence position inside a block of the given modality.
    pub fn local(&self, position: usize) -> usize {
        match self.modality(position) {
            Modality::Visual => position - (self.m + 2),
            _ => position,
        }
    }
}

/// The block holding attention from `src_pos` to `tgt_pos` at a layout row.
pub fn block_between<'a>(
    trace: &'a SampleTrace,
    geom: &Geometry,
    layer: &LayerRef,
    src_pos: usize,
    tgt_pos: usize,
) -> Result<&'a AttentionBlock, StatsError> {
    let (src, tgt) = (geom.modality(src_pos), geom.modality(tgt_pos));
    trace.block(&layer.stream_tag, layer.layer, src, tgt).ok_or_else(|| StatsError::MissingBlock {
        sample: trace.sample_id.clone(),
        what: format!("{} L{} {src}->{tgt}", layer.stream_tag, layer.layer),
    })
}

/// Max over `targets` of the attention from `src_pos`, per head, appended to `out`.
/// Sources may also be a set: the max runs over every (source, target) combination.
pub fn max_attention(
    trace: &SampleTrace,
    geom: &Geometry,
    layer: &LayerRef,
    sources: &[usize],
    targets: &[usize],
    out: &mut [f64],
) -> Result<(), StatsError> {
    let block = block_between(trace, geom, layer, sources[0], targets[0])?;
    for (h, slot) in out.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for &s in sources {
            let row = block.row(h, geom.local(s));
            for &t in targets {
                best = best.max(row[geom.local(t)] as f64);
            }
        }
        *slot = best;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::StreamDims;

    #[test]
    fn argmax_ties_prefer_lowest() {
        let grid = vec![vec![0.1, 0.5], vec![0.5, 0.2]];
        assert_eq!(grid_argmax(&grid), (HeadId::new(0, 1), 0.5));
    }

    #[test]
    fn head_ids_display_one_based() {
        assert_eq!(HeadId::new(8, 11).to_string(), "9-12");
    }

    #[test]
    fn two_stream_layouts() {
        let model = ModelDescriptor::two_stream(
            StreamDims::new(9, 12, 8),
            StreamDims::new(5, 12, 8),
            StreamDims::new(5, 12, 8),
        );
        let coref = HeadLayout::default_coref(&model);
        assert_eq!(coref.layers.len(), 5);
        assert!(coref.layers.iter().all(|l| l.stream_tag == CROSS_XATT));
        let rel = HeadLayout::visual_self(&model);
        assert_eq!(rel.layers.len(), 10);
        assert_eq!(rel.layers[5].stream_tag, CROSS_SELF);
        assert!(matches!(HeadLayout::joint(&model), Err(StatsError::NotSingleStream)));
    }

    #[test]
    fn geometry_maps_positions() {
        let g = Geometry { architecture: Architecture::TwoStream, m: 3, n: 4 };
        assert_eq!(g.region_position(0), 5);
        assert_eq!(g.modality(4), Modality::Text);
        assert_eq!(g.local(6), 1);
        let g = Geometry { architecture: Architecture::SingleStream, m: 3, n: 4 };
        assert_eq!(g.local(6), 6);
    }
}

use serde::Serialize;

use super::{grid_argmax, HeadGrid, HeadId, HeadLayout, StatsError};
use crate::trace::{Modality, Sample, TokenType, TraceDataset};

/// `[CLS]` attention mass per head on text tokens, visual tokens and the two special tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadMi {
    pub text: HeadGrid,
    pub visual: HeadGrid,
    pub special: HeadGrid,
}

/// Modality importance of one sample, read from row 0 of every joint block.
pub fn modality_importance(sample: &Sample, layout: &HeadLayout) -> Result<HeadMi, StatsError> {
    let trace = &sample.trace;
    let mut mi = HeadMi { text: layout.zeros(), visual: layout.zeros(), special: layout.zeros() };
    for (row, layer) in layout.layers.iter().enumerate() {
        let block = trace
            .block(&layer.stream_tag, layer.layer, Modality::Joint, Modality::Joint)
            .ok_or_else(|| StatsError::MissingClsRow(trace.sample_id.clone()))?;
        if block.rows == 0 || block.cols != trace.token_types.len() {
            return Err(StatsError::MissingClsRow(trace.sample_id.clone()));
        }
        for h in 0..layout.heads.min(block.heads) {
            let (mut text, mut visual, mut special) = (0.0, 0.0, 0.0);
            for (&w, ty) in block.row(h, 0).iter().zip(&trace.token_types) {
                match ty {
                    TokenType::Text => text += w as f64,
                    TokenType::Visual => visual += w as f64,
                    TokenType::Cls | TokenType::Sep => special += w as f64,
                }
            }
            mi.text[row][h] = text;
            mi.visual[row][h] = visual;
            mi.special[row][h] = special;
        }
    }
    Ok(mi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiResult {
    pub layers: Vec<String>,
    /// Dataset mean per head.
    pub text: HeadGrid,
    pub visual: HeadGrid,
    pub special: HeadGrid,
    /// Mean over the heads of each layer.
    pub per_layer_text: Vec<f64>,
    pub per_layer_visual: Vec<f64>,
    pub per_layer_special: Vec<f64>,
    /// Sum over all heads.
    pub overall_text: f64,
    pub overall_visual: f64,
    pub overall_special: f64,
    pub sample_count: usize,
}

fn layer_means(grid: &HeadGrid) -> Vec<f64> {
    grid.iter().map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64).collect()
}

fn grid_sum(grid: &HeadGrid) -> f64 {
    grid.iter().flatten().sum()
}

/// Dataset-mean modality importance per head, per layer and overall.
pub fn mi_aggregate(dataset: &TraceDataset) -> Result<MiResult, StatsError> {
    let layout = HeadLayout::joint(&dataset.model)?;
    if dataset.samples.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let (mut text, mut visual, mut special) = (layout.zeros(), layout.zeros(), layout.zeros());
    let order = dataset.canonical_order();
    for &i in &order {
        let mi = modality_importance(&dataset.samples[i], &layout)?;
        for (acc, part) in [(&mut text, &mi.text), (&mut visual, &mi.visual), (&mut special, &mi.special)] {
            for (a, p) in acc.iter_mut().flatten().zip(part.iter().flatten()) {
                *a += p;
            }
        }
    }
    let count = order.len() as f64;
    for grid in [&mut text, &mut visual, &mut special] {
        grid.iter_mut().flatten().for_each(|v| *v /= count);
    }
    Ok(MiResult {
        layers: layout.row_labels(),
        per_layer_text: layer_means(&text),
        per_layer_visual: layer_means(&visual),
        per_layer_special: layer_means(&special),
        overall_text: grid_sum(&text),
        overall_visual: grid_sum(&visual),
        overall_special: grid_sum(&special),
        text,
        visual,
        special,
        sample_count: order.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct I2tResult {
    pub layers: Vec<String>,
    /// Fraction of samples in which the head is an image-to-text head.
    pub probability: HeadGrid,
    /// Number of samples in which each head qualifies.
    pub qualifying_counts: Vec<Vec<usize>>,
    pub sample_count: usize,
    pub max_head: HeadId,
    pub max_probability: f64,
}

/// Per head, the fraction of samples in which some visual token puts strictly more than half of
/// its attention on text tokens (special tokens excluded).
pub fn image_to_text_heads(dataset: &TraceDataset) -> Result<I2tResult, StatsError> {
    let layout = HeadLayout::joint(&dataset.model)?;
    if dataset.samples.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let mut counts = vec![vec![0usize; layout.heads]; layout.layers.len()];
    for sample in &dataset.samples {
        let trace = &sample.trace;
        let text_cols: Vec<usize> = positions_of(&trace.token_types, TokenType::Text);
        let visual_rows: Vec<usize> = positions_of(&trace.token_types, TokenType::Visual);
        for (row, layer) in layout.layers.iter().enumerate() {
            let block = trace
                .block(&layer.stream_tag, layer.layer, Modality::Joint, Modality::Joint)
                .ok_or_else(|| StatsError::MissingBlock {
                    sample: trace.sample_id.clone(),
                    what: format!("{} L{}", layer.stream_tag, layer.layer),
                })?;
            for (h, count) in counts[row].iter_mut().enumerate().take(block.heads) {
                let qualifies = visual_rows.iter().any(|&v| {
                    let attn = block.row(h, v);
                    text_cols.iter().map(|&t| attn[t] as f64).sum::<f64>() > 0.5
                });
                if qualifies {
                    *count += 1;
                }
            }
        }
    }
    let total = dataset.samples.len();
    let probability: HeadGrid = counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / total as f64).collect())
        .collect();
    let (max_head, max_probability) = grid_argmax(&probability);
    Ok(I2tResult {
        layers: layout.row_labels(),
        probability,
        qualifying_counts: counts,
        sample_count: total,
        max_head,
        max_probability,
    })
}

fn positions_of(types: &[TokenType], want: TokenType) -> Vec<usize> {
    types.iter().enumerate().filter(|(_, t)| **t == want).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::*;

    fn single(m: usize, n: usize, fill: impl Fn(usize, &mut [f32])) -> TraceDataset {
        let s = m + n + 2;
        let mut block = AttentionBlock::zeros(JOINT, 0, Modality::Joint, Modality::Joint, 1, s, s);
        for r in 0..s {
            fill(r, block.row_mut(0, r));
        }
        TraceDataset {
            model: ModelDescriptor::single_stream(StreamDims::new(1, 1, 2)),
            samples: vec![Sample {
                trace: SampleTrace {
                    sample_id: "x".into(),
                    token_types: SampleTrace::layout_for(m, n),
                    attention_blocks: vec![block],
                    embeddings: vec![],
                },
                annotation: AnnotationRecord::empty("x"),
            }],
        }
    }

    #[test]
    fn uniform_cls_row() {
        let ds = single(4, 4, |_, row| row.fill(0.1));
        let mi = mi_aggregate(&ds).unwrap();
        assert!((mi.text[0][0] - 0.4).abs() < 1e-6);
        assert!((mi.visual[0][0] - 0.4).abs() < 1e-6);
        assert!((mi.special[0][0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn all_mass_on_one_region() {
        let ds = single(2, 3, |_, row| row[5] = 1.0);
        let mi = mi_aggregate(&ds).unwrap();
        assert_eq!(mi.visual[0][0], 1.0);
        assert_eq!(mi.text[0][0], 0.0);
    }

    #[test]
    fn strict_half_threshold() {
        // m = 2, n = 2; visual rows are positions 4 and 5
        let at_half = single(2, 2, |r, row| {
            if r >= 4 {
                row.copy_from_slice(&[0.0, 0.25, 0.25, 0.0, 0.5, 0.0]);
            } else {
                row[0] = 1.0;
            }
        });
        assert_eq!(image_to_text_heads(&at_half).unwrap().probability[0][0], 0.0);
        let above = single(2, 2, |r, row| {
            if r == 5 {
                row.copy_from_slice(&[0.0, 0.3, 0.3, 0.0, 0.4, 0.0]);
            } else {
                row[0] = 1.0;
            }
        });
        assert_eq!(image_to_text_heads(&above).unwrap().probability[0][0], 1.0);
    }
}

//! Reference statistics recomputed with plain nested loops over the raw tensors. Nothing here
//! calls into the statistics or clustering modules, so agreement is an independent check.
// Index loops and explicit arguments are kept on purpose: the point is the plainest code.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::needless_late_init)]

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::trace::{Architecture, TokenType, TraceDataset};

/// Largest dataset the oracle accepts.
pub const MAX_SAMPLES: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("oracle is limited to {MAX_SAMPLES} samples, got {0}")]
    TooLarge(usize),
    #[error("oracle cannot find data it needs: {0}")]
    Missing(String),
}

type Grid = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleStats {
    /// Dataset-mean `[CLS]` attention mass per head (single-stream only).
    pub mi_text: Option<Grid>,
    pub mi_visual: Option<Grid>,
    pub mi_special: Option<Grid>,
    /// Fraction of samples in which each head is an image-to-text head (single-stream only).
    pub i2t_probability: Option<Grid>,
    /// Per coref label, mean over links of the max region→phrase-token attention.
    pub coref_vt: BTreeMap<String, Grid>,
    /// Per coref label, mean over links of the max phrase-token→region attention.
    pub coref_tv: BTreeMap<String, Grid>,
    /// Per predicate, mean over pairs of `(A[s,o] + A[o,s]) / 2`.
    pub relation: BTreeMap<String, Grid>,
}

/// Raw value of head `h`, row `r`, column `c` of the block matching the description.
fn raw(
    dataset: &TraceDataset,
    sample: usize,
    tag: &str,
    layer: usize,
    src_visual: bool,
    tgt_visual: bool,
    h: usize,
    r: usize,
    c: usize,
) -> Result<f64, OracleError> {
    let trace = &dataset.samples[sample].trace;
    let mut m = 0;
    for t in &trace.token_types {
        if *t == TokenType::Text {
            m += 1;
        }
    }
    let two_stream = dataset.model.architecture == Architecture::TwoStream;
    for b in &trace.attention_blocks {
        if b.stream_tag != tag || b.layer != layer {
            continue;
        }
        let (mut row, mut col) = (r, c);
        if two_stream {
            let src_ok = format!("{:?}", b.src) == if src_visual { "Visual" } else { "Text" };
            let tgt_ok = format!("{:?}", b.tgt) == if tgt_visual { "Visual" } else { "Text" };
            if !src_ok || !tgt_ok {
                continue;
            }
            if src_visual {
                row = r - (m + 2);
            }
            if tgt_visual {
                col = c - (m + 2);
            }
        }
        return Ok(b.values[h * b.rows * b.cols + row * b.cols + col] as f64);
    }
    Err(OracleError::Missing(format!("{} {tag} L{layer}", trace.sample_id)))
}

/// Brute-force recomputation of modality importance, image-to-text heads, and coreference and
/// relation head means for a dataset of at most [`MAX_SAMPLES`] samples.
pub fn brute_force_stats(dataset: &TraceDataset) -> Result<OracleStats, OracleError> {
    let count = dataset.samples.len();
    if count > MAX_SAMPLES {
        return Err(OracleError::TooLarge(count));
    }
    let model = &dataset.model;
    let two_stream = model.architecture == Architecture::TwoStream;

    // Table rows: (tag, layer) pairs, spelled out per architecture.
    let mut cross_rows: Vec<(String, usize)> = Vec::new();
    let mut visual_rows: Vec<(String, usize)> = Vec::new();
    let heads;
    if two_stream {
        let cross = &model.streams["cross"];
        let visual = &model.streams["visual"];
        for l in 0..cross.layer_count {
            cross_rows.push(("cross.xatt".to_string(), l));
        }
        for l in 0..visual.layer_count {
            visual_rows.push(("visual".to_string(), l));
        }
        for l in 0..cross.layer_count {
            visual_rows.push(("cross.self".to_string(), l));
        }
        heads = cross.head_count.max(visual.head_count);
    } else {
        let joint = &model.streams["joint"];
        for l in 0..joint.layer_count {
            cross_rows.push(("joint".to_string(), l));
            visual_rows.push(("joint".to_string(), l));
        }
        heads = joint.head_count;
    }

    let mut mi = None;
    let mut i2t = None;
    if !two_stream {
        let rows = cross_rows.len();
        let mut text = vec![vec![0.0; heads]; rows];
        let mut visual = vec![vec![0.0; heads]; rows];
        let mut special = vec![vec![0.0; heads]; rows];
        let mut hits = vec![vec![0usize; heads]; rows];
        for s in 0..count {
            let types = &dataset.samples[s].trace.token_types;
            for (row, (tag, layer)) in cross_rows.iter().enumerate() {
                for h in 0..heads {
                    let mut t_sum = 0.0;
                    let mut v_sum = 0.0;
                    let mut s_sum = 0.0;
                    for (k, ty) in types.iter().enumerate() {
                        let a = raw(dataset, s, tag, *layer, false, false, h, 0, k)?;
                        if *ty == TokenType::Text {
                            t_sum += a;
                        } else if *ty == TokenType::Visual {
                            v_sum += a;
                        } else {
                            s_sum += a;
                        }
                    }
                    text[row][h] += t_sum;
                    visual[row][h] += v_sum;
                    special[row][h] += s_sum;
                    let mut qualifies = false;
                    for (v, vt) in types.iter().enumerate() {
                        if *vt != TokenType::Visual {
                            continue;
                        }
                        let mut mass = 0.0;
                        for (t, tt) in types.iter().enumerate() {
                            if *tt == TokenType::Text {
                                mass += raw(dataset, s, tag, *layer, false, false, h, v, t)?;
                            }
                        }
                        if mass > 0.5 {
                            qualifies = true;
                        }
                    }
                    if qualifies {
                        hits[row][h] += 1;
                    }
                }
            }
        }
        for row in 0..rows {
            for h in 0..heads {
                text[row][h] /= count as f64;
                visual[row][h] /= count as f64;
                special[row][h] /= count as f64;
            }
        }
        let prob: Grid = hits.iter().map(|r| r.iter().map(|&c| c as f64 / count as f64).collect()).collect();
        mi = Some((text, visual, special));
        i2t = Some(prob);
    }

    // Coreference: per label, per head, mean of max over phrase tokens.
    let mut vt_sum: BTreeMap<String, Grid> = BTreeMap::new();
    let mut tv_sum: BTreeMap<String, Grid> = BTreeMap::new();
    let mut link_count: BTreeMap<String, usize> = BTreeMap::new();
    for s in 0..count {
        let sample = &dataset.samples[s];
        let mut m = 0;
        for t in &sample.trace.token_types {
            if *t == TokenType::Text {
                m += 1;
            }
        }
        for link in &sample.annotation.coref_links {
            let mut span = None;
            for p in &sample.annotation.phrases {
                if p.phrase_id == link.phrase_id {
                    span = Some(p.token_span);
                }
            }
            let span = span.ok_or_else(|| OracleError::Missing(link.phrase_id.clone()))?;
            let region = m + 2 + link.region_index;
            let key = link.label.to_string();
            let vt = vt_sum.entry(key.clone()).or_insert_with(|| vec![vec![0.0; heads]; cross_rows.len()]);
            for (row, (tag, layer)) in cross_rows.iter().enumerate() {
                for h in 0..heads {
                    let mut best = f64::NEG_INFINITY;
                    for t in span[0] + 1..span[1] + 1 {
                        let a = raw(dataset, s, tag, *layer, true, false, h, region, t)?;
                        if a > best {
                            best = a;
                        }
                    }
                    vt[row][h] += best;
                }
            }
            let tv = tv_sum.entry(key.clone()).or_insert_with(|| vec![vec![0.0; heads]; cross_rows.len()]);
            for (row, (tag, layer)) in cross_rows.iter().enumerate() {
                for h in 0..heads {
                    let mut best = f64::NEG_INFINITY;
                    for t in span[0] + 1..span[1] + 1 {
                        let a = raw(dataset, s, tag, *layer, false, true, h, t, region)?;
                        if a > best {
                            best = a;
                        }
                    }
                    tv[row][h] += best;
                }
            }
            *link_count.entry(key).or_insert(0) += 1;
        }
    }
    for (key, grid) in vt_sum.iter_mut().chain(tv_sum.iter_mut()) {
        let c = link_count[key] as f64;
        for row in grid.iter_mut() {
            for v in row.iter_mut() {
                *v /= c;
            }
        }
    }

    // Relations: per predicate, per head, mean of the two directions.
    let mut rel_sum: BTreeMap<String, Grid> = BTreeMap::new();
    let mut rel_count: BTreeMap<String, usize> = BTreeMap::new();
    for s in 0..count {
        let sample = &dataset.samples[s];
        let mut m = 0;
        for t in &sample.trace.token_types {
            if *t == TokenType::Text {
                m += 1;
            }
        }
        for rel in &sample.annotation.relations {
            let a = m + 2 + rel.subj_region;
            let b = m + 2 + rel.obj_region;
            let grid = rel_sum
                .entry(rel.predicate_id.clone())
                .or_insert_with(|| vec![vec![0.0; heads]; visual_rows.len()]);
            for (row, (tag, layer)) in visual_rows.iter().enumerate() {
                for h in 0..heads {
                    let fwd = raw(dataset, s, tag, *layer, true, true, h, a, b)?;
                    let back = raw(dataset, s, tag, *layer, true, true, h, b, a)?;
                    grid[row][h] += (fwd + back) / 2.0;
                }
            }
            *rel_count.entry(rel.predicate_id.clone()).or_insert(0) += 1;
        }
    }
    for (key, grid) in rel_sum.iter_mut() {
        let c = rel_count[key] as f64;
        for row in grid.iter_mut() {
            for v in row.iter_mut() {
                *v /= c;
            }
        }
    }

    let (mi_text, mi_visual, mi_special) = match mi {
        Some((t, v, s)) => (Some(t), Some(v), Some(s)),
        None => (None, None, None),
    };
    Ok(OracleStats {
        mi_text,
        mi_visual,
        mi_special,
        i2t_probability: i2t,
        coref_vt: vt_sum,
        coref_tv: tv_sum,
        relation: rel_sum,
    })
}

/// NMI with arithmetic normalization, computed from the contingency table with 0·log 0 = 0.
/// Returns 0 when either labelling has zero entropy.
pub fn oracle_nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let mut ka = 0;
    let mut kb = 0;
    for i in 0..a.len() {
        if a[i] + 1 > ka {
            ka = a[i] + 1;
        }
        if b[i] + 1 > kb {
            kb = b[i] + 1;
        }
    }
    let mut table = vec![vec![0.0f64; kb]; ka];
    let mut row = vec![0.0f64; ka];
    let mut col = vec![0.0f64; kb];
    for i in 0..a.len() {
        table[a[i]][b[i]] += 1.0;
        row[a[i]] += 1.0;
        col[b[i]] += 1.0;
    }
    let mut ha = 0.0;
    for r in &row {
        if *r > 0.0 {
            ha -= r / n * (r / n).ln();
        }
    }
    let mut hb = 0.0;
    for c in &col {
        if *c > 0.0 {
            hb -= c / n * (c / n).ln();
        }
    }
    if ha == 0.0 || hb == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let nij = table[i][j];
            if nij > 0.0 {
                mi += nij / n * (n * nij / (row[i] * col[j])).ln();
            }
        }
    }
    mi / ((ha + hb) / 2.0)
}

/// Whether a single-head attention matrix over `[CLS] t1..tm [SEP] v1..vn` has a visual row
/// with strictly more than half its mass on text tokens.
pub fn oracle_is_i2t(matrix: &[Vec<f32>], m: usize, n: usize) -> bool {
    let mut found = false;
    for v in m + 2..m + 2 + n {
        let mut mass = 0.0f64;
        for t in 1..=m {
            mass += matrix[v][t] as f64;
        }
        if mass > 0.5 {
            found = true;
        }
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmi_extremes() {
        assert!((oracle_nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]) - 1.0).abs() < 1e-12);
        assert_eq!(oracle_nmi(&[0, 1, 0, 1], &[0, 0, 0, 0]), 0.0);
    }

    #[test]
    fn i2t_is_strict() {
        // m = 2, n = 1: the visual row is position 4.
        let mut mat = vec![vec![0.2f32; 5]; 5];
        mat[4] = vec![0.0, 0.25, 0.25, 0.0, 0.5];
        assert!(!oracle_is_i2t(&mat, 2, 1));
        mat[4] = vec![0.0, 0.3, 0.3, 0.0, 0.4];
        assert!(oracle_is_i2t(&mat, 2, 1));
    }
}

use std::collections::HashMap;

use rayon::prelude::*;

use super::model::PairInput;
use super::tasks::{Endpoint, ProbeExample, TaskDataset};
use super::train::FeatureSet;
use super::ProbeError;
use crate::stats::{max_attention, Geometry, HeadSelection};
use crate::trace::{Sample, TraceDataset};

/// Sequence positions an endpoint covers.
pub fn endpoint_positions(sample: &Sample, geom: &Geometry, endpoint: &Endpoint) -> Result<Vec<usize>, ProbeError> {
    match endpoint {
        Endpoint::Region(r) if *r < geom.n => Ok(vec![geom.region_position(*r)]),
        Endpoint::Token(p) if *p < geom.m + geom.n + 2 => Ok(vec![*p]),
        Endpoint::Phrase(id) => {
            let phrase = sample.annotation.phrase(id).ok_or_else(|| ProbeError::BadExample {
                sample: sample.id().to_string(),
                what: format!("unknown phrase {id:?}"),
            })?;
            let positions: Vec<usize> = phrase.positions().collect();
            if positions.is_empty() || phrase.token_span[1] > geom.m {
                return Err(ProbeError::BadExample {
                    sample: sample.id().to_string(),
                    what: format!("phrase {id:?} span out of range"),
                });
            }
            Ok(positions)
        }
        other => Err(ProbeError::BadExample {
            sample: sample.id().to_string(),
            what: format!("endpoint {other:?} out of range"),
        }),
    }
}

/// `[α_ij over selected heads, α_ji over selected heads]`. A phrase endpoint contributes the max
/// attention over its tokens.
pub fn attention_features(
    sample: &Sample,
    geom: &Geometry,
    selection: &HeadSelection,
    i: &Endpoint,
    j: &Endpoint,
) -> Result<Vec<f64>, ProbeError> {
    let pi = endpoint_positions(sample, geom, i)?;
    let pj = endpoint_positions(sample, geom, j)?;
    let layout = &selection.layout;
    let mut fwd = layout.zeros();
    let mut back = layout.zeros();
    let mut needed = vec![false; layout.layers.len()];
    for h in &selection.heads {
        needed[h.layer] = true;
    }
    for (row, layer) in layout.layers.iter().enumerate() {
        if !needed[row] {
            continue;
        }
        max_attention(&sample.trace, geom, layer, &pi, &pj, &mut fwd[row])
            .and_then(|_| max_attention(&sample.trace, geom, layer, &pj, &pi, &mut back[row]))
            .map_err(|e| ProbeError::MissingBlock(e.to_string()))?;
    }
    let mut out = Vec::with_capacity(2 * selection.len());
    out.extend(selection.heads.iter().map(|h| fwd[h.layer][h.head]));
    out.extend(selection.heads.iter().map(|h| back[h.layer][h.head]));
    Ok(out)
}

/// Mean embedding of each endpoint at one layer of `stream` (which must index full-sequence
/// positions).
pub fn embedding_features(
    sample: &Sample,
    geom: &Geometry,
    stream: &str,
    layer: i32,
    i: &Endpoint,
    j: &Endpoint,
) -> Result<(Vec<f64>, Vec<f64>), ProbeError> {
    let emb = sample.trace.embedding(stream, layer).ok_or_else(|| ProbeError::NoSuchLayer {
        sample: sample.id().to_string(),
        layer,
    })?;
    let mean = |positions: &[usize]| -> Vec<f64> {
        let mut acc = vec![0.0; emb.dim];
        for &p in positions {
            for (a, v) in acc.iter_mut().zip(emb.token(p)) {
                *a += *v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= positions.len() as f64);
        acc
    };
    let pi = endpoint_positions(sample, geom, i)?;
    let pj = endpoint_positions(sample, geom, j)?;
    if pi.iter().chain(&pj).any(|&p| p >= emb.tokens) {
        return Err(ProbeError::BadExample {
            sample: sample.id().to_string(),
            what: format!("{stream} embeddings do not cover the probed tokens"),
        });
    }
    Ok((mean(&pi), mean(&pj)))
}

fn extract<X: Send>(
    dataset: &TraceDataset,
    task: &TaskDataset,
    f: impl Fn(&Sample, &Geometry, &ProbeExample) -> Result<X, ProbeError> + Sync,
) -> Result<FeatureSet<X>, ProbeError> {
    let index: HashMap<&str, usize> = dataset.samples.iter().enumerate().map(|(k, s)| (s.id(), k)).collect();
    let arch = dataset.model.architecture;
    let inputs = task
        .examples
        .par_iter()
        .map(|ex| {
            let sample = &dataset.samples[*index
                .get(ex.sample_id.as_str())
                .ok_or_else(|| ProbeError::UnknownSample(ex.sample_id.clone()))?];
            let geom = Geometry::of(&sample.trace, arch).map_err(|e| ProbeError::BadExample {
                sample: ex.sample_id.clone(),
                what: e.to_string(),
            })?;
            f(sample, &geom, ex)
        })
        .collect::<Result<Vec<X>, ProbeError>>()?;
    Ok(FeatureSet {
        inputs,
        labels: task.examples.iter().map(|e| e.label).collect(),
        splits: task.examples.iter().map(|e| e.split).collect(),
        class_names: task.class_names.clone(),
    })
}

fn pair(ex: &ProbeExample) -> Result<(&Endpoint, &Endpoint), ProbeError> {
    ex.j.as_ref().map(|j| (&ex.i, j)).ok_or_else(|| ProbeError::BadExample {
        sample: ex.sample_id.clone(),
        what: "pair task example without second endpoint".into(),
    })
}

pub fn attention_feature_set(
    dataset: &TraceDataset,
    task: &TaskDataset,
    selection: &HeadSelection,
) -> Result<FeatureSet<Vec<f64>>, ProbeError> {
    extract(dataset, task, |sample, geom, ex| {
        let (i, j) = pair(ex)?;
        attention_features(sample, geom, selection, i, j)
    })
}

pub fn embedding_feature_set(
    dataset: &TraceDataset,
    task: &TaskDataset,
    layer: i32,
) -> Result<FeatureSet<PairInput>, ProbeError> {
    let stream = dataset.model.fused_stream();
    extract(dataset, task, |sample, geom, ex| {
        let (i, j) = pair(ex)?;
        let (ei, ej) = embedding_features(sample, geom, stream, layer, i, j)?;
        Ok(PairInput { ei, ej })
    })
}

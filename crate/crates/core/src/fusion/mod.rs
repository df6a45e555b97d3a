//! Multimodal fusion degree: 2-means over a layer's token embeddings, scored by NMI against the
//! text/visual partition and averaged over samples. Lower NMI means more fused.

mod kmeans;
mod nmi;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{kmeans2, ClusterAssignment, KMeansConfig, Points};
pub use nmi::{nmi, NmiNormalization};

use crate::seed;
use crate::trace::{Sample, TokenType, TraceDataset};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("k-means needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("all points are identical")]
    DegenerateInput,
    #[error("partition lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample {sample} has no {stream} embeddings at layer {layer}")]
    NoSuchLayer { sample: String, stream: String, layer: i32 },
    #[error("sample {0} does not cover both modalities")]
    SingleModalitySample(String),
    #[error("dataset has no samples")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub kmeans: KMeansConfig,
    pub normalization: NmiNormalization,
    /// Scale embeddings to unit norm before clustering.
    pub l2_normalize: bool,
    /// Cluster `[CLS]`/`[SEP]` as textual points.
    pub include_special: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kmeans: KMeansConfig::default(),
            normalization: NmiNormalization::Arithmetic,
            l2_normalize: false,
            include_special: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerNmi {
    pub stream_tag: String,
    pub layer: i32,
    pub mean_nmi: f64,
    /// Samples whose embeddings were all identical at this layer (scored 0).
    pub degenerate_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionReport {
    pub per_layer: Vec<LayerNmi>,
    pub sample_count: usize,
}

/// Embedding rows of one layer as clustering points, with the ground-truth modality partition
/// (0 = textual, 1 = visual).
pub fn layer_points(
    sample: &Sample,
    stream: &str,
    layer: i32,
    include_special: bool,
) -> Result<(Points, Vec<usize>), FusionError> {
    let trace = &sample.trace;
    let emb = trace.embedding(stream, layer).ok_or_else(|| FusionError::NoSuchLayer {
        sample: trace.sample_id.clone(),
        stream: stream.to_string(),
        layer,
    })?;
    if emb.tokens != trace.token_types.len() {
        return Err(FusionError::SingleModalitySample(trace.sample_id.clone()));
    }
    let mut data = Vec::with_capacity(emb.tokens * emb.dim);
    let mut truth = Vec::with_capacity(emb.tokens);
    for (pos, ty) in trace.token_types.iter().enumerate() {
        let modality = match ty {
            TokenType::Visual => 1,
            TokenType::Text => 0,
            TokenType::Cls | TokenType::Sep if include_special => 0,
            TokenType::Cls | TokenType::Sep => continue,
        };
        data.extend(emb.token(pos).iter().map(|&v| v as f64));
        truth.push(modality);
    }
    if !truth.contains(&0) || !truth.contains(&1) {
        return Err(FusionError::SingleModalitySample(trace.sample_id.clone()));
    }
    Ok((Points::new(emb.dim, data), truth))
}

/// NMI of one sample at one layer. All-identical embeddings score 0.
pub fn sample_nmi(
    sample: &Sample,
    stream: &str,
    layer: i32,
    global_seed: u64,
    cfg: &FusionConfig,
) -> Result<(f64, bool), FusionError> {
    let (mut points, truth) = layer_points(sample, stream, layer, cfg.include_special)?;
    if cfg.l2_normalize {
        points.l2_normalize();
    }
    let sample_seed = seed::derive(seed::derive(global_seed, sample.id()), &layer.to_string());
    match kmeans2(&points, sample_seed, &cfg.kmeans) {
        Ok(assignment) => {
            let labels: Vec<usize> = assignment.labels.iter().map(|&l| l as usize).collect();
            Ok((nmi(&labels, &truth, cfg.normalization)?, false))
        }
        Err(FusionError::DegenerateInput) => Ok((0.0, true)),
        Err(e) => Err(e),
    }
}

/// Layers of the fused stream present in every sample, sorted.
pub fn available_layers(dataset: &TraceDataset) -> Vec<i32> {
    let stream = dataset.model.fused_stream();
    let Some(first) = dataset.samples.first() else { return Vec::new() };
    let mut layers: Vec<i32> = first
        .trace
        .embeddings
        .iter()
        .filter(|e| e.stream_tag == stream && e.layer >= 0)
        .map(|e| e.layer)
        .filter(|&l| dataset.samples.iter().all(|s| s.trace.embedding(stream, l).is_some()))
        .collect();
    layers.sort_unstable();
    layers.dedup();
    layers
}

/// Mean per-sample NMI for each selected layer of the fused stream (`joint` for single-stream
/// models, the cross encoder for two-stream models). `layers = None` selects every layer with
/// output embeddings.
pub fn fusion_degree(
    dataset: &TraceDataset,
    layers: Option<&[i32]>,
    global_seed: u64,
    cfg: &FusionConfig,
) -> Result<FusionReport, FusionError> {
    if dataset.samples.is_empty() {
        return Err(FusionError::EmptyDataset);
    }
    let stream = dataset.model.fused_stream();
    let layers = match layers {
        Some(l) => l.to_vec(),
        None => available_layers(dataset),
    };
    let order = dataset.canonical_order();
    let mut per_layer = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let scores = order
            .par_iter()
            .map(|&i| sample_nmi(&dataset.samples[i], stream, layer, global_seed, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let sum: f64 = scores.iter().map(|(v, _)| v).sum();
        per_layer.push(LayerNmi {
            stream_tag: stream.to_string(),
            layer,
            mean_nmi: sum / scores.len() as f64,
            degenerate_samples: scores.iter().filter(|(_, d)| *d).count(),
        });
    }
    Ok(FusionReport { per_layer, sample_count: order.len() })
}

/// Raw embeddings of one layer as CSV rows `sample_id,position,token_type,v0..v{d-1}`.
pub fn embeddings_csv(dataset: &TraceDataset, stream: &str, layer: i32) -> Result<String, FusionError> {
    let mut out = String::new();
    let mut header_done = false;
    for &i in &dataset.canonical_order() {
        let trace = &dataset.samples[i].trace;
        let emb = trace.embedding(stream, layer).ok_or_else(|| FusionError::NoSuchLayer {
            sample: trace.sample_id.clone(),
            stream: stream.to_string(),
            layer,
        })?;
        if !header_done {
            out.push_str("sample_id,position,token_type");
            for d in 0..emb.dim {
                out.push_str(&format!(",v{d}"));
            }
            out.push('\n');
            header_done = true;
        }
        let types = fused_token_types(trace, stream, emb.tokens);
        for (pos, ty) in types.iter().enumerate().take(emb.tokens) {
            out.push_str(&format!("{},{pos},{ty}", trace.sample_id));
            for v in emb.token(pos) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn fused_token_types(trace: &crate::trace::SampleTrace, stream: &str, tokens: usize) -> Vec<&'static str> {
    let name = |t: &TokenType| match t {
        TokenType::Cls => "CLS",
        TokenType::Text => "TEXT",
        TokenType::Sep => "SEP",
        TokenType::Visual => "VISUAL",
    };
    let all: Vec<&'static str> = trace.token_types.iter().map(name).collect();
    if tokens == all.len() {
        all
    } else if stream == crate::trace::VISUAL {
        all[all.len() - tokens..].to_vec()
    } else {
        all[..tokens].to_vec()
    }
}

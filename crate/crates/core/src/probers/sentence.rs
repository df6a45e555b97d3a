use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::LinearProber;
use super::tasks::{assign_splits, Split, SplitFractions};
use super::train::{evaluate, train, FeatureSet, TrainConfig};
use super::ProbeError;
use crate::seed;
use crate::trace::{Sample, TokenType, TraceDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceLayerResult {
    pub layer: i32,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceProbeReport {
    pub stream_tag: String,
    pub class_names: Vec<String>,
    pub layers: Vec<SentenceLayerResult>,
    /// Layer with the highest test accuracy (lowest layer on ties).
    pub best_layer: i32,
    /// `"88.8 (L2)"`: best test accuracy in percent with the 1-based layer number.
    pub best: String,
    pub split_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

/// Mean of the non-special TEXT-token embeddings of `stream` at `layer`.
pub fn pooled_text_embedding(sample: &Sample, stream: &str, layer: i32) -> Result<Vec<f64>, ProbeError> {
    let emb = sample.trace.embedding(stream, layer).ok_or_else(|| ProbeError::NoSuchLayer {
        sample: sample.id().to_string(),
        layer,
    })?;
    let mut acc = vec![0.0; emb.dim];
    let mut count = 0usize;
    for (pos, ty) in sample.trace.token_types.iter().enumerate() {
        if *ty != TokenType::Text || pos >= emb.tokens {
            continue;
        }
        for (a, v) in acc.iter_mut().zip(emb.token(pos)) {
            *a += *v as f64;
        }
        count += 1;
    }
    if count == 0 {
        return Err(ProbeError::BadExample {
            sample: sample.id().to_string(),
            what: format!("{stream} embeddings cover no text tokens"),
        });
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Ok(acc)
}

/// Trains one linear classifier per layer on mean-pooled text embeddings. `labels` maps
/// sample ids to class names; every key must name a sample of the dataset.
pub fn sentence_probe(
    dataset: &TraceDataset,
    labels: &BTreeMap<String, String>,
    layers: &[i32],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SentenceProbeReport, ProbeError> {
    let unknown: Vec<&String> = labels.keys().filter(|id| dataset.sample(id).is_none()).collect();
    if !unknown.is_empty() || labels.is_empty() {
        return Err(ProbeError::LabelMismatch(if labels.is_empty() {
            "label table is empty".into()
        } else {
            format!("{} labelled ids are not in the trace, first {:?}", unknown.len(), unknown[0])
        }));
    }
    let mut warnings = Vec::new();
    let unlabelled = dataset.samples.iter().filter(|s| !labels.contains_key(s.id())).count();
    if unlabelled > 0 {
        warnings.push(format!("{unlabelled} samples have no label and are skipped"));
    }
    let class_names: Vec<String> = labels.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let class_of = |name: &str| class_names.binary_search_by(|c| c.as_str().cmp(name)).expect("collected above");
    let splits = assign_splits(labels.keys().map(String::as_str), seed, SplitFractions::default());
    let ids: Vec<&String> = labels.keys().collect();
    let stream = dataset.model.text_stream();

    let mut results = Vec::with_capacity(layers.len());
    for &layer in layers {
        let inputs = ids
            .par_iter()
            .map(|id| pooled_text_embedding(dataset.sample(id).expect("checked"), stream, layer))
            .collect::<Result<Vec<_>, _>>()?;
        let data = FeatureSet {
            inputs,
            labels: ids.iter().map(|id| class_of(&labels[*id])).collect(),
            splits: ids.iter().map(|id| splits[id.as_str()]).collect(),
            class_names: class_names.clone(),
        };
        let mut model = LinearProber::new(class_names.len(), data.inputs[0].len());
        if cfg.standardize {
            model.standardize_from(data.indices(Split::Train).iter().map(|&k| &data.inputs[k]));
        }
        let (model, log) = train(model, &data, cfg, seed::derive(seed, &format!("sent-layer/{layer}")))?;
        for w in log.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        results.push(SentenceLayerResult {
            layer,
            dev_accuracy: log.best_dev_accuracy,
            test_accuracy: evaluate(&model, &data, Split::Test)?.accuracy,
        });
    }
    let best = results
        .iter()
        .fold(None::<&SentenceLayerResult>, |best, r| match best {
            Some(b) if b.test_accuracy >= r.test_accuracy => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| ProbeError::LabelMismatch("no layers selected".into()))?;
    let mut split_counts = BTreeMap::new();
    for split in splits.values() {
        *split_counts.entry(format!("{split:?}").to_lowercase()).or_insert(0) += 1;
    }
    Ok(SentenceProbeReport {
        stream_tag: stream.to_string(),
        class_names,
        best_layer: best.layer,
        best: format!("{:.1} (L{})", 100.0 * best.test_accuracy, best.layer + 1),
        layers: results,
        split_counts,
        warnings,
    })
}

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::seed;
use crate::trace::{CorefLabel, TraceDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Is this (region, phrase) pair a coreference link?
    Vcd,
    /// Entity label of a coreference link.
    Vcc,
    /// Are these two regions related?
    Vri,
    /// Predicate between two related regions.
    Vrc,
    /// Sentence-level label from an external table.
    Sent,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Vcd => "vcd",
            Task::Vcc => "vcc",
            Task::Vri => "vri",
            Task::Vrc => "vrc",
            Task::Sent => "sent",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vcd" => Ok(Task::Vcd),
            "vcc" => Ok(Task::Vcc),
            "vri" => Ok(Task::Vri),
            "vrc" => Ok(Task::Vrc),
            "sent" => Ok(Task::Sent),
            _ => Err(format!("unknown task {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Coref,
    Relation,
    Sentence,
}

/// One side of a probed pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Region(usize),
    Phrase(String),
    /// Raw sequence position.
    Token(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExample {
    pub sample_id: String,
    pub kind: ExampleKind,
    pub i: Endpoint,
    pub j: Option<Endpoint>,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task: Task,
    pub class_names: Vec<String>,
    pub examples: Vec<ProbeExample>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl TaskDataset {
    pub fn count(&self, split: Split) -> usize {
        self.examples.iter().filter(|e| e.split == split).count()
    }
}

/// Train/dev/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions(pub [f64; 3]);

impl Default for SplitFractions {
    fn default() -> Self {
        Self([0.8, 0.1, 0.1])
    }
}

/// Assigns whole samples to splits: ids are sorted, shuffled with the seed, then cut at
/// `round(f_train N)` and `round((f_train + f_dev) N)`.
pub fn assign_splits<'a>(
    ids: impl IntoIterator<Item = &'a str>,
    seed: u64,
    fractions: SplitFractions,
) -> HashMap<String, Split> {
    let mut ids: Vec<&str> = ids.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut seed::rng(seed, "splits"));
    let total: f64 = fractions.0.iter().sum();
    let n = ids.len() as f64;
    let train_end = ((fractions.0[0] / total) * n).round() as usize;
    let dev_end = (((fractions.0[0] + fractions.0[1]) / total) * n).round() as usize;
    ids.iter()
        .enumerate()
        .map(|(k, id)| {
            let split = if k < train_end {
                Split::Train
            } else if k < dev_end {
                Split::Dev
            } else {
                Split::Test
            };
            (id.to_string(), split)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorefTaskConfig {
    /// Negatives drawn per positive link in each sample.
    pub neg_ratio: f64,
    pub split: SplitFractions,
}

impl Default for CorefTaskConfig {
    fn default() -> Self {
        Self { neg_ratio: 1.0, split: SplitFractions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorefTasks {
    pub vcd: TaskDataset,
    pub vcc: TaskDataset,
}

/// VCC holds every link with its entity label; VCD holds links as positives plus seeded
/// same-sample unlinked (region, phrase) pairs as negatives.
pub fn build_coref_tasks(dataset: &TraceDataset, seed: u64, cfg: &CorefTaskConfig) -> Result<CorefTasks, ProbeError> {
    let splits = assign_splits(dataset.samples.iter().map(|s| s.id()), seed, cfg.split);
    let mut vcd = TaskDataset {
        task: Task::Vcd,
        class_names: vec!["unlinked".into(), "linked".into()],
        examples: Vec::new(),
        warnings: Vec::new(),
    };
    let mut vcc = TaskDataset {
        task: Task::Vcc,
        class_names: CorefLabel::ALL.iter().map(|l| l.to_string()).collect(),
        examples: Vec::new(),
        warnings: Vec::new(),
    };
    for &i in &dataset.canonical_order() {
        let sample = &dataset.samples[i];
        let ann = &sample.annotation;
        if ann.coref_links.is_empty() {
            continue;
        }
        let id = sample.id();
        let split = splits[id];
        let n = sample.trace.segment_lengths().map(|(_, n)| n).unwrap_or(0);
        let example = |i: Endpoint, j: Endpoint, label: usize| ProbeExample {
            sample_id: id.to_string(),
            kind: ExampleKind::Coref,
            i,
            j: Some(j),
            label,
            split,
        };
        for link in &ann.coref_links {
            let (r, p) = (Endpoint::Region(link.region_index), Endpoint::Phrase(link.phrase_id.clone()));
            vcc.examples.push(example(r.clone(), p.clone(), link.label.index()));
            vcd.examples.push(example(r, p, 1));
        }
        let linked: HashSet<(usize, &str)> =
            ann.coref_links.iter().map(|l| (l.region_index, l.phrase_id.as_str())).collect();
        let pool: Vec<(usize, &str)> = (0..n)
            .flat_map(|r| ann.phrases.iter().map(move |p| (r, p.phrase_id.as_str())))
            .filter(|pair| !linked.contains(pair))
            .collect();
        let wanted = (cfg.neg_ratio * ann.coref_links.len() as f64).round() as usize;
        if pool.len() < wanted {
            vcd.warnings.push(format!(
                "sample {id}: only {} unlinked pairs for {wanted} negatives",
                pool.len()
            ));
        }
        let take = wanted.min(pool.len());
        let mut picks = index::sample(&mut seed::rng(seed, &format!("vcd-neg/{id}")), pool.len(), take).into_vec();
        picks.sort_unstable();
        for k in picks {
            let (r, p) = pool[k];
            vcd.examples.push(example(Endpoint::Region(r), Endpoint::Phrase(p.to_string()), 0));
        }
    }
    if vcc.examples.is_empty() {
        return Err(ProbeError::NoCorefLinks);
    }
    Ok(CorefTasks { vcd, vcc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationTaskConfig {
    pub per_type_cap: usize,
    pub per_annotation_cap: usize,
    pub top_k_predicates: usize,
    pub split: SplitFractions,
}

impl Default for RelationTaskConfig {
    fn default() -> Self {
        Self { per_type_cap: 15_000, per_annotation_cap: 5, top_k_predicates: 30, split: SplitFractions::default() }
    }
}

/// A relation that survived predicate filtering and both caps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RetainedRelation {
    pub sample_id: String,
    pub annotation_id: String,
    pub predicate: String,
    pub subj_region: usize,
    pub obj_region: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelationTasks {
    pub vri: TaskDataset,
    pub vrc: TaskDataset,
    pub retained: Vec<RetainedRelation>,
}

/// Predicates ranked by frequency (ties by name), truncated to `k`.
pub fn top_predicates(dataset: &TraceDataset, k: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &dataset.samples {
        for r in &s.annotation.relations {
            *counts.entry(r.predicate_id.as_str()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(p, c)| (p.to_string(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Keeps `cap` of `items` uniformly at random (order preserved) when there are more.
fn subsample<T>(items: Vec<T>, cap: usize, seed: u64, key: &str) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    let mut keep = index::sample(&mut seed::rng(seed, key), items.len(), cap).into_vec();
    keep.sort_unstable();
    let mut items: Vec<Option<T>> = items.into_iter().map(Some).collect();
    keep.into_iter().map(|k| items[k].take().expect("distinct indices")).collect()
}

/// Applies the predicate filter and both sampling caps: at most `per_annotation_cap` pairs of a
/// predicate from one annotation, then at most `per_type_cap` pairs per predicate.
pub fn sample_relations(dataset: &TraceDataset, seed: u64, cfg: &RelationTaskConfig) -> Vec<RetainedRelation> {
    let keep: HashSet<String> =
        top_predicates(dataset, cfg.top_k_predicates).into_iter().map(|(p, _)| p).collect();
    let mut by_annotation: BTreeMap<(String, String, String), Vec<RetainedRelation>> = BTreeMap::new();
    for &i in &dataset.canonical_order() {
        let s = &dataset.samples[i];
        for r in &s.annotation.relations {
            if !keep.contains(&r.predicate_id) {
                continue;
            }
            by_annotation
                .entry((s.id().to_string(), r.annotation_id.clone(), r.predicate_id.clone()))
                .or_default()
                .push(RetainedRelation {
                    sample_id: s.id().to_string(),
                    annotation_id: r.annotation_id.clone(),
                    predicate: r.predicate_id.clone(),
                    subj_region: r.subj_region,
                    obj_region: r.obj_region,
                });
        }
    }
    let mut by_type: BTreeMap<String, Vec<RetainedRelation>> = BTreeMap::new();
    for ((sample, ann, pred), group) in by_annotation {
        let key = format!("rel-ann/{sample}/{ann}/{pred}");
        by_type.entry(pred).or_default().extend(subsample(group, cfg.per_annotation_cap, seed, &key));
    }
    let mut out = Vec::new();
    for (pred, group) in by_type {
        out.extend(subsample(group, cfg.per_type_cap, seed, &format!("rel-type/{pred}")));
    }
    out
}

/// VRC classifies retained pairs by predicate; VRI pairs them 1:1 with same-sample region pairs
/// that carry no relation.
pub fn build_relation_tasks(
    dataset: &TraceDataset,
    seed: u64,
    cfg: &RelationTaskConfig,
) -> Result<RelationTasks, ProbeError> {
    if dataset.samples.iter().all(|s| s.annotation.relations.is_empty()) {
        return Err(ProbeError::NoRelations);
    }
    let classes: Vec<String> =
        top_predicates(dataset, cfg.top_k_predicates).into_iter().map(|(p, _)| p).collect();
    let class_index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let retained = sample_relations(dataset, seed, cfg);
    let splits = assign_splits(dataset.samples.iter().map(|s| s.id()), seed, cfg.split);

    let mut vrc = TaskDataset { task: Task::Vrc, class_names: classes.clone(), examples: Vec::new(), warnings: Vec::new() };
    let mut vri = TaskDataset {
        task: Task::Vri,
        class_names: vec!["unrelated".into(), "related".into()],
        examples: Vec::new(),
        warnings: Vec::new(),
    };
    let mut per_sample: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &retained {
        let example = |label| ProbeExample {
            sample_id: r.sample_id.clone(),
            kind: ExampleKind::Relation,
            i: Endpoint::Region(r.subj_region),
            j: Some(Endpoint::Region(r.obj_region)),
            label,
            split: splits[&r.sample_id],
        };
        vrc.examples.push(example(class_index[r.predicate.as_str()]));
        vri.examples.push(example(1));
        *per_sample.entry(r.sample_id.as_str()).or_default() += 1;
    }
    for (id, positives) in per_sample {
        let sample = dataset.sample(id).expect("retained from dataset");
        let n = sample.trace.segment_lengths().map(|(_, n)| n).unwrap_or(0);
        let related: HashSet<(usize, usize)> = sample
            .annotation
            .relations
            .iter()
            .flat_map(|r| [(r.subj_region, r.obj_region), (r.obj_region, r.subj_region)])
            .collect();
        let pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|p| !related.contains(p))
            .collect();
        if pool.len() < positives {
            vri.warnings.push(format!("sample {id}: only {} unrelated pairs for {positives} negatives", pool.len()));
        }
        let mut picks =
            index::sample(&mut seed::rng(seed, &format!("vri-neg/{id}")), pool.len(), positives.min(pool.len()))
                .into_vec();
        picks.sort_unstable();
        for k in picks {
            let (a, b) = pool[k];
            vri.examples.push(ProbeExample {
                sample_id: id.to_string(),
                kind: ExampleKind::Relation,
                i: Endpoint::Region(a),
                j: Some(Endpoint::Region(b)),
                label: 0,
                split: splits[id],
            });
        }
    }
    Ok(RelationTasks { vri, vrc, retained })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchPair {
    /// Image whose trace is re-run.
    pub sample_id: String,
    /// Sample whose caption and annotations are paired with that image.
    pub annotation_from: String,
}

/// Work order for the exporter: every image paired with another image's annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchPairing {
    pub seed: u64,
    pub pairs: Vec<MismatchPair>,
}

/// Uniformly random derangement of the sample ids (no sample keeps its own annotations).
pub fn mismatch_dataset(dataset: &TraceDataset, seed: u64) -> Result<MismatchPairing, ProbeError> {
    let mut ids: Vec<&str> = dataset.samples.iter().map(|s| s.id()).collect();
    ids.sort_unstable();
    if ids.len() < 2 {
        return Err(ProbeError::TooFewSamples(ids.len()));
    }
    let mut rng = seed::rng(seed, "mismatch");
    let mut perm: Vec<usize> = (0..ids.len()).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    let pairs = ids
        .iter()
        .zip(&perm)
        .map(|(id, &p)| MismatchPair { sample_id: id.to_string(), annotation_from: ids[p].to_string() })
        .collect();
    Ok(MismatchPairing { seed, pairs })
}

//! Probing tasks (VCD/VCC/VRI/VRC and sentence-level), their feature extraction, and the
//! attention (linear) and embedding (bilinear) probers with a pinned training recipe.

mod features;
mod model;
mod sentence;
mod tasks;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{
    attention_feature_set, attention_features, embedding_feature_set, embedding_features, endpoint_positions,
};
pub use model::{loss_and_grad, predict, probabilities, softmax, BilinearProber, LinearProber, PairInput, Prober};
pub use sentence::{pooled_text_embedding, sentence_probe, SentenceLayerResult, SentenceProbeReport};
pub use tasks::{
    assign_splits, build_coref_tasks, build_relation_tasks, mismatch_dataset, sample_relations, top_predicates,
    CorefTaskConfig, CorefTasks, Endpoint, ExampleKind, MismatchPair, MismatchPairing, ProbeExample,
    RelationTaskConfig, RelationTasks, RetainedRelation, Split, SplitFractions, Task, TaskDataset,
};
pub use train::{evaluate, train, EpochLog, FeatureSet, Metrics, TrainConfig, TrainLog, LOSS_SLACK};

use crate::seed;
use crate::stats::{HeadLayout, HeadSelection, StatsError};
use crate::trace::TraceDataset;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("dataset has no coreference links")]
    NoCorefLinks,
    #[error("dataset has no relation annotations")]
    NoRelations,
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("the {0:?} split is empty")]
    EmptySplit(Split),
    #[error("training loss became non-finite at epoch {0}")]
    DivergedLoss(usize),
    #[error("missing attention block: {0}")]
    MissingBlock(String),
    #[error("sample {sample} has no embeddings at layer {layer}")]
    NoSuchLayer { sample: String, layer: i32 },
    #[error("sample {sample}: {what}")]
    BadExample { sample: String, what: String },
    #[error("unknown sample {0}")]
    UnknownSample(String),
    #[error("sentence labels do not match the trace: {0}")]
    LabelMismatch(String),
    #[error("prober does not fit this task: {0}")]
    FeatureMismatch(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Which trace signal a pair prober reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum FeatureKind {
    /// Per-head attention in both directions between the endpoints.
    Attention,
    /// Endpoint embeddings of the fused stream at one layer.
    Embedding { layer: i32 },
}

/// A trained pair prober, as stored in `model.json`. Parameters are f64 arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "features")]
pub enum ProberModel {
    Attention { task: Task, class_names: Vec<String>, selection: HeadSelection, prober: LinearProber },
    Embedding { task: Task, class_names: Vec<String>, stream_tag: String, layer: i32, prober: BilinearProber },
}

impl ProberModel {
    pub fn task(&self) -> Task {
        match self {
            ProberModel::Attention { task, .. } | ProberModel::Embedding { task, .. } => *task,
        }
    }

    /// Metrics of this prober on one split of a task built from `dataset`.
    pub fn evaluate_on(&self, dataset: &TraceDataset, task: &TaskDataset, split: Split) -> Result<Metrics, ProbeError> {
        if task.task != self.task() {
            return Err(ProbeError::FeatureMismatch(format!("model is for {}, task is {}", self.task(), task.task)));
        }
        match self {
            ProberModel::Attention { selection, prober, .. } => {
                evaluate(prober, &attention_feature_set(dataset, task, selection)?, split)
            }
            ProberModel::Embedding { layer, prober, .. } => {
                evaluate(prober, &embedding_feature_set(dataset, task, *layer)?, split)
            }
        }
    }
}

/// Heads read by the attention prober by default: cross-modal layers for coreference tasks,
/// visual self-attention layers for relation tasks.
pub fn default_selection(dataset: &TraceDataset, task: Task) -> HeadSelection {
    let layout = match task {
        Task::Vri | Task::Vrc => HeadLayout::visual_self(&dataset.model),
        _ => HeadLayout::default_coref(&dataset.model),
    };
    HeadSelection::all(layout)
}

/// Builds the examples of a pair task.
pub fn build_task(
    dataset: &TraceDataset,
    task: Task,
    seed: u64,
    coref: &CorefTaskConfig,
    relation: &RelationTaskConfig,
) -> Result<TaskDataset, ProbeError> {
    match task {
        Task::Vcd => Ok(build_coref_tasks(dataset, seed, coref)?.vcd),
        Task::Vcc => Ok(build_coref_tasks(dataset, seed, coref)?.vcc),
        Task::Vri => Ok(build_relation_tasks(dataset, seed, relation)?.vri),
        Task::Vrc => Ok(build_relation_tasks(dataset, seed, relation)?.vrc),
        Task::Sent => Err(ProbeError::FeatureMismatch("sentence tasks are run with sentence_probe".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub model: ProberModel,
    pub log: TrainLog,
    pub train: Metrics,
    pub dev: Metrics,
    pub test: Metrics,
    /// Test metrics of a prober trained and evaluated on within-split shuffled labels.
    pub shuffle_control: Option<Metrics>,
}

fn fit<P>(
    init: impl Fn() -> P,
    data: &FeatureSet<P::Input>,
    cfg: &TrainConfig,
    seed: u64,
    shuffle_control: bool,
) -> Result<(P, TrainLog, [Metrics; 3], Option<Metrics>), ProbeError>
where
    P: Prober + Clone,
    P::Input: Clone,
{
    let (model, log) = train(init(), data, cfg, seed::derive(seed, "train"))?;
    let metrics = [
        evaluate(&model, data, Split::Train)?,
        evaluate(&model, data, Split::Dev)?,
        evaluate(&model, data, Split::Test)?,
    ];
    let control = if shuffle_control {
        let shuffled = data.shuffled_labels(seed::derive(seed, "shuffle-labels"));
        let (m, _) = train(init(), &shuffled, cfg, seed::derive(seed, "train-shuffled"))?;
        Some(evaluate(&m, &shuffled, Split::Test)?)
    } else {
        None
    };
    Ok((model, log, metrics, control))
}

/// Extracts features for `task`, trains the requested prober and evaluates it on every split.
pub fn train_prober(
    dataset: &TraceDataset,
    task: &TaskDataset,
    features: FeatureKind,
    selection: Option<HeadSelection>,
    cfg: &TrainConfig,
    seed: u64,
    shuffle_control: bool,
) -> Result<ProbeOutcome, ProbeError> {
    let classes = task.class_names.len();
    let (model, log, [train, dev, test], shuffle_control) = match features {
        FeatureKind::Attention => {
            let selection = selection.unwrap_or_else(|| default_selection(dataset, task.task));
            if selection.is_empty() {
                return Err(ProbeError::FeatureMismatch("head selection is empty".into()));
            }
            let data = attention_feature_set(dataset, task, &selection)?;
            let train_idx = data.indices(Split::Train);
            let init = || {
                let mut p = LinearProber::new(classes, 2 * selection.len());
                if cfg.standardize {
                    p.standardize_from(train_idx.iter().map(|&k| &data.inputs[k]));
                }
                p
            };
            let (prober, log, metrics, control) = fit(init, &data, cfg, seed, shuffle_control)?;
            let model =
                ProberModel::Attention { task: task.task, class_names: task.class_names.clone(), selection, prober };
            (model, log, metrics, control)
        }
        FeatureKind::Embedding { layer } => {
            let data = embedding_feature_set(dataset, task, layer)?;
            let dim = data.inputs.first().map(|x| x.ei.len()).unwrap_or(0);
            let init = || BilinearProber::new(classes, dim, seed::derive(seed, "init"));
            let (prober, log, metrics, control) = fit(init, &data, cfg, seed, shuffle_control)?;
            let model = ProberModel::Embedding {
                task: task.task,
                class_names: task.class_names.clone(),
                stream_tag: dataset.model.fused_stream().to_string(),
                layer,
                prober,
            };
            (model, log, metrics, control)
        }
    };
    Ok(ProbeOutcome { model, log, train, dev, test, shuffle_control })
}

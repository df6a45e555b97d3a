//! Seeded synthetic traces with planted structure, plus ground truth describing every plant.
//! Generation is a pure function of the configuration.

pub mod oracle;

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, Rng};
use crate::stats::{Geometry, HeadLayout, LayerRef};
use crate::trace::{
    validate_trace, Architecture, AnnotationRecord, AttentionBlock, CorefLabel, CorefLink, EmbeddingRecord, Modality,
    ModelDescriptor, Phrase, Relation, Sample, SampleTrace, StreamDims, TokenType, TraceDataset, CROSS, CROSS_SELF,
    CROSS_XATT, JOINT, TEXT, VISUAL,
};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("infeasible plant: {0}")]
    InfeasiblePlant(String),
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
}

/// Layer and head counts of the generated model. Two-stream models use `layers` for the cross
/// encoder and `text_layers` / `visual_layers` for the single-modality encoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub architecture: Architecture,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub text_layers: usize,
    pub visual_layers: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            architecture: Architecture::SingleStream,
            layers: 4,
            heads: 4,
            hidden_dim: 16,
            text_layers: 3,
            visual_layers: 2,
        }
    }
}

impl ModelShape {
    pub fn descriptor(&self) -> ModelDescriptor {
        let dims = |layers| StreamDims::new(layers, self.heads, self.hidden_dim);
        match self.architecture {
            Architecture::SingleStream => ModelDescriptor::single_stream(dims(self.layers)),
            Architecture::TwoStream => {
                ModelDescriptor::two_stream(dims(self.text_layers), dims(self.visual_layers), dims(self.layers))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    /// Inclusive range of phrases per sample (fewer when the caption is too short).
    pub phrases: [usize; 2],
    /// Inclusive range of phrase lengths in tokens.
    pub phrase_len: [usize; 2],
    /// Fraction of phrases linked to a region (each region links at most one phrase).
    pub link_fraction: f64,
    /// Inclusive range of relations per sample.
    pub relations: [usize; 2],
    /// Predicate vocabulary, drawn with Zipf weights `1 / rank^predicate_zipf`.
    pub predicates: Vec<String>,
    pub predicate_zipf: f64,
    /// Distinct dense-annotation ids per sample that relations are spread over.
    pub annotations_per_sample: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            phrases: [2, 4],
            phrase_len: [1, 3],
            link_fraction: 1.0,
            relations: [1, 3],
            predicates: ["on", "wearing", "has", "in", "near", "holding", "behind", "of"]
                .into_iter()
                .map(String::from)
                .collect(),
            predicate_zipf: 1.0,
            annotations_per_sample: 2,
        }
    }
}

/// Planted structure. Layers and heads are 0-based; `layer` indexes the rows of the table the
/// plant targets (cross-modal layers for coreference, visual self-attention layers for
/// relations, joint layers for image-to-text heads).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    /// Shifts text/special and visual embeddings of the fused stream apart along dimension 0.
    SeparableModalities { layers: Vec<i32>, strength: f64 },
    /// Redirects `strength` of the attention between every linked region/phrase pair of
    /// `label`, in both directions.
    CorefHead { layer: usize, head: usize, label: CorefLabel, strength: f64 },
    /// Redirects `strength` of the attention between the two regions of every `predicate`
    /// relation, in both directions.
    RelationHead { layer: usize, head: usize, predicate: String, strength: f64 },
    /// Makes the head an image-to-text head in exactly `round(rate · samples)` samples: one
    /// visual row sends `strength` to a text token. In the other samples every visual row keeps
    /// at least 0.6 of its mass on itself, so none qualifies.
    QualifyingI2tHead { layer: usize, head: usize, rate: f64, strength: f64 },
    /// Sentence label = caption-length bucket; text tokens of every text-stream layer get
    /// `strength` added on dimension `bucket`.
    SentenceSignal { buckets: usize, strength: f64 },
    /// The first `code_dims` embedding dimensions of regions and phrase tokens hold
    /// `±strength` sign codes; linked phrases copy their region's code, and the label's
    /// dimension is doubled on both endpoints, so `e_i ⊙ e_j` encodes the link and its label.
    CorefEmbedding { layers: Vec<i32>, code_dims: usize, strength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub samples: usize,
    pub id_prefix: String,
    pub model: ModelShape,
    /// Inclusive range of caption lengths `m`.
    pub text_tokens: [usize; 2],
    /// Inclusive range of region counts `n`.
    pub regions: [usize; 2],
    /// Concentration of the Dirichlet base attention rows.
    pub dirichlet_alpha: f64,
    pub embeddings: bool,
    pub annotations: AnnotationConfig,
    pub plants: Vec<PlantSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 10,
            id_prefix: "s".into(),
            model: ModelShape::default(),
            text_tokens: [6, 12],
            regions: [4, 8],
            dirichlet_alpha: 1.0,
            embeddings: true,
            annotations: AnnotationConfig::default(),
            plants: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedHead {
    pub layer: usize,
    pub head: usize,
    /// `layer-head`, 1-based.
    pub label: String,
    /// Coreference label or predicate.
    pub key: String,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedI2t {
    pub layer: usize,
    pub head: usize,
    pub label: String,
    pub qualifying: Vec<String>,
    pub expected_probability: f64,
}

/// What was planted where; serialized as `ground_truth.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub samples: usize,
    pub coref_heads: Vec<PlantedHead>,
    pub relation_heads: Vec<PlantedHead>,
    pub i2t_heads: Vec<PlantedI2t>,
    pub separable_layers: Vec<i32>,
    pub coref_embedding_layers: Vec<i32>,
    /// Sentence label per sample id (present with a sentence-signal plant).
    pub sentence_labels: BTreeMap<String, String>,
    pub coref_links: usize,
    pub relations: usize,
}

fn check_range(name: &str, r: [usize; 2], min: usize) -> Result<(), SynthError> {
    if r[0] > r[1] || r[0] < min {
        return Err(SynthError::InvalidConfig(format!("{name} range {r:?} must satisfy {min} <= lo <= hi")));
    }
    Ok(())
}

fn check_strength(s: f64) -> Result<(), SynthError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SynthError::InfeasiblePlant(format!(
            "attention strength {s} must lie in [0, 1] to keep rows stochastic"
        )));
    }
    Ok(())
}

fn validate_config(cfg: &SynthConfig, model: &ModelDescriptor) -> Result<(), SynthError> {
    let shape = &cfg.model;
    if cfg.samples == 0 {
        return Err(SynthError::InvalidConfig("samples must be >= 1".into()));
    }
    model.validate().map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    check_range("text_tokens", cfg.text_tokens, 1)?;
    check_range("regions", cfg.regions, 1)?;
    check_range("phrases", cfg.annotations.phrases, 0)?;
    check_range("phrase_len", cfg.annotations.phrase_len, 1)?;
    check_range("relations", cfg.annotations.relations, 0)?;
    if !(cfg.dirichlet_alpha > 0.0 && cfg.dirichlet_alpha.is_finite()) {
        return Err(SynthError::InvalidConfig("dirichlet_alpha must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.annotations.link_fraction) {
        return Err(SynthError::InvalidConfig("link_fraction must lie in [0, 1]".into()));
    }
    if cfg.annotations.relations[1] > 0 && cfg.annotations.predicates.is_empty() {
        return Err(SynthError::InvalidConfig("relations need a predicate vocabulary".into()));
    }
    let coref_layout = HeadLayout::default_coref(model);
    let relation_layout = HeadLayout::visual_self(model);
    let in_layout = |layout: &HeadLayout, layer: usize, head: usize, what: &str| {
        if layer >= layout.layers.len() || head >= layout.heads {
            Err(SynthError::InfeasiblePlant(format!(
                "{what} head ({layer}, {head}) outside the {} × {} table",
                layout.layers.len(),
                layout.heads
            )))
        } else {
            Ok(())
        }
    };
    let embedding_layers = |layers: &[i32], what: &str| {
        if !cfg.embeddings {
            return Err(SynthError::InfeasiblePlant(format!("{what} needs embeddings")));
        }
        let fused = model.stream(model.fused_stream()).expect("validated").layer_count as i32;
        match layers.iter().find(|&&l| l < 0 || l >= fused) {
            Some(l) => Err(SynthError::InfeasiblePlant(format!("{what} layer {l} does not exist"))),
            None => Ok(()),
        }
    };
    for plant in &cfg.plants {
        match plant {
            PlantSpec::SeparableModalities { layers, strength } => {
                embedding_layers(layers, "separable_modalities")?;
                if !strength.is_finite() {
                    return Err(SynthError::InfeasiblePlant("strength must be finite".into()));
                }
            }
            PlantSpec::CorefHead { layer, head, strength, .. } => {
                check_strength(*strength)?;
                in_layout(&coref_layout, *layer, *head, "coref")?;
            }
            PlantSpec::RelationHead { layer, head, predicate, strength } => {
                check_strength(*strength)?;
                in_layout(&relation_layout, *layer, *head, "relation")?;
                if !cfg.annotations.predicates.contains(predicate) {
                    return Err(SynthError::InfeasiblePlant(format!("predicate {predicate:?} is never generated")));
                }
            }
            PlantSpec::QualifyingI2tHead { layer, head, rate, strength } => {
                if shape.architecture != Architecture::SingleStream {
                    return Err(SynthError::InfeasiblePlant("image-to-text heads need a single-stream model".into()));
                }
                check_strength(*strength)?;
                if *strength <= 0.5 {
                    return Err(SynthError::InfeasiblePlant(format!(
                        "i2t strength {strength} cannot guarantee more than half the mass on text"
                    )));
                }
                if !(0.0..=1.0).contains(rate) {
                    return Err(SynthError::InfeasiblePlant(format!("rate {rate} outside [0, 1]")));
                }
                in_layout(&coref_layout, *layer, *head, "i2t")?;
            }
            PlantSpec::SentenceSignal { buckets, strength } => {
                if !cfg.embeddings {
                    return Err(SynthError::InfeasiblePlant("sentence_signal needs embeddings".into()));
                }
                if *buckets == 0 || *buckets > shape.hidden_dim || !strength.is_finite() {
                    return Err(SynthError::InfeasiblePlant(format!(
                        "sentence_signal needs 1 <= buckets <= hidden_dim ({})",
                        shape.hidden_dim
                    )));
                }
            }
            PlantSpec::CorefEmbedding { layers, code_dims, strength } => {
                embedding_layers(layers, "coref_embedding")?;
                if *code_dims < CorefLabel::ALL.len() || *code_dims > shape.hidden_dim || !strength.is_finite() {
                    return Err(SynthError::InfeasiblePlant(format!(
                        "coref_embedding needs 8 <= code_dims <= hidden_dim ({})",
                        shape.hidden_dim
                    )));
                }
            }
        }
    }
    Ok(())
}

fn dirichlet_row(row: &mut [f32], gamma: &Gamma<f64>, rng: &mut Rng) {
    let draws: Vec<f64> = row.iter().map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE)).collect();
    let total: f64 = draws.iter().sum();
    for (r, d) in row.iter_mut().zip(draws) {
        *r = (d / total) as f32;
    }
}

/// `row ← (1 − s) row + s e_target`.
fn redirect(row: &mut [f32], target: usize, s: f64) {
    for (k, v) in row.iter_mut().enumerate() {
        let hit = if k == target { s } else { 0.0 };
        *v = ((1.0 - s) * *v as f64 + hit) as f32;
    }
}

fn block_shapes(model: &ModelDescriptor) -> Vec<(&'static str, usize, Modality, Modality)> {
    let mut out = Vec::new();
    let layers = |tag: &str| model.stream(tag).expect("validated").layer_count;
    match model.architecture {
        Architecture::SingleStream => {
            for l in 0..layers(JOINT) {
                out.push((JOINT, l, Modality::Joint, Modality::Joint));
            }
        }
        Architecture::TwoStream => {
            for l in 0..layers(TEXT) {
                out.push((TEXT, l, Modality::Text, Modality::Text));
            }
            for l in 0..layers(VISUAL) {
                out.push((VISUAL, l, Modality::Visual, Modality::Visual));
            }
            for l in 0..layers(CROSS) {
                out.push((CROSS_XATT, l, Modality::Text, Modality::Visual));
                out.push((CROSS_XATT, l, Modality::Visual, Modality::Text));
                out.push((CROSS_SELF, l, Modality::Text, Modality::Text));
                out.push((CROSS_SELF, l, Modality::Visual, Modality::Visual));
            }
        }
    }
    out
}

/// Redirects attention from sequence position `src` to `tgt` at one head of a table row.
fn plant_edge(trace: &mut SampleTrace, geom: &Geometry, layer: &LayerRef, head: usize, src: usize, tgt: usize, s: f64) {
    let (sm, tm) = (geom.modality(src), geom.modality(tgt));
    let block = trace.block_mut(&layer.stream_tag, layer.layer, sm, tm).expect("generated block");
    redirect(block.row_mut(head, geom.local(src)), geom.local(tgt), s);
}

fn gen_annotation(id: &str, m: usize, n: usize, cfg: &AnnotationConfig, rng: &mut Rng) -> AnnotationRecord {
    let mut ann = AnnotationRecord::empty(id);
    let wanted = rng.random_range(cfg.phrases[0]..=cfg.phrases[1]);
    let mut cursor = 0;
    while ann.phrases.len() < wanted {
        let start = cursor + usize::from(cursor > 0 && rng.random_bool(0.5));
        let len = rng.random_range(cfg.phrase_len[0]..=cfg.phrase_len[1]);
        if start + len > m {
            break;
        }
        let k = ann.phrases.len();
        ann.phrases.push(Phrase {
            phrase_id: format!("p{k}"),
            token_span: [start, start + len],
            surface_text: format!("phrase {k}"),
        });
        cursor = start + len;
    }
    let mut regions: Vec<usize> = (0..n).collect();
    regions.shuffle(rng);
    let mut phrase_order: Vec<usize> = (0..ann.phrases.len()).collect();
    phrase_order.shuffle(rng);
    let links = ((cfg.link_fraction * ann.phrases.len() as f64).round() as usize).min(n);
    for (&p, &r) in phrase_order.iter().take(links).zip(&regions) {
        let label = CorefLabel::ALL[rng.random_range(0..CorefLabel::ALL.len())];
        ann.coref_links.push(CorefLink { phrase_id: ann.phrases[p].phrase_id.clone(), region_index: r, label });
    }
    if n >= 2 && !cfg.predicates.is_empty() {
        let weights: Vec<f64> =
            (1..=cfg.predicates.len()).map(|rank| 1.0 / (rank as f64).powf(cfg.predicate_zipf)).collect();
        let pick = WeightedIndex::new(&weights).expect("positive weights");
        let wanted = rng.random_range(cfg.relations[0]..=cfg.relations[1]);
        let mut used = BTreeSet::new();
        let mut attempts = 0;
        while ann.relations.len() < wanted && attempts < 10 * wanted.max(1) {
            attempts += 1;
            let s = rng.random_range(0..n);
            let o = rng.random_range(0..n);
            if s == o || !used.insert((s.min(o), s.max(o))) {
                continue;
            }
            let predicate = cfg.predicates[pick.sample(rng)].clone();
            let annotation = rng.random_range(0..cfg.annotations_per_sample.max(1));
            ann.relations.push(Relation {
                subj_region: s,
                obj_region: o,
                predicate_id: predicate,
                annotation_id: format!("{id}/a{annotation}"),
            });
        }
    }
    ann
}

fn gen_embeddings(model: &ModelDescriptor, m: usize, n: usize, rng: &mut Rng) -> Vec<EmbeddingRecord> {
    let tags: &[&str] = match model.architecture {
        Architecture::SingleStream => &[JOINT],
        Architecture::TwoStream => &[TEXT, VISUAL, CROSS],
    };
    let mut out = Vec::new();
    for &tag in tags {
        let dims = model.stream(tag).expect("validated");
        let tokens = model.embedding_tokens(tag, m, n);
        for layer in 0..dims.layer_count {
            let values = (0..tokens * dims.hidden_dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
            out.push(EmbeddingRecord { stream_tag: tag.into(), layer: layer as i32, tokens, dim: dims.hidden_dim, values });
        }
    }
    out
}

fn sentence_bucket(m: usize, range: [usize; 2], buckets: usize) -> usize {
    let width = range[1] - range[0] + 1;
    ((m - range[0]) * buckets / width).min(buckets - 1)
}

/// Generates the dataset and its ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<(TraceDataset, GroundTruth), SynthError> {
    let model = cfg.model.descriptor();
    validate_config(cfg, &model)?;
    let coref_layout = HeadLayout::default_coref(&model);
    let relation_layout = HeadLayout::visual_self(&model);
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;

    let mut truth = GroundTruth { seed: cfg.seed, samples: cfg.samples, ..Default::default() };
    // Which samples each i2t plant qualifies in, decided up front.
    let mut i2t_sets: Vec<BTreeSet<usize>> = Vec::new();
    for (k, plant) in cfg.plants.iter().enumerate() {
        match plant {
            PlantSpec::CorefHead { layer, head, label, strength } => truth.coref_heads.push(PlantedHead {
                layer: *layer,
                head: *head,
                label: format!("{}-{}", layer + 1, head + 1),
                key: label.to_string(),
                strength: *strength,
            }),
            PlantSpec::RelationHead { layer, head, predicate, strength } => truth.relation_heads.push(PlantedHead {
                layer: *layer,
                head: *head,
                label: format!("{}-{}", layer + 1, head + 1),
                key: predicate.clone(),
                strength: *strength,
            }),
            PlantSpec::QualifyingI2tHead { rate, .. } => {
                let count = (rate * cfg.samples as f64).round() as usize;
                let mut all: Vec<usize> = (0..cfg.samples).collect();
                all.shuffle(&mut seed::rng(cfg.seed, &format!("i2t-qualify/{k}")));
                i2t_sets.push(all.into_iter().take(count).collect());
            }
            PlantSpec::SeparableModalities { layers, .. } => truth.separable_layers.extend(layers),
            PlantSpec::CorefEmbedding { layers, .. } => truth.coref_embedding_layers.extend(layers),
            PlantSpec::SentenceSignal { .. } => {}
        }
    }

    let width = (cfg.samples.saturating_sub(1)).to_string().len().max(4);
    let mut samples = Vec::with_capacity(cfg.samples);
    for idx in 0..cfg.samples {
        let id = format!("{}{idx:0width$}", cfg.id_prefix);
        let mut rng = seed::rng(cfg.seed, &format!("sample/{idx}"));
        let m = rng.random_range(cfg.text_tokens[0]..=cfg.text_tokens[1]);
        let n = rng.random_range(cfg.regions[0]..=cfg.regions[1]);
        let annotation = gen_annotation(&id, m, n, &cfg.annotations, &mut rng);
        let mut blocks = Vec::new();
        for (tag, layer, src, tgt) in block_shapes(&model) {
            let heads = model.stream(tag).expect("validated").head_count;
            let mut block =
                AttentionBlock::zeros(tag, layer, src, tgt, heads, src.token_count(m, n), tgt.token_count(m, n));
            for h in 0..heads {
                for r in 0..block.rows {
                    dirichlet_row(block.row_mut(h, r), &gamma, &mut rng);
                }
            }
            blocks.push(block);
        }
        let embeddings = if cfg.embeddings { gen_embeddings(&model, m, n, &mut rng) } else { Vec::new() };
        let mut trace = SampleTrace {
            sample_id: id.clone(),
            token_types: SampleTrace::layout_for(m, n),
            attention_blocks: blocks,
            embeddings,
        };
        let geom = Geometry { architecture: model.architecture, m, n };
        let phrase_positions = |phrase_id: &str| -> Vec<usize> {
            annotation.phrase(phrase_id).expect("generated link").positions().collect()
        };

        let mut i2t_index = 0;
        for plant in &cfg.plants {
            match plant {
                PlantSpec::CorefHead { layer, head, label, strength } => {
                    let layer = &coref_layout.layers[*layer];
                    for link in annotation.coref_links.iter().filter(|l| l.label == *label) {
                        let region = geom.region_position(link.region_index);
                        let tokens = phrase_positions(&link.phrase_id);
                        plant_edge(&mut trace, &geom, layer, *head, region, tokens[0], *strength);
                        for &t in &tokens {
                            plant_edge(&mut trace, &geom, layer, *head, t, region, *strength);
                        }
                    }
                }
                PlantSpec::RelationHead { layer, head, predicate, strength } => {
                    let layer = &relation_layout.layers[*layer];
                    for rel in annotation.relations.iter().filter(|r| &r.predicate_id == predicate) {
                        let (s, o) = (geom.region_position(rel.subj_region), geom.region_position(rel.obj_region));
                        plant_edge(&mut trace, &geom, layer, *head, s, o, *strength);
                        plant_edge(&mut trace, &geom, layer, *head, o, s, *strength);
                    }
                }
                PlantSpec::QualifyingI2tHead { layer, head, strength, .. } => {
                    let layer = &coref_layout.layers[*layer];
                    let qualifies = i2t_sets[i2t_index].contains(&idx);
                    i2t_index += 1;
                    if qualifies {
                        let v = geom.region_position(rng.random_range(0..n));
                        let t = 1 + rng.random_range(0..m);
                        plant_edge(&mut trace, &geom, layer, *head, v, t, *strength);
                    } else {
                        for r in 0..n {
                            let v = geom.region_position(r);
                            plant_edge(&mut trace, &geom, layer, *head, v, v, 0.6);
                        }
                    }
                }
                PlantSpec::SeparableModalities { layers, strength } => {
                    let tag = model.fused_stream();
                    for &layer in layers {
                        let emb = trace.embedding_mut(tag, layer).expect("generated embedding");
                        for (pos, ty) in SampleTrace::layout_for(m, n).iter().enumerate() {
                            let shift = if *ty == TokenType::Visual { -strength } else { *strength };
                            emb.token_mut(pos)[0] += shift as f32;
                        }
                    }
                }
                PlantSpec::SentenceSignal { buckets, strength } => {
                    let bucket = sentence_bucket(m, cfg.text_tokens, *buckets);
                    truth.sentence_labels.insert(id.clone(), format!("len{bucket}"));
                    let tag = model.text_stream();
                    let layers = model.stream(tag).expect("validated").layer_count;
                    for layer in 0..layers as i32 {
                        let emb = trace.embedding_mut(tag, layer).expect("generated embedding");
                        for pos in 1..=m {
                            emb.token_mut(pos)[bucket] += *strength as f32;
                        }
                    }
                }
                PlantSpec::CorefEmbedding { layers, code_dims, strength } => {
                    let sign = |rng: &mut Rng| if rng.random_bool(0.5) { *strength } else { -*strength };
                    let mut region_codes: Vec<Vec<f64>> =
                        (0..n).map(|_| (0..*code_dims).map(|_| sign(&mut rng)).collect()).collect();
                    let mut phrase_codes: Vec<Vec<f64>> = annotation
                        .phrases
                        .iter()
                        .map(|_| (0..*code_dims).map(|_| sign(&mut rng)).collect())
                        .collect();
                    for link in &annotation.coref_links {
                        let code = &mut region_codes[link.region_index];
                        code[link.label.index()] *= 2.0;
                        let p = annotation.phrases.iter().position(|p| p.phrase_id == link.phrase_id).expect("link");
                        phrase_codes[p] = code.clone();
                    }
                    let tag = model.fused_stream();
                    for &layer in layers {
                        let emb = trace.embedding_mut(tag, layer).expect("generated embedding");
                        for (r, code) in region_codes.iter().enumerate() {
                            let token = emb.token_mut(geom.region_position(r));
                            for (t, c) in token.iter_mut().zip(code) {
                                *t = *c as f32;
                            }
                        }
                        for (phrase, code) in annotation.phrases.iter().zip(&phrase_codes) {
                            for pos in phrase.positions() {
                                for (t, c) in emb.token_mut(pos).iter_mut().zip(code) {
                                    *t = *c as f32;
                                }
                            }
                        }
                    }
                }
            }
        }
        truth.coref_links += annotation.coref_links.len();
        truth.relations += annotation.relations.len();
        let report = validate_trace(&trace, Some(&model), Some(&annotation));
        if !report.is_valid() {
            return Err(SynthError::InfeasiblePlant(format!(
                "sample {id} violates trace invariants after planting: {}",
                report.violations[0].detail
            )));
        }
        samples.push(Sample { trace, annotation });
    }

    for (plant, set) in cfg
        .plants
        .iter()
        .filter(|p| matches!(p, PlantSpec::QualifyingI2tHead { .. }))
        .zip(&i2t_sets)
    {
        if let PlantSpec::QualifyingI2tHead { layer, head, .. } = plant {
            truth.i2t_heads.push(PlantedI2t {
                layer: *layer,
                head: *head,
                label: format!("{}-{}", layer + 1, head + 1),
                qualifying: set.iter().map(|&i| samples[i].id().to_string()).collect(),
                expected_probability: set.len() as f64 / cfg.samples as f64,
            });
        }
    }
    Ok((TraceDataset { model, samples }, truth))
}

//! End-to-end acceptance checks on synthetic data with planted structure. Runs as a plain
//! binary (no libtest harness) and prints one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use value_probe::fusion::{kmeans2, nmi, KMeansConfig, NmiNormalization, Points};
use value_probe::probers::{
    build_coref_tasks, loss_and_grad, sample_relations, top_predicates, train_prober, BilinearProber,
    CorefTaskConfig, FeatureKind, LinearProber, PairInput, Prober, RelationTaskConfig, Split, SplitFractions,
    TrainConfig,
};
use value_probe::seed;
use value_probe::stats::{
    coref_head_stats, image_to_text_heads, mi_aggregate, modality_importance, relation_head_stats, Direction,
    HeadLayout, PairStatsOptions,
};
use value_probe::synth::oracle::{brute_force_stats, oracle_is_i2t, oracle_nmi};
use value_probe::synth::{generate, AnnotationConfig, GroundTruth, ModelShape, PlantSpec, SynthConfig};
use value_probe::trace::{
    load_dataset, validate_dataset, write_dataset, AnnotationRecord, Architecture, AttentionBlock, CorefLabel,
    Modality, ModelDescriptor, Relation, Sample, SampleTrace, StreamDims, TraceDataset, JOINT,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn synth(cfg: &SynthConfig) -> (TraceDataset, GroundTruth) {
    generate(cfg).expect("synthetic dataset")
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "grid rows");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "grid columns");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

// 1. NMI matches a brute-force contingency computation.
fn nmi_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = seed::rng(1, "acceptance/nmi");
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let ka = rng.random_range(1..=n.min(5));
        let kb = rng.random_range(1..=n.min(5));
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let got = nmi(&a, &b, NmiNormalization::Arithmetic).expect("nmi");
        worst = worst.max((got - oracle_nmi(&a, &b)).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(worst <= 1e-9 && elapsed < 1.0, format!("max |Δ| = {worst:.2e} over 200 pairs, {elapsed:.3} s"))
}

// 2. 2-means separates two well-separated Gaussian clouds.
fn kmeans_recovery() -> Outcome {
    let start = Instant::now();
    let mut perfect = 0;
    for s in 0..100u64 {
        let mut rng = seed::rng(s, "acceptance/kmeans");
        let mut data = Vec::with_capacity(40 * 8);
        let mut truth = Vec::with_capacity(40);
        for p in 0..40 {
            let cluster = p % 2;
            // Centers (0,..,0) and (10/√8,..): 10σ apart.
            let center = if cluster == 1 { 10.0 / 8f64.sqrt() } else { 0.0 };
            for _ in 0..8 {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(center + noise);
            }
            truth.push(cluster);
        }
        let result = kmeans2(&Points::new(8, data), s, &KMeansConfig::default()).expect("kmeans");
        let labels: Vec<usize> = result.labels.iter().map(|&l| l as usize).collect();
        if nmi(&labels, &truth, NmiNormalization::Arithmetic).expect("nmi") == 1.0 {
            perfect += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(perfect >= 99 && elapsed < 2.0, format!("{perfect}/100 seeds with NMI = 1.0, {elapsed:.3} s"))
}

// 3. Modality importance sums to one per head and matches the naive-loop oracle.
fn mi_conservation() -> Outcome {
    let (ds, _) = synth(&SynthConfig { seed: 3, samples: 50, ..SynthConfig::default() });
    let layout = HeadLayout::joint(&ds.model).expect("single stream");
    let mut worst_sum = 0.0f64;
    for sample in &ds.samples {
        let mi = modality_importance(sample, &layout).expect("mi");
        for l in 0..mi.text.len() {
            for h in 0..mi.text[l].len() {
                worst_sum = worst_sum.max((mi.text[l][h] + mi.visual[l][h] + mi.special[l][h] - 1.0).abs());
            }
        }
    }
    let agg = mi_aggregate(&ds).expect("mi aggregate");
    let oracle = brute_force_stats(&ds).expect("oracle");
    let worst_oracle = [
        max_abs_diff(&agg.text, oracle.mi_text.as_ref().unwrap()),
        max_abs_diff(&agg.visual, oracle.mi_visual.as_ref().unwrap()),
        max_abs_diff(&agg.special, oracle.mi_special.as_ref().unwrap()),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    outcome(
        worst_sum <= 1e-6 && worst_oracle <= 1e-7,
        format!("max |Σ − 1| = {worst_sum:.2e}, max |agg − oracle| = {worst_oracle:.2e} on 50 samples"),
    )
}

/// Single-sample, single-head dataset holding one `[CLS] t.. [SEP] v..` attention matrix.
fn one_matrix_dataset(m: usize, n: usize, rows: &[Vec<f32>]) -> TraceDataset {
    let s = m + n + 2;
    let mut block = AttentionBlock::zeros(JOINT, 0, Modality::Joint, Modality::Joint, 1, s, s);
    for (r, row) in rows.iter().enumerate() {
        block.row_mut(0, r).copy_from_slice(row);
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

/// A row-stochastic row whose text share is `text_mass`, spread over random weights.
fn random_row(rng: &mut seed::Rng, m: usize, n: usize, text_mass: f64) -> Vec<f32> {
    let s = m + n + 2;
    let mut row = vec![0.0f32; s];
    let text: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
    let other: Vec<f64> = (0..s - m).map(|_| rng.random::<f64>() + 1e-3).collect();
    let (ts, os) = (text.iter().sum::<f64>(), other.iter().sum::<f64>());
    let mut k = 0;
    for (pos, slot) in row.iter_mut().enumerate() {
        if (1..=m).contains(&pos) {
            *slot = (text[pos - 1] / ts * text_mass) as f32;
        } else {
            *slot = (other[k] / os * (1.0 - text_mass)) as f32;
            k += 1;
        }
    }
    row
}

// 4. Image-to-text head recount and planted qualification rate.
fn i2t_heads() -> Outcome {
    let mut rng = seed::rng(4, "acceptance/i2t");
    let mut mismatches = 0;
    let mut qualifying = 0;
    for _ in 0..1000 {
        let m = [1, 2, 4, 8][rng.random_range(0..4)];
        let n = rng.random_range(1..=8);
        let rows: Vec<Vec<f32>> = (0..m + n + 2)
            .map(|r| {
                let mass = if r >= m + 2 && rng.random_bool(0.1) {
                    // Exactly half on text: must not qualify (strict inequality).
                    0.5
                } else if r >= m + 2 {
                    rng.random_range(0.0..0.62)
                } else {
                    rng.random::<f64>()
                };
                if mass == 0.5 {
                    let mut row = vec![0.0f32; m + n + 2];
                    (1..=m).for_each(|t| row[t] = 0.5 / m as f32);
                    row[0] = 0.5;
                    row
                } else {
                    random_row(&mut rng, m, n, mass)
                }
            })
            .collect();
        let fast = image_to_text_heads(&one_matrix_dataset(m, n, &rows)).expect("i2t").qualifying_counts[0][0] == 1;
        let slow = oracle_is_i2t(&rows, m, n);
        mismatches += usize::from(fast != slow);
        qualifying += usize::from(slow);
    }
    let cfg = SynthConfig {
        seed: 4,
        samples: 200,
        embeddings: false,
        plants: vec![PlantSpec::QualifyingI2tHead { layer: 2, head: 1, rate: 0.92, strength: 0.8 }],
        ..SynthConfig::default()
    };
    let (ds, truth) = synth(&cfg);
    let result = image_to_text_heads(&ds).expect("i2t");
    let planted = &truth.i2t_heads[0];
    let rate = result.probability[planted.layer][planted.head];
    outcome(
        mismatches == 0 && (rate - 0.92).abs() <= 0.04,
        format!(
            "{mismatches} recount mismatches on 1000 matrices ({qualifying} qualifying); planted head {} rate {rate:.3}",
            planted.label
        ),
    )
}

// 5. Planted coref/relation heads are the table argmax, beat their baselines, match the oracle.
fn pair_tables() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for architecture in [Architecture::SingleStream, Architecture::TwoStream] {
        let cfg = SynthConfig {
            seed: 5,
            samples: 40,
            model: ModelShape { architecture, ..ModelShape::default() },
            embeddings: false,
            plants: vec![
                PlantSpec::CorefHead { layer: 1, head: 2, label: CorefLabel::People, strength: 0.8 },
                PlantSpec::RelationHead { layer: 2, head: 3, predicate: "on".into(), strength: 0.8 },
            ],
            ..SynthConfig::default()
        };
        let (ds, truth) = synth(&cfg);
        let opts = PairStatsOptions { baseline: true, seed: 11, draws: 3, ..PairStatsOptions::default() };
        let oracle = brute_force_stats(&ds).expect("oracle");
        let coref_head = &truth.coref_heads[0];
        let rel_head = &truth.relation_heads[0];
        let mut worst = 0.0f64;
        for (dir, oracle_grids) in
            [(Direction::VisualToText, &oracle.coref_vt), (Direction::TextToVisual, &oracle.coref_tv)]
        {
            let table = coref_head_stats(&ds, dir, &opts).expect("coref stats");
            let entry = &table.entries[&coref_head.key];
            let base = entry.baseline.as_ref().expect("baseline");
            let (l, h) = (coref_head.layer, coref_head.head);
            pass &= entry.argmax_label == coref_head.label && entry.mean[l][h] > base.mean[l][h];
            for (key, e) in &table.entries {
                worst = worst.max(max_abs_diff(&e.mean, &oracle_grids[key]));
            }
            details.push(format!(
                "{architecture:?} coref {dir}: argmax {} (planted {}), {:.3} vs baseline {:.3}",
                entry.argmax_label, coref_head.label, entry.mean[l][h], base.mean[l][h]
            ));
        }
        let table = relation_head_stats(&ds, &opts).expect("relation stats");
        let entry = &table.entries[&rel_head.key];
        let base = entry.baseline.as_ref().expect("baseline");
        let (l, h) = (rel_head.layer, rel_head.head);
        pass &= entry.argmax_label == rel_head.label && entry.mean[l][h] > base.mean[l][h];
        for (key, e) in &table.entries {
            worst = worst.max(max_abs_diff(&e.mean, &oracle.relation[key]));
        }
        details.push(format!(
            "{architecture:?} relation: argmax {} (planted {}), {:.3} vs baseline {:.3}",
            entry.argmax_label, rel_head.label, entry.mean[l][h], base.mean[l][h]
        ));
        pass &= worst <= 1e-7;
        details.push(format!("{architecture:?} max |table − oracle| = {worst:.2e}"));
    }
    outcome(pass, details.join("; "))
}

/// Many links per sample so a few hundred samples give thousands of probe examples.
fn dense_annotations() -> AnnotationConfig {
    AnnotationConfig { phrases: [6, 8], phrase_len: [1, 2], relations: [0, 1], ..AnnotationConfig::default() }
}

fn probe_split() -> CorefTaskConfig {
    CorefTaskConfig { neg_ratio: 1.0, split: SplitFractions([0.65, 0.05, 0.30]) }
}

// 6. Attention prober recovers labels carried by one planted head per class.
fn attention_prober() -> Outcome {
    let plants = CorefLabel::ALL
        .iter()
        .enumerate()
        .map(|(k, &label)| PlantSpec::CorefHead { layer: k / 4, head: k % 4, label, strength: 0.6 })
        .collect();
    let cfg = SynthConfig {
        seed: 6,
        samples: 480,
        text_tokens: [18, 24],
        regions: [8, 10],
        embeddings: false,
        annotations: dense_annotations(),
        plants,
        ..SynthConfig::default()
    };
    let (ds, _) = synth(&cfg);
    let task = build_coref_tasks(&ds, 6, &probe_split()).expect("coref tasks").vcc;
    let (train, test) = (task.count(Split::Train), task.count(Split::Test));
    let start = Instant::now();
    let result = train_prober(&ds, &task, FeatureKind::Attention, None, &TrainConfig::default(), 6, true)
        .expect("attention prober");
    let elapsed = start.elapsed().as_secs_f64();
    let acc = result.test.accuracy * 100.0;
    let control = result.shuffle_control.expect("control").accuracy * 100.0;
    outcome(
        train >= 2000 && test >= 500 && acc >= 95.0 && (control - 12.5).abs() <= 3.0 && elapsed < 30.0,
        format!("{train} train / {test} test, accuracy {acc:.2}%, shuffle control {control:.2}%, {elapsed:.2} s"),
    )
}

// 7. Bilinear prober detects links encoded in e_i ⊙ e_j.
fn embedding_prober() -> Outcome {
    let cfg = SynthConfig {
        seed: 7,
        samples: 400,
        text_tokens: [18, 24],
        regions: [8, 10],
        annotations: dense_annotations(),
        plants: vec![PlantSpec::CorefEmbedding { layers: vec![2], code_dims: 8, strength: 1.0 }],
        ..SynthConfig::default()
    };
    let (ds, _) = synth(&cfg);
    let task = build_coref_tasks(&ds, 7, &probe_split()).expect("coref tasks").vcd;
    let test = task.count(Split::Test);
    let result = train_prober(&ds, &task, FeatureKind::Embedding { layer: 2 }, None, &TrainConfig::default(), 7, true)
        .expect("embedding prober");
    let acc = result.test.accuracy * 100.0;
    let control = result.shuffle_control.expect("control").accuracy * 100.0;
    outcome(
        acc >= 90.0 && (control - 50.0).abs() <= 3.0,
        format!("{test} test pairs, accuracy {acc:.2}%, shuffle control {control:.2}%"),
    )
}

/// Largest relative error between analytic and central-difference gradients on 10 random
/// coordinates.
fn gradient_error<P: Prober>(mut model: P, inputs: &[P::Input], labels: &[usize], key: &str) -> f64 {
    let batch: Vec<usize> = (0..inputs.len()).collect();
    let l2 = 0.05;
    let mut grad = vec![0.0; model.params().len()];
    loss_and_grad(&model, inputs, labels, &batch, l2, Some(&mut grad));
    let mut rng = seed::rng(8, key);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let k = rng.random_range(0..grad.len());
        let h = 1e-5;
        let orig = model.params()[k];
        model.params_mut()[k] = orig + h;
        let up = loss_and_grad(&model, inputs, labels, &batch, l2, None);
        model.params_mut()[k] = orig - h;
        let down = loss_and_grad(&model, inputs, labels, &batch, l2, None);
        model.params_mut()[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

// 8. Analytic gradients of both probers agree with finite differences.
fn gradient_check() -> Outcome {
    let mut rng = seed::rng(8, "acceptance/grad");
    let (classes, dim) = (5, 6);
    let normal = |rng: &mut seed::Rng| -> f64 { StandardNormal.sample(rng) };
    let xs: Vec<Vec<f64>> = (0..20).map(|_| (0..dim).map(|_| normal(&mut rng)).collect()).collect();
    let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..classes)).collect();
    let mut linear = LinearProber::new(classes, dim);
    linear.standardize_from(xs.iter());
    linear.params_mut().iter_mut().for_each(|w| *w = 0.5 * normal(&mut rng));
    let linear_err = gradient_error(linear, &xs, &labels, "linear");

    let pairs: Vec<PairInput> = (0..20)
        .map(|_| PairInput {
            ei: (0..dim).map(|_| normal(&mut rng)).collect(),
            ej: (0..dim).map(|_| normal(&mut rng)).collect(),
        })
        .collect();
    let mut bilinear = BilinearProber::new(classes, dim, 8);
    bilinear.params_mut().iter_mut().for_each(|w| *w += 0.3 * normal(&mut rng));
    let bilinear_err = gradient_error(bilinear, &pairs, &labels, "bilinear");
    outcome(
        linear_err <= 1e-4 && bilinear_err <= 1e-4,
        format!("max relative error: linear {linear_err:.2e}, bilinear {bilinear_err:.2e}"),
    )
}

/// Annotation-only dataset: minimal traces, many relations.
fn relation_dataset() -> TraceDataset {
    let mut samples = Vec::new();
    let mut add = |id: String, relations: Vec<Relation>| {
        let mut annotation = AnnotationRecord::empty(id.clone());
        annotation.relations = relations;
        samples.push(Sample {
            trace: SampleTrace {
                sample_id: id,
                token_types: SampleTrace::layout_for(1, 10),
                attention_blocks: vec![],
                embeddings: vec![],
            },
            annotation,
        });
    };
    let rel = |k: usize, pred: &str, ann: String| Relation {
        subj_region: k % 10,
        obj_region: (k + 1) % 10,
        predicate_id: pred.to_string(),
        annotation_id: ann,
    };
    // 20,000 "on" pairs, 5 per annotation: only the per-predicate cap binds.
    for s in 0..400 {
        let rels = (0..50).map(|k| rel(k, "on", format!("a{}", k / 5))).collect();
        add(format!("on{s:04}"), rels);
    }
    // 12 "wearing" pairs per annotation: the per-annotation cap binds.
    for s in 0..300 {
        add(format!("wear{s:04}"), (0..12).map(|k| rel(k, "wearing", "a0".into())).collect());
    }
    // 35 rare predicates with distinct frequencies; only the top 30 predicates survive.
    for p in 0..35 {
        let count = 200 - 3 * p;
        let rels = (0..count).map(|k| rel(k, &format!("p{p:02}"), format!("a{}", k / 4))).collect();
        add(format!("rare{p:02}"), rels);
    }
    TraceDataset { model: ModelDescriptor::single_stream(StreamDims::new(1, 1, 2)), samples }
}

// 9. Relation sampling respects both caps and the top-k predicate filter.
fn relation_caps() -> Outcome {
    let ds = relation_dataset();
    let cfg = RelationTaskConfig::default();
    let retained = sample_relations(&ds, 9, &cfg);

    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &ds.samples {
        for r in &s.annotation.relations {
            *totals.entry(&r.predicate_id).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = totals.iter().map(|(p, c)| (*p, *c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let expected_top: BTreeSet<&str> = ranked.iter().take(30).map(|(p, _)| *p).collect();

    let mut per_pred: BTreeMap<&str, usize> = BTreeMap::new();
    let mut per_ann: BTreeMap<(&str, &str, &str), usize> = BTreeMap::new();
    for r in &retained {
        *per_pred.entry(&r.predicate).or_default() += 1;
        *per_ann.entry((&r.sample_id, &r.annotation_id, &r.predicate)).or_default() += 1;
    }
    let kept: BTreeSet<&str> = per_pred.keys().copied().collect();
    let top_ok = kept == expected_top
        && top_predicates(&ds, 30).iter().map(|(p, _)| p.as_str()).collect::<BTreeSet<_>>() == expected_top;
    let max_pred = per_pred.values().copied().max().unwrap_or(0);
    let max_ann = per_ann.values().copied().max().unwrap_or(0);
    let on = per_pred.get("on").copied().unwrap_or(0);
    let wearing = per_pred.get("wearing").copied().unwrap_or(0);
    outcome(
        top_ok && max_pred <= 15_000 && max_ann <= 5 && on == 15_000 && wearing == 1_500,
        format!(
            "{} predicates kept (top-30 ok: {top_ok}), max per predicate {max_pred}, max per annotation {max_ann}, \
             \"on\" 20000 → {on}, \"wearing\" 3600 → {wearing}",
            kept.len()
        ),
    )
}

fn same_bits(a: &TraceDataset, b: &TraceDataset) -> bool {
    let bits = |s: &Sample| -> Vec<u32> {
        let t = &s.trace;
        t.attention_blocks
            .iter()
            .flat_map(|b| b.values.iter())
            .chain(t.embeddings.iter().flat_map(|e| e.values.iter()))
            .map(|v| v.to_bits())
            .collect()
    };
    a == b && a.samples.iter().zip(&b.samples).all(|(x, y)| bits(x) == bits(y))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).expect("read json")).expect("parse json")
}

fn write_json(path: &Path, value: &Value) {
    std::fs::write(path, serde_json::to_vec_pretty(value).expect("json")).expect("write json");
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join("manifest.json");
    let mut v = read_json(&path);
    f(&mut v);
    write_json(&path, &v);
}

fn edit_annotation(dir: &Path, f: impl FnOnce(&mut Value)) {
    let path = dir.join("annotations.jsonl");
    let text = std::fs::read_to_string(&path).expect("annotations");
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut first: Value = serde_json::from_str(&lines[0]).expect("record");
    f(&mut first);
    lines[0] = first.to_string();
    std::fs::write(&path, lines.join("\n") + "\n").expect("write annotations");
}

/// Overwrites f32 values of a file at `offset_bytes + 4 * index`.
fn poke(dir: &Path, file: &str, offset: u64, values: &[(usize, f32)]) {
    let path = dir.join(file);
    let mut bytes = std::fs::read(&path).expect("blob");
    for &(index, v) in values {
        let at = offset as usize + 4 * index;
        bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, bytes).expect("write blob");
}

fn truncate(dir: &Path, file: &str, by: u64) {
    let f = std::fs::OpenOptions::new().write(true).open(dir.join(file)).expect("open");
    let len = f.metadata().expect("meta").len();
    f.set_len(len - by).expect("truncate");
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).expect("mkdir");
    for entry in std::fs::read_dir(from).expect("read dir") {
        let entry = entry.expect("entry");
        std::fs::copy(entry.path(), to.join(entry.file_name())).expect("copy");
    }
}

type Corruption = (&'static str, Box<dyn Fn(&Path, &Value)>);

fn corruptions() -> Vec<Corruption> {
    let block0 = |m: &Value| m["samples"][0]["blocks"][0]["offset_bytes"].as_u64().unwrap();
    let cols0 = |m: &Value| m["samples"][0]["blocks"][0]["cols"].as_u64().unwrap() as usize;
    vec![
        ("row sum above one", Box::new(move |d, m| poke(d, "attn.bin", block0(m), &[(0, 2.0)]))),
        (
            "row sum below one",
            Box::new(move |d, m| {
                let c = cols0(m);
                poke(d, "attn.bin", block0(m), &(0..c).map(|k| (k, 0.5 / c as f32)).collect::<Vec<_>>())
            }),
        ),
        (
            "negative weight",
            Box::new(move |d, m| {
                let c = cols0(m);
                let mut v: Vec<(usize, f32)> = (0..c).map(|k| (k, 0.0)).collect();
                v[0].1 = -0.5;
                v[1].1 = 1.5;
                poke(d, "attn.bin", block0(m), &v)
            }),
        ),
        ("NaN attention", Box::new(move |d, m| poke(d, "attn.bin", block0(m), &[(3, f32::NAN)]))),
        (
            "infinite embedding",
            Box::new(|d, m| {
                let off = m["samples"][0]["embeddings"][0]["offset_bytes"].as_u64().unwrap();
                poke(d, "emb.bin", off, &[(1, f32::INFINITY)])
            }),
        ),
        ("span past caption", Box::new(|d, _| edit_annotation(d, |a| a["phrases"][0]["token_span"] = json!([0, 999])))),
        ("inverted span", Box::new(|d, _| edit_annotation(d, |a| a["phrases"][0]["token_span"] = json!([2, 1])))),
        ("link to unknown phrase", Box::new(|d, _| edit_annotation(d, |a| a["coref_links"][0]["phrase_id"] = json!("nope")))),
        (
            "duplicate phrase id",
            Box::new(|d, _| {
                edit_annotation(d, |a| {
                    let first = a["phrases"][0].clone();
                    a["phrases"].as_array_mut().unwrap().push(first)
                })
            }),
        ),
        ("link region out of range", Box::new(|d, _| edit_annotation(d, |a| a["coref_links"][0]["region_index"] = json!(999)))),
        ("relation region out of range", Box::new(|d, _| edit_annotation(d, |a| a["relations"][0]["obj_region"] = json!(999)))),
        ("annotation for unknown sample", Box::new(|d, _| edit_annotation(d, |a| a["sample_id"] = json!("ghost")))),
        (
            "overlapping offsets",
            Box::new(|d, _| {
                edit_manifest(d, |m| {
                    let off = m["samples"][0]["blocks"][0]["offset_bytes"].clone();
                    m["samples"][0]["blocks"][1]["offset_bytes"] = off;
                })
            }),
        ),
        (
            "offset past end of file",
            Box::new(|d, _| edit_manifest(d, |m| m["samples"][0]["blocks"][0]["offset_bytes"] = json!(1u64 << 40))),
        ),
        ("truncated attention blob", Box::new(|d, _| truncate(d, "attn.bin", 4))),
        ("truncated embedding blob", Box::new(|d, _| truncate(d, "emb.bin", 4))),
        ("wrong format version", Box::new(|d, _| edit_manifest(d, |m| m["format_version"] = json!("vtf-0")))),
        ("big-endian payload", Box::new(|d, _| edit_manifest(d, |m| m["endianness"] = json!("big")))),
        (
            "duplicate sample id",
            Box::new(|d, _| {
                edit_manifest(d, |m| {
                    let id = m["samples"][0]["id"].clone();
                    m["samples"][1]["id"] = id;
                })
            }),
        ),
        ("block shape inconsistent with tokens", Box::new(|d, _| edit_manifest(d, |m| m["samples"][0]["m"] = json!(1)))),
    ]
}

/// A corruption is caught when loading fails or the loaded dataset has violations.
fn caught(dir: &Path) -> bool {
    match load_dataset(dir) {
        Err(_) => true,
        Ok(ds) => !validate_dataset(&ds).is_valid(),
    }
}

// 10. Write→read is bit-exact; every corruption class is rejected.
fn vtf_round_trip(tmp: &Path) -> Outcome {
    let mut exact = 0;
    for k in 0..10u64 {
        let architecture = if k % 2 == 0 { Architecture::SingleStream } else { Architecture::TwoStream };
        let cfg = SynthConfig {
            seed: 100 + k,
            samples: 3 + k as usize,
            model: ModelShape { architecture, ..ModelShape::default() },
            embeddings: k % 3 != 2,
            ..SynthConfig::default()
        };
        let (ds, _) = synth(&cfg);
        let (a, b) = (tmp.join(format!("rt{k}a")), tmp.join(format!("rt{k}b")));
        write_dataset(&ds, &a).expect("write");
        let back = load_dataset(&a).expect("read");
        write_dataset(&back, &b).expect("rewrite");
        let files_equal = ["manifest.json", "attn.bin", "emb.bin", "annotations.jsonl"]
            .iter()
            .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
        exact += usize::from(same_bits(&ds, &back) && files_equal);
    }

    let cfg = SynthConfig {
        seed: 10,
        samples: 3,
        annotations: AnnotationConfig { relations: [1, 2], ..AnnotationConfig::default() },
        ..SynthConfig::default()
    };
    let (base_ds, _) = synth(&cfg);
    let base = tmp.join("base");
    write_dataset(&base_ds, &base).expect("write base");
    let base_ok = !caught(&base);
    let manifest = read_json(&base.join("manifest.json"));
    let classes = corruptions();
    let mut missed = Vec::new();
    for (k, (name, corrupt)) in classes.iter().enumerate() {
        let dir = tmp.join(format!("corrupt{k}"));
        copy_dir(&base, &dir);
        corrupt(&dir, &manifest);
        if !caught(&dir) {
            missed.push(*name);
        }
    }
    let detected = classes.len() - missed.len();
    outcome(
        exact == 10 && base_ok && classes.len() == 20 && missed.is_empty(),
        format!(
            "{exact}/10 datasets bit-exact; {detected}/{} corruption classes caught{}",
            classes.len(),
            if missed.is_empty() { String::new() } else { format!(" (missed: {})", missed.join(", ")) }
        ),
    )
}

fn run_cli(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_value-probe")).args(args).output().expect("spawn value-probe");
    if !out.status.success() {
        eprintln!("value-probe {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim_end());
    }
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return out;
    };
    for entry in entries {
        let entry = entry.expect("entry");
        let path = entry.path();
        if path.is_dir() {
            for (k, v) in dir_contents(&path) {
                out.insert(format!("{}/{k}", entry.file_name().to_string_lossy()), v);
            }
        } else {
            out.insert(entry.file_name().to_string_lossy().into_owned(), std::fs::read(&path).expect("read"));
        }
    }
    out
}

// 11. Every CLI command rerun with the same trace and seed produces identical artifacts.
fn cli_determinism(tmp: &Path) -> Outcome {
    let config = json!({
        "seed": 21,
        "samples": 24,
        "plants": [
            {"kind": "coref_head", "layer": 1, "head": 2, "label": "people", "strength": 0.8},
            {"kind": "relation_head", "layer": 2, "head": 3, "predicate": "on", "strength": 0.8},
            {"kind": "separable_modalities", "layers": [0], "strength": 3.0},
            {"kind": "sentence_signal", "buckets": 3, "strength": 2.0},
            {"kind": "coref_embedding", "layers": [1], "code_dims": 8, "strength": 1.0}
        ]
    });
    let config_path = tmp.join("synth.json");
    write_json(&config_path, &config);
    let config_path = config_path.to_string_lossy().into_owned();

    // Reruns reuse the same paths: reports record their command line.
    let dir = tmp.join("cli");
    let trace = dir.join("trace");
    let out_dir = dir.join("out");
    let trace_arg = trace.to_string_lossy().into_owned();
    let mut failures = Vec::new();
    let mut runs = 0;

    let mut synth_runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(&trace);
        let (code, _) = run_cli(&["synth", "--config", &config_path, "--out", &trace_arg]);
        assert_eq!(code, 0, "synth failed");
        synth_runs.push(dir_contents(&trace));
    }
    runs += 1;
    if synth_runs[0] != synth_runs[1] {
        failures.push("synth".to_string());
    }

    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("validate", vec!["validate"]),
        ("fusion", vec!["fusion", "--seed", "3"]),
        ("mi csv", vec!["mi", "--seed", "5"]),
        ("mi json", vec!["mi", "--out", "@/mi.json"]),
        ("heads", vec!["heads", "--out", "@/heads.json"]),
        ("coref-stats", vec!["coref-stats", "--baseline", "--draws", "2", "--seed", "5", "--out", "@/coref.json"]),
        ("relation-stats", vec!["relation-stats", "--baseline", "--seed", "5", "--out", "@/rel.json"]),
        ("probe attn", vec!["probe", "--task", "vcc", "--shuffle-control", "--seed", "5", "--out", "@/probe/model.json"]),
        ("probe emb", vec!["probe", "--task", "vcd", "--features", "emb", "--layer", "1", "--seed", "5"]),
        ("sent", vec!["sent", "--labels", "#/sentence_labels.json", "--seed", "5", "--out", "@/sent.json"]),
        ("mismatch", vec!["mismatch", "--seed", "9"]),
        ("export-embeddings", vec!["export-embeddings", "--layer", "0"]),
        ("export-heatmap", vec!["export-heatmap", "--input", "@/mi.json", "--pointer", "/result/visual"]),
    ];
    for (name, args) in &commands {
        let mut full: Vec<String> = args
            .iter()
            .map(|a| a.replace('@', &out_dir.to_string_lossy()).replace('#', &trace_arg))
            .collect();
        if *name != "export-heatmap" {
            full.push("--trace".into());
            full.push(trace_arg.clone());
        }
        let refs: Vec<&str> = full.iter().map(String::as_str).collect();
        let mut outputs = Vec::new();
        for _ in 0..2 {
            // Keep mi.json for the heatmap export; clear everything else between runs.
            for (file, _) in dir_contents(&out_dir) {
                if file != "mi.json" {
                    let _ = std::fs::remove_file(out_dir.join(&file));
                }
            }
            std::fs::create_dir_all(&out_dir).expect("out dir");
            let (code, stdout) = run_cli(&refs);
            outputs.push((code, stdout, dir_contents(&out_dir)));
        }
        runs += 1;
        if outputs[0].0 != 0 || outputs[0] != outputs[1] {
            failures.push(format!("{name} (exit {})", outputs[0].0));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{}/{runs} commands byte-identical on rerun{}", runs - failures.len(), if failures.is_empty() {
            String::new()
        } else {
            format!(" (differ or failed: {})", failures.join(", "))
        }),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<Criterion> = vec![
        ("NMI oracle equivalence", Box::new(nmi_oracle)),
        ("k-means planted recovery", Box::new(kmeans_recovery)),
        ("MI conservation", Box::new(mi_conservation)),
        ("image-to-text head criterion", Box::new(i2t_heads)),
        ("coref/relation head tables", Box::new(pair_tables)),
        ("attention prober", Box::new(attention_prober)),
        ("embedding prober", Box::new(embedding_prober)),
        ("gradient check", Box::new(gradient_check)),
        ("relation sampler caps", Box::new(relation_caps)),
        ("VTF round-trip", Box::new(|| vtf_round_trip(tmp.path()))),
        ("CLI determinism", Box::new(|| cli_determinism(tmp.path()))),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("{status} criterion {}: {name}: {}", k + 1, result.detail);
        failed += usize::from(!result.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{grid_argmax, max_attention, Geometry, HeadGrid, HeadId, HeadLayout, StatsError};
use crate::seed;
use crate::trace::{Sample, TraceDataset, CROSS_XATT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Region attending to the linked phrase.
    #[serde(rename = "vt")]
    VisualToText,
    /// Phrase tokens attending to the linked region.
    #[serde(rename = "tv")]
    TextToVisual,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::VisualToText => "vt",
            Direction::TextToVisual => "tv",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vt" => Ok(Direction::VisualToText),
            "tv" => Ok(Direction::TextToVisual),
            _ => Err(format!("direction must be vt or tv, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairStatsOptions {
    pub baseline: bool,
    pub seed: u64,
    /// Random partners drawn per link/pair for the baseline; their values are averaged.
    pub draws: usize,
    /// Two-stream sublayer read for coreference statistics.
    pub two_stream_coref_block: String,
}

impl Default for PairStatsOptions {
    fn default() -> Self {
        Self { baseline: false, seed: 0, draws: 1, two_stream_coref_block: CROSS_XATT.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineStat {
    pub count: usize,
    pub mean: HeadGrid,
    pub baseline_mean: f64,
    pub baseline_argmax_head: HeadId,
    pub baseline_argmax_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadStatEntry {
    /// Links or pairs contributing to `mean`.
    pub count: usize,
    /// Mean max-attention per head.
    pub mean: HeadGrid,
    pub mean_max_attention: f64,
    pub argmax_head: HeadId,
    pub argmax_label: String,
    pub baseline: Option<BaselineStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadStatTable {
    pub statistic: String,
    pub layers: Vec<String>,
    pub heads: usize,
    pub entries: BTreeMap<String, HeadStatEntry>,
}

#[derive(Default)]
struct Accumulator {
    count: usize,
    sum: HeadGrid,
    baseline_count: usize,
    baseline_sum: HeadGrid,
}

impl Accumulator {
    fn new(layout: &HeadLayout) -> Self {
        Self { count: 0, sum: layout.zeros(), baseline_count: 0, baseline_sum: layout.zeros() }
    }
}

fn add(acc: &mut HeadGrid, values: &HeadGrid, scale: f64) {
    for (a, v) in acc.iter_mut().flatten().zip(values.iter().flatten()) {
        *a += v * scale;
    }
}

fn finish(statistic: String, layout: &HeadLayout, accs: BTreeMap<String, Accumulator>, baseline: bool) -> HeadStatTable {
    let mut entries = BTreeMap::new();
    for (key, acc) in accs {
        let mean = scaled(&acc.sum, acc.count);
        let (argmax_head, mean_max_attention) = grid_argmax(&mean);
        let baseline = baseline.then(|| {
            let mean = scaled(&acc.baseline_sum, acc.baseline_count);
            let (head, value) = grid_argmax(&mean);
            BaselineStat {
                count: acc.baseline_count,
                mean,
                baseline_mean: if acc.baseline_count == 0 { 0.0 } else { value },
                baseline_argmax_head: head,
                baseline_argmax_label: head.to_string(),
            }
        });
        entries.insert(
            key,
            HeadStatEntry {
                count: acc.count,
                mean,
                mean_max_attention,
                argmax_label: argmax_head.to_string(),
                argmax_head,
                baseline,
            },
        );
    }
    HeadStatTable { statistic, layers: layout.row_labels(), heads: layout.heads, entries }
}

fn scaled(sum: &HeadGrid, count: usize) -> HeadGrid {
    let d = count.max(1) as f64;
    sum.iter().map(|row| row.iter().map(|v| v / d).collect()).collect()
}

/// Max attention between a region and a phrase at every head of the layout, in `dir`.
fn link_grid(
    sample: &Sample,
    geom: &Geometry,
    layout: &HeadLayout,
    region: usize,
    phrase_positions: &[usize],
    dir: Direction,
) -> Result<HeadGrid, StatsError> {
    let region_pos = [geom.region_position(region)];
    let (sources, targets) = match dir {
        Direction::VisualToText => (&region_pos[..], phrase_positions),
        Direction::TextToVisual => (phrase_positions, &region_pos[..]),
    };
    let mut grid = layout.zeros();
    for (row, layer) in layout.layers.iter().enumerate() {
        max_attention(&sample.trace, geom, layer, sources, targets, &mut grid[row])?;
    }
    Ok(grid)
}

fn phrase_positions(sample: &Sample, phrase_id: &str) -> Result<Vec<usize>, StatsError> {
    let phrase = sample.annotation.phrase(phrase_id).ok_or_else(|| StatsError::BadAnnotation {
        sample: sample.id().to_string(),
        what: format!("link to unknown phrase {phrase_id:?}"),
    })?;
    let positions: Vec<usize> = phrase.positions().collect();
    if positions.is_empty() {
        return Err(StatsError::BadAnnotation {
            sample: sample.id().to_string(),
            what: format!("phrase {phrase_id:?} is empty"),
        });
    }
    Ok(positions)
}

/// Per coreference label, the mean over links of the max attention between the linked region
/// and phrase tokens, for every head; optionally paired with a random-partner baseline.
pub fn coref_head_stats(
    dataset: &TraceDataset,
    dir: Direction,
    opts: &PairStatsOptions,
) -> Result<HeadStatTable, StatsError> {
    let layout = HeadLayout::cross_modal(&dataset.model, &opts.two_stream_coref_block);
    let mut accs: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut links = 0usize;
    for &i in &dataset.canonical_order() {
        let sample = &dataset.samples[i];
        if sample.annotation.coref_links.is_empty() {
            continue;
        }
        let geom = Geometry::of(&sample.trace, dataset.model.architecture)?;
        let mut rng = seed::rng(opts.seed, sample.id());
        let linked: HashSet<(&str, usize)> = sample
            .annotation
            .coref_links
            .iter()
            .map(|l| (l.phrase_id.as_str(), l.region_index))
            .collect();
        for link in &sample.annotation.coref_links {
            if link.region_index >= geom.n {
                return Err(StatsError::BadAnnotation {
                    sample: sample.id().to_string(),
                    what: format!("region {} out of range", link.region_index),
                });
            }
            links += 1;
            let acc = accs.entry(link.label.to_string()).or_insert_with(|| Accumulator::new(&layout));
            let positions = phrase_positions(sample, &link.phrase_id)?;
            let grid = link_grid(sample, &geom, &layout, link.region_index, &positions, dir)?;
            add(&mut acc.sum, &grid, 1.0);
            acc.count += 1;
            if !opts.baseline {
                continue;
            }
            // V→T keeps the region and swaps in a phrase; T→V keeps the phrase and swaps in a region.
            let drawn: Vec<(usize, Vec<usize>)> = match dir {
                Direction::VisualToText => {
                    let pool: Vec<&str> = sample
                        .annotation
                        .phrases
                        .iter()
                        .map(|p| p.phrase_id.as_str())
                        .filter(|p| !linked.contains(&(*p, link.region_index)))
                        .collect();
                    if pool.is_empty() {
                        continue;
                    }
                    (0..opts.draws.max(1))
                        .map(|_| {
                            let p = pool[rng.random_range(0..pool.len())];
                            phrase_positions(sample, p).map(|pos| (link.region_index, pos))
                        })
                        .collect::<Result<_, _>>()?
                }
                Direction::TextToVisual => {
                    let pool: Vec<usize> =
                        (0..geom.n).filter(|r| !linked.contains(&(link.phrase_id.as_str(), *r))).collect();
                    if pool.is_empty() {
                        continue;
                    }
                    (0..opts.draws.max(1))
                        .map(|_| (pool[rng.random_range(0..pool.len())], positions.clone()))
                        .collect()
                }
            };
            let scale = 1.0 / drawn.len() as f64;
            for (region, pos) in &drawn {
                let grid = link_grid(sample, &geom, &layout, *region, pos, dir)?;
                add(&mut acc.baseline_sum, &grid, scale);
            }
            acc.baseline_count += 1;
        }
    }
    if links == 0 {
        return Err(StatsError::NoCorefLinks);
    }
    Ok(finish(format!("coref_{dir}"), &layout, accs, opts.baseline))
}

fn relation_grid(
    sample: &Sample,
    geom: &Geometry,
    layout: &HeadLayout,
    s: usize,
    o: usize,
) -> Result<HeadGrid, StatsError> {
    let (sp, op) = ([geom.region_position(s)], [geom.region_position(o)]);
    let mut grid = layout.zeros();
    let mut back = vec![0.0; layout.heads];
    for (row, layer) in layout.layers.iter().enumerate() {
        max_attention(&sample.trace, geom, layer, &sp, &op, &mut grid[row])?;
        max_attention(&sample.trace, geom, layer, &op, &sp, &mut back)?;
        for (fwd, b) in grid[row].iter_mut().zip(&back) {
            *fwd = (*fwd + b) / 2.0;
        }
    }
    Ok(grid)
}

/// Per predicate, the mean over (subject, object) pairs of the direction-averaged attention
/// between the two regions, for every visual→visual head.
pub fn relation_head_stats(dataset: &TraceDataset, opts: &PairStatsOptions) -> Result<HeadStatTable, StatsError> {
    let layout = HeadLayout::visual_self(&dataset.model);
    let mut accs: BTreeMap<String, Accumulator> = BTreeMap::new();
    let mut pairs = 0usize;
    for &i in &dataset.canonical_order() {
        let sample = &dataset.samples[i];
        if sample.annotation.relations.is_empty() {
            continue;
        }
        let geom = Geometry::of(&sample.trace, dataset.model.architecture)?;
        let mut rng = seed::rng(opts.seed, sample.id());
        let related: HashSet<(usize, usize)> = sample
            .annotation
            .relations
            .iter()
            .flat_map(|r| [(r.subj_region, r.obj_region), (r.obj_region, r.subj_region)])
            .collect();
        let pool: Vec<(usize, usize)> = if opts.baseline {
            (0..geom.n)
                .flat_map(|a| (a + 1..geom.n).map(move |b| (a, b)))
                .filter(|p| !related.contains(p))
                .collect()
        } else {
            Vec::new()
        };
        for rel in &sample.annotation.relations {
            if rel.subj_region >= geom.n || rel.obj_region >= geom.n {
                return Err(StatsError::BadAnnotation {
                    sample: sample.id().to_string(),
                    what: format!("relation {} region out of range", rel.predicate_id),
                });
            }
            pairs += 1;
            let acc = accs.entry(rel.predicate_id.clone()).or_insert_with(|| Accumulator::new(&layout));
            let grid = relation_grid(sample, &geom, &layout, rel.subj_region, rel.obj_region)?;
            add(&mut acc.sum, &grid, 1.0);
            acc.count += 1;
            if !opts.baseline || pool.is_empty() {
                continue;
            }
            let draws = opts.draws.max(1);
            for _ in 0..draws {
                let (a, b) = pool[rng.random_range(0..pool.len())];
                let grid = relation_grid(sample, &geom, &layout, a, b)?;
                add(&mut acc.baseline_sum, &grid, 1.0 / draws as f64);
            }
            acc.baseline_count += 1;
        }
    }
    if pairs == 0 {
        return Err(StatsError::NoRelations);
    }
    Ok(finish("relation".to_string(), &layout, accs, opts.baseline))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::*;

    /// m = 3 text tokens, n = 2 regions, one head; positions: CLS 0, text 1..=3, SEP 4, regions 5, 6.
    fn dataset(fill: impl Fn(usize, &mut [f32])) -> TraceDataset {
        let s = 7;
        let mut block = AttentionBlock::zeros(JOINT, 0, Modality::Joint, Modality::Joint, 1, s, s);
        for r in 0..s {
            fill(r, block.row_mut(0, r));
        }
        let mut annotation = AnnotationRecord::empty("x");
        annotation.phrases.push(Phrase { phrase_id: "p".into(), token_span: [0, 3], surface_text: "a red car".into() });
        annotation.coref_links.push(CorefLink { phrase_id: "p".into(), region_index: 0, label: CorefLabel::Vehicles });
        annotation.relations.push(Relation {
            subj_region: 0,
            obj_region: 1,
            predicate_id: "near".into(),
            annotation_id: "a0".into(),
        });
        TraceDataset {
            model: ModelDescriptor::single_stream(StreamDims::new(1, 1, 2)),
            samples: vec![Sample {
                trace: SampleTrace {
                    sample_id: "x".into(),
                    token_types: SampleTrace::layout_for(3, 2),
                    attention_blocks: vec![block],
                    embeddings: vec![],
                },
                annotation,
            }],
        }
    }

    #[test]
    fn phrase_max_rule() {
        let ds = dataset(|r, row| {
            if r == 5 {
                row.copy_from_slice(&[0.1, 0.1, 0.4, 0.2, 0.1, 0.05, 0.05]);
            } else {
                row[0] = 1.0;
            }
        });
        let t = coref_head_stats(&ds, Direction::VisualToText, &PairStatsOptions::default()).unwrap();
        let e = &t.entries["vehicles"];
        assert_eq!(e.count, 1);
        assert!((e.mean[0][0] - 0.4).abs() < 1e-7);
        assert_eq!(e.argmax_label, "1-1");
    }

    #[test]
    fn relation_averages_directions() {
        let ds = dataset(|r, row| match r {
            5 => {
                row[6] = 0.3;
                row[0] = 0.7;
            }
            6 => {
                row[5] = 0.1;
                row[0] = 0.9;
            }
            _ => row[0] = 1.0,
        });
        let t = relation_head_stats(&ds, &PairStatsOptions::default()).unwrap();
        assert!((t.entries["near"].mean[0][0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn missing_annotations_error() {
        let mut ds = dataset(|_, row| row[0] = 1.0);
        ds.samples[0].annotation.coref_links.clear();
        ds.samples[0].annotation.relations.clear();
        assert!(matches!(
            coref_head_stats(&ds, Direction::TextToVisual, &PairStatsOptions::default()),
            Err(StatsError::NoCorefLinks)
        ));
        assert!(matches!(relation_head_stats(&ds, &PairStatsOptions::default()), Err(StatsError::NoRelations)));
    }

    #[test]
    fn direction_parses() {
        assert_eq!("vt".parse::<Direction>().unwrap(), Direction::VisualToText);
        assert!("xx".parse::<Direction>().is_err());
    }
}
